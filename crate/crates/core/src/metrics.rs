//! Pose-error metrics on `T x J x 3` sequences in millimeters.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::{Error, Result};

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEP_MM: f64 = 5.0;
/// Thresholds `0, 5, ..., 150`.
pub const AUC_THRESHOLDS: usize = 31;

fn check(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<()> {
    if pred.dim() != gt.dim() || pred.dim().2 != 3 {
        return Err(Error::Shape { expected: format!("{:?}", gt.dim()), got: format!("{:?}", pred.dim()) });
    }
    Ok(())
}

/// Per-joint distances, `T x J`.
pub fn joint_errors(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<Array2<f64>> {
    check(pred, gt)?;
    Ok((pred - gt).map_axis(Axis(2), |d| d.dot(&d).sqrt()))
}

pub fn mpjpe(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    Ok(joint_errors(pred, gt)?.mean().unwrap_or(0.0))
}

/// Result of aligning one frame.
#[derive(Debug, Clone)]
pub struct Alignment {
    pub aligned: Array2<f64>,
    /// The prediction was collinear; only translation was applied.
    pub degenerate: bool,
}

fn centroid(x: &ArrayView2<f64>) -> Vector3<f64> {
    let m = x.mean_axis(Axis(0)).expect("non-empty frame");
    Vector3::new(m[0], m[1], m[2])
}

/// Similarity transform of `pred` (`J x 3`) closest to `gt` in squared
/// error, with proper rotations only.
pub fn procrustes_align(pred: ArrayView2<f64>, gt: ArrayView2<f64>) -> Alignment {
    let (mx, my) = (centroid(&pred), centroid(&gt));
    let row = |a: &ArrayView2<f64>, j: usize, m: &Vector3<f64>| Vector3::new(a[[j, 0]], a[[j, 1]], a[[j, 2]]) - m;
    let n = pred.nrows();
    let mut h = Matrix3::zeros();
    let mut cov_x = Matrix3::zeros();
    let mut var_x = 0.0;
    for j in 0..n {
        let x = row(&pred, j, &mx);
        let y = row(&gt, j, &my);
        h += x * y.transpose();
        cov_x += x * x.transpose();
        var_x += x.norm_squared();
    }
    let sx = cov_x.symmetric_eigenvalues();
    let mut ev: Vec<f64> = sx.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let degenerate = var_x <= 1e-18 || ev[1] <= 1e-12 * ev[0];
    let (s, r) = if degenerate {
        (1.0, Matrix3::identity())
    } else {
        let svd = h.svd(true, true);
        let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let v = v_t.transpose();
        let d = (v * u.transpose()).determinant().signum();
        let dm = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
        let r = v * dm * u.transpose();
        let sv = svd.singular_values;
        let trace = sv[0] + sv[1] + d * sv[2];
        (trace / var_x, r)
    };
    let mut aligned = Array2::zeros((n, 3));
    for j in 0..n {
        let y = s * (r * row(&pred, j, &mx)) + my;
        for c in 0..3 {
            aligned[[j, c]] = y[c];
        }
    }
    Alignment { aligned, degenerate }
}

/// Per-frame aligned prediction and the number of degenerate frames.
pub fn align_sequence(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<(Array3<f64>, usize)> {
    check(pred, gt)?;
    let mut out = Array3::zeros(pred.dim());
    let mut degenerate = 0;
    for t in 0..pred.dim().0 {
        let a = procrustes_align(pred.index_axis(Axis(0), t), gt.index_axis(Axis(0), t));
        degenerate += a.degenerate as usize;
        out.index_axis_mut(Axis(0), t).assign(&a.aligned);
    }
    Ok((out, degenerate))
}

pub fn p_mpjpe(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    let (aligned, _) = align_sequence(pred, gt)?;
    mpjpe(&aligned, gt)
}

/// Percentage of joints whose error is at most `threshold_mm`.
pub fn pck(pred: &Array3<f64>, gt: &Array3<f64>, threshold_mm: f64) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    Ok(100.0 * e.iter().filter(|&&v| v <= threshold_mm).count() as f64 / e.len().max(1) as f64)
}

/// Mean PCK over thresholds `0, 5, ..., 150` mm.
pub fn auc(pred: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    let e = joint_errors(pred, gt)?;
    let total: usize = (0..AUC_THRESHOLDS).map(|i| e.iter().filter(|&&v| v <= i as f64 * AUC_STEP_MM).count()).sum();
    Ok(100.0 * total as f64 / (AUC_THRESHOLDS * e.len().max(1)) as f64)
}

/// Error sums for one clip, kept so that aggregates weight every joint
/// equally.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipMetrics {
    pub id: String,
    pub view: String,
    pub frames: usize,
    pub joints: usize,
    pub degenerate_frames: usize,
    sum_err: f64,
    sum_aligned_err: f64,
    /// Joints within each AUC threshold.
    within: [usize; AUC_THRESHOLDS],
}

impl ClipMetrics {
    pub fn compute(id: &str, view: &str, pred: &Array3<f64>, gt: &Array3<f64>) -> Result<Self> {
        let e = joint_errors(pred, gt)?;
        let (aligned, degenerate_frames) = align_sequence(pred, gt)?;
        let ea = joint_errors(&aligned, gt)?;
        let mut within = [0; AUC_THRESHOLDS];
        for (i, w) in within.iter_mut().enumerate() {
            *w = e.iter().filter(|&&v| v <= i as f64 * AUC_STEP_MM).count();
        }
        Ok(ClipMetrics {
            id: id.to_string(),
            view: view.to_string(),
            frames: pred.dim().0,
            joints: pred.dim().1,
            degenerate_frames,
            sum_err: e.sum(),
            sum_aligned_err: ea.sum(),
            within,
        })
    }

    fn n(&self) -> f64 {
        (self.frames * self.joints).max(1) as f64
    }

    pub fn mpjpe_mm(&self) -> f64 {
        self.sum_err / self.n()
    }

    pub fn p_mpjpe_mm(&self) -> f64 {
        self.sum_aligned_err / self.n()
    }

    pub fn pck_percent(&self) -> f64 {
        100.0 * self.within[AUC_THRESHOLDS - 1] as f64 / self.n()
    }

    pub fn auc_percent(&self) -> f64 {
        100.0 * self.within.iter().sum::<usize>() as f64 / (AUC_THRESHOLDS as f64 * self.n())
    }
}

/// Aggregate metrics over clips, each joint of each frame weighted equally.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck_percent: f64,
    pub auc_percent: f64,
    pub num_frames: usize,
    pub degenerate_frames: usize,
    pub per_clip: Vec<ClipMetrics>,
}

/// Top-level keys of the key-value report, in file order.
pub const REPORT_KEYS: [&str; 7] = ["mpjpe_mm", "p_mpjpe_mm", "pck_percent", "auc_percent", "num_clips", "num_frames", "degenerate_frames"];
/// Per-clip keys, written as `clip.<id>.<view>.<key>`.
pub const CLIP_KEYS: [&str; 5] = ["mpjpe_mm", "p_mpjpe_mm", "pck_percent", "auc_percent", "frames"];

impl EvalReport {
    pub fn from_clips(per_clip: Vec<ClipMetrics>) -> Self {
        let n: f64 = per_clip.iter().map(|c| (c.frames * c.joints) as f64).sum::<f64>().max(1.0);
        let within = |i: usize| per_clip.iter().map(|c| c.within[i]).sum::<usize>() as f64;
        EvalReport {
            mpjpe_mm: per_clip.iter().map(|c| c.sum_err).sum::<f64>() / n,
            p_mpjpe_mm: per_clip.iter().map(|c| c.sum_aligned_err).sum::<f64>() / n,
            pck_percent: 100.0 * within(AUC_THRESHOLDS - 1) / n,
            auc_percent: 100.0 * (0..AUC_THRESHOLDS).map(within).sum::<f64>() / (AUC_THRESHOLDS as f64 * n),
            num_frames: per_clip.iter().map(|c| c.frames).sum(),
            degenerate_frames: per_clip.iter().map(|c| c.degenerate_frames).sum(),
            per_clip,
        }
    }

    pub fn num_clips(&self) -> usize {
        self.per_clip.len()
    }

    /// `key=value` lines: the top-level keys, then every clip.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let top = [
            format!("{:.6}", self.mpjpe_mm),
            format!("{:.6}", self.p_mpjpe_mm),
            format!("{:.6}", self.pck_percent),
            format!("{:.6}", self.auc_percent),
            self.num_clips().to_string(),
            self.num_frames.to_string(),
            self.degenerate_frames.to_string(),
        ];
        for (k, v) in REPORT_KEYS.iter().zip(top) {
            let _ = writeln!(s, "{k}={v}");
        }
        for c in &self.per_clip {
            let vals = [
                format!("{:.6}", c.mpjpe_mm()),
                format!("{:.6}", c.p_mpjpe_mm()),
                format!("{:.6}", c.pck_percent()),
                format!("{:.6}", c.auc_percent()),
                c.frames.to_string(),
            ];
            for (k, v) in CLIP_KEYS.iter().zip(vals) {
                let _ = writeln!(s, "clip.{}.{}.{k}={v}", c.id, c.view);
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "clips            {}", self.num_clips());
        let _ = writeln!(s, "frames           {}", self.num_frames);
        let _ = writeln!(s, "MPJPE            {:.2} mm", self.mpjpe_mm);
        let _ = writeln!(s, "P-MPJPE          {:.2} mm", self.p_mpjpe_mm);
        let _ = writeln!(s, "PCK@150mm        {:.2} %", self.pck_percent);
        let _ = writeln!(s, "AUC (0-150mm)    {:.2} %", self.auc_percent);
        if self.degenerate_frames > 0 {
            let _ = writeln!(s, "degenerate frames aligned by translation only: {}", self.degenerate_frames);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<14} {:<6} {:>10} {:>10} {:>8} {:>8}", "clip", "view", "MPJPE", "P-MPJPE", "PCK", "AUC");
        for c in &self.per_clip {
            let _ = writeln!(s, "{:<14} {:<6} {:>10.2} {:>10.2} {:>8.2} {:>8.2}", c.id, c.view, c.mpjpe_mm(), c.p_mpjpe_mm(), c.pck_percent(), c.auc_percent());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn rand_seq(t: usize, j: usize, seed: u64) -> Array3<f64> {
        let mut rng = rng_from(seed);
        Array3::from_shape_fn((t, j, 3), |_| rng.random_range(-500.0..500.0))
    }

    fn rotation(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).matrix()
    }

    fn transform(x: &Array3<f64>, s: f64, r: &Matrix3<f64>, t: Vector3<f64>) -> Array3<f64> {
        let mut out = x.clone();
        for mut p in out.lanes_mut(Axis(2)) {
            let v = s * (r * Vector3::new(p[0], p[1], p[2])) + t;
            p[0] = v[0];
            p[1] = v[1];
            p[2] = v[2];
        }
        out
    }

    #[test]
    fn mpjpe_examples() {
        let gt = rand_seq(4, 17, 1);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let mut pred = gt.clone();
        for mut p in pred.lanes_mut(Axis(2)) {
            p[0] += 3.0;
            p[1] += 4.0;
        }
        assert!((mpjpe(&pred, &gt).unwrap() - 5.0).abs() < 1e-9);
        assert!(mpjpe(&rand_seq(3, 17, 1), &gt).is_err());
    }

    #[test]
    fn procrustes_undoes_similarity_transforms() {
        let gt = rand_seq(5, 17, 2);
        let r = rotation(Vector3::new(0.3, -1.0, 0.4), 1.1);
        let pred = transform(&gt, 1.3, &r, Vector3::new(10.0, -40.0, 7.0));
        assert!(p_mpjpe(&pred, &gt).unwrap() < 1e-6);
    }

    #[test]
    fn reflection_is_not_undone() {
        let gt = rand_seq(2, 6, 3);
        let mut pred = gt.clone();
        pred.index_axis_mut(Axis(2), 0).mapv_inplace(|v| -v);
        assert!(p_mpjpe(&pred, &gt).unwrap() > 1.0);
    }

    #[test]
    fn collinear_frames_fall_back_to_translation() {
        let gt = rand_seq(1, 4, 4);
        let mut pred = Array3::zeros((1, 4, 3));
        for j in 0..4 {
            pred[[0, j, 0]] = j as f64 * 10.0;
        }
        let (aligned, degenerate) = align_sequence(&pred, &gt).unwrap();
        assert_eq!(degenerate, 1);
        let mean_gt = gt.mean_axis(Axis(1)).unwrap();
        let mean_pred = pred.mean_axis(Axis(1)).unwrap();
        for c in 0..3 {
            assert!((aligned[[0, 0, c]] - (pred[[0, 0, c]] + mean_gt[[0, c]] - mean_pred[[0, c]])).abs() < 1e-9);
        }
    }

    #[test]
    fn pck_and_auc_hand_counts() {
        let gt = Array3::zeros((1, 17, 3));
        assert_eq!(pck(&gt, &gt, 150.0).unwrap(), 100.0);
        assert_eq!(auc(&gt, &gt).unwrap(), 100.0);
        let mut pred = gt.clone();
        pred[[0, 5, 1]] = 200.0;
        assert!((pck(&pred, &gt, 150.0).unwrap() - 1600.0 / 17.0).abs() < 1e-9);
        let far = Array3::from_shape_fn((1, 17, 3), |(_, _, c)| if c == 2 { 151.0 } else { 0.0 });
        assert_eq!(auc(&far, &gt).unwrap(), 0.0);
        assert_eq!(pck(&far, &gt, 150.0).unwrap(), 0.0);
    }

    #[test]
    fn report_aggregates_and_serializes() {
        let gt = rand_seq(3, 17, 5);
        let pred = rand_seq(3, 17, 6);
        let a = ClipMetrics::compute("clip_00000", "front", &pred, &gt).unwrap();
        let b = ClipMetrics::compute("clip_00001", "side", &gt, &gt).unwrap();
        let r = EvalReport::from_clips(vec![a.clone(), b]);
        assert!((r.mpjpe_mm - a.mpjpe_mm() / 2.0).abs() < 1e-9);
        assert!((a.mpjpe_mm() - mpjpe(&pred, &gt).unwrap()).abs() < 1e-9);
        assert!((a.p_mpjpe_mm() - p_mpjpe(&pred, &gt).unwrap()).abs() < 1e-9);
        assert!((a.auc_percent() - auc(&pred, &gt).unwrap()).abs() < 1e-9);
        assert!(r.p_mpjpe_mm <= r.mpjpe_mm + 1e-9);
        let kv = r.to_kv();
        let keys: Vec<&str> = kv.lines().map(|l| l.split_once('=').unwrap().0).collect();
        assert_eq!(&keys[..7], &REPORT_KEYS);
        assert_eq!(keys.len(), 7 + 2 * CLIP_KEYS.len());
        assert!(keys.contains(&"clip.clip_00001.side.mpjpe_mm"));
        assert!(r.to_text().contains("MPJPE"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn p_mpjpe_invariant_to_similarity(seed in 0u64..10_000, s in 0.2..5.0f64, angle in -3.0..3.0f64,
                                               ax in proptest::array::uniform3(-1.0..1.0f64), t in proptest::array::uniform3(-300.0..300.0f64)) {
                prop_assume!(ax.iter().map(|v| v * v).sum::<f64>() > 1e-3);
                let gt = rand_seq(2, 8, seed);
                let pred = rand_seq(2, 8, seed + 1);
                let r = rotation(Vector3::new(ax[0], ax[1], ax[2]), angle);
                let moved = transform(&pred, s, &r, Vector3::new(t[0], t[1], t[2]));
                let a = p_mpjpe(&pred, &gt).unwrap();
                let b = p_mpjpe(&moved, &gt).unwrap();
                prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
                prop_assert!(a <= mpjpe(&pred, &gt).unwrap() + 1e-9);
            }

            #[test]
            fn mpjpe_is_a_metric(s1 in 0u64..1000, s2 in 0u64..1000, s3 in 0u64..1000) {
                let (a, b, c) = (rand_seq(2, 5, s1), rand_seq(2, 5, s2 + 1000), rand_seq(2, 5, s3 + 2000));
                let ab = mpjpe(&a, &b).unwrap();
                prop_assert_eq!(ab, mpjpe(&b, &a).unwrap());
                prop_assert!(ab > 0.0);
                prop_assert!(ab <= mpjpe(&a, &c).unwrap() + mpjpe(&c, &b).unwrap() + 1e-9);
            }

            #[test]
            fn pck_monotone_in_threshold(seed in 0u64..1000, t1 in 0.0..1000.0f64, dt in 0.0..500.0f64) {
                let (a, b) = (rand_seq(2, 17, seed), rand_seq(2, 17, seed + 7));
                prop_assert!(pck(&a, &b, t1).unwrap() <= pck(&a, &b, t1 + dt).unwrap());
                prop_assert!(auc(&a, &b).unwrap() <= pck(&a, &b, 150.0).unwrap());
            }
        }
    }
}
