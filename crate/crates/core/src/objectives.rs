//! Training losses with hand-derived gradients, all in `f64`.
//!
//! Pose sequences are passed as flat `B x T x J x 3` slices.

use crate::{Error, Result};

/// Replaces a probability that underflowed to zero before its logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            _ => Err(Error::invalid("reduction", format!("`{s}` is neither `sum` nor `mean`"))),
        }
    }
}

impl Reduction {
    pub fn name(self) -> &'static str {
        match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        }
    }

    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub k: usize,
    pub gamma: f64,
    pub lambda_3d: f64,
    pub lambda_v: f64,
    pub epsilon_smooth: f64,
    /// Reduction over anchors for the contrastive term.
    pub con_reduction: Reduction,
    /// Reduction over joints for the reconstruction terms.
    pub recon_reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            k: 16,
            gamma: 2.0,
            lambda_3d: 1.0,
            lambda_v: 0.5,
            epsilon_smooth: 0.0,
            con_reduction: Reduction::Mean,
            recon_reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("loss.{key}"), reason: reason.into() });
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau", "must be positive");
        }
        if self.k < 1 {
            return bad("k", "must be at least 1");
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be non-negative");
        }
        if !(self.lambda_3d >= 0.0 && self.lambda_3d.is_finite()) {
            return bad("lambda_3d", "must be non-negative");
        }
        if !(self.lambda_v >= 0.0 && self.lambda_v.is_finite()) {
            return bad("lambda_v", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.epsilon_smooth) {
            return bad("epsilon_smooth", "must be in [0, 1)");
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over `h_p . h_w / tau` for every candidate.
pub fn similarity_softmax(h_p: &[f64], candidates: &[&[f64]], tau: f64) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::invalid("candidates", "no candidates"));
    }
    if let Some(c) = candidates.iter().find(|c| c.len() != h_p.len()) {
        return Err(Error::Shape { expected: format!("width {}", h_p.len()), got: format!("width {}", c.len()) });
    }
    let z: Vec<f64> = candidates.iter().map(|c| dot(h_p, c) / tau).collect();
    Ok(softmax(&z))
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalKl {
    pub loss: f64,
    /// A zero probability was replaced by [`PROB_FLOOR`].
    pub floored: bool,
}

fn check_dist(s: &[f64], y: &[f64]) -> Result<()> {
    if s.len() != y.len() || s.is_empty() {
        return Err(Error::Shape { expected: format!("{} probabilities", y.len()), got: format!("{}", s.len()) });
    }
    Ok(())
}

/// `sum_i (1 - s_i)^gamma y_i ln(y_i / s_i)` for one anchor; terms with
/// `y_i = 0` contribute nothing.
pub fn focal_kl_loss(s: &[f64], y: &[f64], gamma: f64) -> Result<FocalKl> {
    check_dist(s, y)?;
    let mut loss = 0.0;
    let mut floored = false;
    for (&si, &yi) in s.iter().zip(y) {
        if yi <= 0.0 {
            continue;
        }
        let sc = if si <= 0.0 {
            floored = true;
            PROB_FLOOR
        } else {
            si
        };
        loss += (1.0 - sc).powf(gamma) * yi * (yi.ln() - sc.ln());
    }
    Ok(FocalKl { loss, floored })
}

/// Derivative of [`focal_kl_loss`] with respect to each `s_i`.
pub fn focal_kl_grad(s: &[f64], y: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_dist(s, y)?;
    Ok(s.iter()
        .zip(y)
        .map(|(&si, &yi)| {
            if yi <= 0.0 {
                return 0.0;
            }
            let sc = if si <= 0.0 { PROB_FLOOR } else { si };
            let log_ratio = yi.ln() - sc.ln();
            let focal = (1.0 - sc).powf(gamma);
            let dfocal = if gamma == 0.0 { 0.0 } else { -gamma * (1.0 - sc).powf(gamma - 1.0) };
            dfocal * yi * log_ratio - focal * yi / sc
        })
        .collect())
}

/// Contrastive term for a batch with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// `B x D`.
    pub grad_h_p: Vec<f64>,
    /// `B x (K+1) x D`.
    pub grad_h_w: Vec<f64>,
    /// `B x (K+1)` candidate probabilities.
    pub probs: Vec<f64>,
    pub floored: bool,
}

/// Focal-KL loss of the softmax similarities for `B` anchors, each with
/// `K+1` candidate text embeddings. `h_p` is `B x D`, `h_w` is
/// `B x (K+1) x D`, `targets[b]` has `K+1` entries.
pub fn contrastive_loss(h_p: &[f64], h_w: &[f64], targets: &[Vec<f64>], d: usize, tau: f64, gamma: f64, reduction: Reduction) -> Result<ContrastiveOutput> {
    let b = targets.len();
    if b == 0 || d == 0 || h_p.len() != b * d {
        return Err(Error::Shape { expected: format!("{b} x {d} pose embeddings"), got: format!("{} values", h_p.len()) });
    }
    let kk = targets[0].len();
    if kk == 0 || targets.iter().any(|t| t.len() != kk) || h_w.len() != b * kk * d {
        return Err(Error::Shape { expected: format!("{b} x {kk} x {d} text embeddings"), got: format!("{} values", h_w.len()) });
    }
    let scale = reduction.scale(b);
    let mut out = ContrastiveOutput { loss: 0.0, grad_h_p: vec![0.0; b * d], grad_h_w: vec![0.0; b * kk * d], probs: Vec::with_capacity(b * kk), floored: false };
    for i in 0..b {
        let hp = &h_p[i * d..(i + 1) * d];
        let cands: Vec<&[f64]> = (0..kk).map(|k| &h_w[(i * kk + k) * d..(i * kk + k + 1) * d]).collect();
        let s = similarity_softmax(hp, &cands, tau)?;
        let fk = focal_kl_loss(&s, &targets[i], gamma)?;
        out.loss += scale * fk.loss;
        out.floored |= fk.floored;
        let g = focal_kl_grad(&s, &targets[i], gamma)?;
        let gs = dot(&g, &s);
        for k in 0..kk {
            let dz = scale * s[k] * (g[k] - gs) / tau;
            let wk = (i * kk + k) * d;
            for c in 0..d {
                out.grad_h_p[i * d + c] += dz * h_w[wk + c];
                out.grad_h_w[wk + c] += dz * hp[c];
            }
        }
        out.probs.extend(s);
    }
    Ok(out)
}

fn check_same(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.len() % 3 != 0 {
        return Err(Error::Shape { expected: format!("{} values (multiple of 3)", gt.len()), got: format!("{}", pred.len()) });
    }
    Ok(())
}

/// Sum (or mean) over joints of the Euclidean distance between `pred` and
/// `gt`, plus the gradient with respect to `pred`.
pub fn loss_3d_with_grad(pred: &[f64], gt: &[f64], reduction: Reduction) -> Result<(f64, Vec<f64>)> {
    check_same(pred, gt)?;
    let n = pred.len() / 3;
    let scale = reduction.scale(n);
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for (i, (p, g)) in pred.chunks_exact(3).zip(gt.chunks_exact(3)).enumerate() {
        let diff = [p[0] - g[0], p[1] - g[1], p[2] - g[2]];
        let dist = dot(&diff, &diff).sqrt();
        loss += dist;
        if dist > 0.0 {
            for c in 0..3 {
                grad[3 * i + c] = scale * diff[c] / dist;
            }
        }
    }
    Ok((scale * loss, grad))
}

pub fn loss_3d(pred: &[f64], gt: &[f64], reduction: Reduction) -> Result<f64> {
    loss_3d_with_grad(pred, gt, reduction).map(|r| r.0)
}

fn temporal_diff(x: &[f64], b: usize, t: usize, j: usize) -> Vec<f64> {
    let frame = j * 3;
    let mut v = Vec::with_capacity(b * (t - 1) * frame);
    for bi in 0..b {
        let seq = &x[bi * t * frame..(bi + 1) * t * frame];
        for ti in 1..t {
            v.extend((0..frame).map(|k| seq[ti * frame + k] - seq[(ti - 1) * frame + k]));
        }
    }
    v
}

/// Distance between first temporal differences of `B` sequences of `T`
/// frames and `J` joints, plus the gradient with respect to `pred`.
pub fn loss_velocity_with_grad(pred: &[f64], gt: &[f64], dims: (usize, usize, usize), reduction: Reduction) -> Result<(f64, Vec<f64>)> {
    check_same(pred, gt)?;
    let (b, t, j) = dims;
    if b * t * j * 3 != pred.len() {
        return Err(Error::Shape { expected: format!("{b} x {t} x {j} x 3"), got: format!("{} values", pred.len()) });
    }
    if t < 2 {
        return Err(Error::invalid("pred", "velocity needs at least 2 frames"));
    }
    let (loss, gv) = loss_3d_with_grad(&temporal_diff(pred, b, t, j), &temporal_diff(gt, b, t, j), reduction)?;
    // Adjoint of the difference operator.
    let frame = j * 3;
    let mut grad = vec![0.0; pred.len()];
    for bi in 0..b {
        for ti in 1..t {
            for k in 0..frame {
                let g = gv[(bi * (t - 1) + ti - 1) * frame + k];
                grad[(bi * t + ti) * frame + k] += g;
                grad[(bi * t + ti - 1) * frame + k] -= g;
            }
        }
    }
    Ok((loss, grad))
}

pub fn loss_velocity(pred: &[f64], gt: &[f64], dims: (usize, usize, usize), reduction: Reduction) -> Result<f64> {
    loss_velocity_with_grad(pred, gt, dims, reduction).map(|r| r.0)
}

/// `con + lambda_3d * l3d + lambda_v * lv`.
pub fn total_pretrain_loss(con: f64, l3d: f64, lv: f64, config: &LossConfig) -> f64 {
    con + config.lambda_3d * l3d + config.lambda_v * lv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn unit(rng: &mut crate::rng::Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn softmax_examples() {
        let a = [1.0, 0.0];
        let s = similarity_softmax(&a, &[&a, &a, &a], 0.1).unwrap();
        assert!(s.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        let s = similarity_softmax(&a, &[&[1.0, 0.0], &[-1.0, 0.0]], 0.1).unwrap();
        assert!((s[0] - 1.0 / (1.0 + (-20f64).exp())).abs() < 1e-15);
        assert!(similarity_softmax(&a, &[], 0.1).is_err());
    }

    #[test]
    fn argmax_is_temperature_invariant() {
        let mut rng = rng_from(1);
        for _ in 0..50 {
            let h = unit(&mut rng, 6);
            let c: Vec<Vec<f64>> = (0..5).map(|_| unit(&mut rng, 6)).collect();
            let refs: Vec<&[f64]> = c.iter().map(Vec::as_slice).collect();
            let am = |v: Vec<f64>| v.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            let a = am(similarity_softmax(&h, &refs, 0.05).unwrap());
            assert_eq!(a, am(similarity_softmax(&h, &refs, 1.0).unwrap()));
            let s = similarity_softmax(&h, &refs, 0.3).unwrap();
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn focal_kl_examples() {
        let y = [1.0, 0.0];
        assert!((focal_kl_loss(&[0.5, 0.5], &y, 2.0).unwrap().loss - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert_eq!(focal_kl_loss(&[0.3, 0.7], &[0.3, 0.7], 2.0).unwrap().loss, 0.0);
        let ce = focal_kl_loss(&[0.2, 0.8], &y, 0.0).unwrap().loss;
        assert!((ce + 0.2f64.ln()).abs() < 1e-12);
        let f = focal_kl_loss(&[0.0, 1.0], &y, 2.0).unwrap();
        assert!(f.floored && f.loss.is_finite());
        let tiny = focal_kl_loss(&[1e-20, 1.0 - 1e-20], &[0.5, 0.5], 2.0).unwrap();
        assert!(!tiny.floored && tiny.loss.is_finite());
    }

    #[test]
    fn focal_kl_monotone_in_positive_probability() {
        for gamma in [0.0, 0.5, 1.0, 2.0, 5.0] {
            let mut prev = f64::INFINITY;
            for i in 1..100 {
                let p = i as f64 / 100.0;
                let l = focal_kl_loss(&[p, 1.0 - p], &[1.0, 0.0], gamma).unwrap().loss;
                assert!(l >= 0.0 && l < prev);
                prev = l;
            }
        }
    }

    #[test]
    fn reconstruction_examples() {
        let gt = vec![0.0; 6];
        let mut pred = gt.clone();
        assert_eq!(loss_3d(&pred, &gt, Reduction::Sum).unwrap(), 0.0);
        pred[3] = 3.0;
        pred[4] = 4.0;
        assert_eq!(loss_3d(&pred, &gt, Reduction::Sum).unwrap(), 5.0);
        assert_eq!(loss_3d(&pred, &gt, Reduction::Mean).unwrap(), 2.5);
        assert!(loss_3d(&pred[..3], &gt, Reduction::Sum).is_err());

        let t = 11;
        let gt: Vec<f64> = (0..t).flat_map(|i| [i as f64, 0.0, 0.0]).collect();
        let pred: Vec<f64> = (0..t).flat_map(|i| [i as f64, 0.0, i as f64]).collect();
        assert!((loss_velocity(&pred, &gt, (1, t, 1), Reduction::Sum).unwrap() - 10.0).abs() < 1e-12);
        let shifted: Vec<f64> = gt.iter().map(|v| v + 7.0).collect();
        assert_eq!(loss_velocity(&shifted, &gt, (1, t, 1), Reduction::Sum).unwrap(), 0.0);
        assert!(loss_velocity(&gt[..3], &gt[..3], (1, 1, 1), Reduction::Sum).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        let cfg = LossConfig { lambda_3d: 0.5, lambda_v: 0.1, ..Default::default() };
        assert!((total_pretrain_loss(1.0, 2.0, 3.0, &cfg) - 2.3).abs() < 1e-15);
        let zero = LossConfig { lambda_3d: 0.0, lambda_v: 0.0, ..Default::default() };
        assert_eq!(total_pretrain_loss(1.25, 2.0, 3.0, &zero), 1.25);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = rng_from(3);
        let (b, kk, d) = (3, 4, 5);
        let hp: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let hw: Vec<f64> = (0..b * kk * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets: Vec<Vec<f64>> = (0..b).map(|_| vec![0.7, 0.1, 0.1, 0.1]).collect();
        let f = |hp: &[f64], hw: &[f64]| contrastive_loss(hp, hw, &targets, d, 0.5, 2.0, Reduction::Mean).unwrap().loss;
        let out = contrastive_loss(&hp, &hw, &targets, d, 0.5, 2.0, Reduction::Mean).unwrap();
        let h = 1e-6;
        for i in 0..hp.len() {
            let (mut a, mut c) = (hp.clone(), hp.clone());
            a[i] += h;
            c[i] -= h;
            let num = (f(&a, &hw) - f(&c, &hw)) / (2.0 * h);
            assert!((num - out.grad_h_p[i]).abs() < 1e-7, "{num} vs {}", out.grad_h_p[i]);
        }
        for i in 0..hw.len() {
            let (mut a, mut c) = (hw.clone(), hw.clone());
            a[i] += h;
            c[i] -= h;
            let num = (f(&hp, &a) - f(&hp, &c)) / (2.0 * h);
            assert!((num - out.grad_h_w[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn reconstruction_gradients_match_finite_differences() {
        let mut rng = rng_from(4);
        let dims = (2, 4, 3);
        let n = 2 * 4 * 3 * 3;
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g3) = loss_3d_with_grad(&pred, &gt, Reduction::Mean).unwrap();
        let (_, gv) = loss_velocity_with_grad(&pred, &gt, dims, Reduction::Mean).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let (mut a, mut c) = (pred.clone(), pred.clone());
            a[i] += h;
            c[i] -= h;
            let n3 = (loss_3d(&a, &gt, Reduction::Mean).unwrap() - loss_3d(&c, &gt, Reduction::Mean).unwrap()) / (2.0 * h);
            let nv = (loss_velocity(&a, &gt, dims, Reduction::Mean).unwrap() - loss_velocity(&c, &gt, dims, Reduction::Mean).unwrap()) / (2.0 * h);
            assert!((n3 - g3[i]).abs() < 1e-7);
            assert!((nv - gv[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let e = LossConfig { tau: 0.0, ..Default::default() }.validate().unwrap_err();
        assert!(matches!(e, Error::Config { key, .. } if key == "loss.tau"));
        assert!(LossConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        fn seq(n: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(-100.0..100.0f64, n)
        }

        proptest! {
            #[test]
            fn translation_invariance(p in seq(24), g in seq(24), t in proptest::array::uniform3(-50.0..50.0f64), u in proptest::array::uniform3(-50.0..50.0f64)) {
                let shift = |x: &[f64], s: [f64; 3]| x.iter().enumerate().map(|(i, v)| v + s[i % 3]).collect::<Vec<_>>();
                let a = loss_3d(&p, &g, Reduction::Sum).unwrap();
                let b = loss_3d(&shift(&p, t), &shift(&g, t), Reduction::Sum).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
                let dims = (1, 4, 2);
                let va = loss_velocity(&p, &g, dims, Reduction::Sum).unwrap();
                let vb = loss_velocity(&shift(&p, t), &shift(&g, u), dims, Reduction::Sum).unwrap();
                prop_assert!((va - vb).abs() <= 1e-9 * va.max(1.0));
            }

            #[test]
            fn joint_permutation_invariance(p in seq(15), g in seq(15), rot in 0usize..5) {
                let perm = |x: &[f64]| { let mut v = x.to_vec(); v.rotate_left(3 * rot); v };
                let a = loss_3d(&p, &g, Reduction::Sum).unwrap();
                let b = loss_3d(&perm(&p), &perm(&g), Reduction::Sum).unwrap();
                prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
            }

            #[test]
            fn one_hot_focal_kl_non_negative(z in proptest::collection::vec(-5.0..5.0f64, 2..8), gamma in 0.0..4.0f64) {
                let s = softmax(&z);
                let mut y = vec![0.0; s.len()];
                y[0] = 1.0;
                prop_assert!(focal_kl_loss(&s, &y, gamma).unwrap().loss >= 0.0);
            }
        }
    }
}
