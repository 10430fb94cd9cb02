//! Input corruptions for masked motion modeling.
//!
//! Masked entries are written as `(0, 0, 0)`: zero position and zero
//! confidence. Noise is applied after masking and never touches masked
//! entries, and it keeps every unmasked confidence at or above
//! [`CONFIDENCE_FLOOR`], so a zero confidence always means "masked".
//!
//! Counts are rounded half-up, so `round(0.15 * 10) == 2`.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive, rng_from};
use crate::skeleton::{BodyPart, PoseSeq2D};

/// Smallest confidence noise may leave on an unmasked entry.
pub const CONFIDENCE_FLOOR: f64 = 1e-6;

/// Half-width of the uniform outlier offset, normalized units.
pub const OUTLIER_RANGE: f64 = 0.3;

/// Round half-up. The tiny bias keeps decimal ratios such as `0.15 * 30`
/// on the intended side of `.5` despite binary representation error.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionMode {
    JointFrame,
    BodyPart,
    TimeWindow,
}

impl CorruptionMode {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionMode::JointFrame => "joint_frame",
            CorruptionMode::BodyPart => "body_part",
            CorruptionMode::TimeWindow => "time_window",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ModeParams {
    JointFrame { joint_ratio: f64, frame_ratio: f64 },
    BodyPart { part: BodyPart },
    TimeWindow { t1: usize, t2: usize, start: usize, len: usize },
}

impl ModeParams {
    pub fn mode(&self) -> CorruptionMode {
        match self {
            ModeParams::JointFrame { .. } => CorruptionMode::JointFrame,
            ModeParams::BodyPart { .. } => CorruptionMode::BodyPart,
            ModeParams::TimeWindow { .. } => CorruptionMode::TimeWindow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub sigma: f64,
    pub outlier_prob: f64,
    pub seed: u64,
}

/// Everything needed to reproduce one corruption of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionRecord {
    pub params: ModeParams,
    /// Seed of the masking step.
    pub seed: u64,
    /// `T x J`, true where the output is masked.
    pub masked_entries: Array2<bool>,
    pub noise: Option<NoiseParams>,
}

impl CorruptionRecord {
    pub fn mode(&self) -> CorruptionMode {
        self.params.mode()
    }

    pub fn noise_applied(&self) -> bool {
        self.noise.is_some()
    }

    pub fn masked_count(&self) -> usize {
        self.masked_entries.iter().filter(|m| **m).count()
    }

    /// Re-applies the recorded corruption to the clean input.
    pub fn replay(&self, input: &PoseSeq2D) -> Result<(PoseSeq2D, CorruptionRecord)> {
        let (mut out, mut rec) = match self.params {
            ModeParams::JointFrame { joint_ratio, frame_ratio } => mask_joint_frame(input, joint_ratio, frame_ratio, self.seed)?,
            ModeParams::BodyPart { .. } => mask_body_part(input, self.seed)?,
            ModeParams::TimeWindow { t1, t2, .. } => mask_time_window(input, t1, t2, self.seed)?,
        };
        if let Some(noise) = self.noise {
            out = add_noise(&out, noise.sigma, noise.outlier_prob, noise.seed)?;
            rec.noise = Some(noise);
        }
        Ok((out, rec))
    }
}

fn check_input(seq: &PoseSeq2D) -> Result<()> {
    seq.validate()?;
    if seq.frames() == 0 {
        return Err(Error::invalid("seq", "empty sequence"));
    }
    Ok(())
}

fn apply_mask(seq: &PoseSeq2D, mask: &Array2<bool>) -> PoseSeq2D {
    let mut out = seq.clone();
    for ((t, j), &m) in mask.indexed_iter() {
        if m {
            for k in 0..3 {
                out.data[[t, j, k]] = 0.0;
            }
        }
    }
    out
}

/// Masks `round(frame_ratio * T)` whole frames, then
/// `round(joint_ratio * remaining_entries)` single entries among the
/// frames that are still visible.
pub fn mask_joint_frame(seq: &PoseSeq2D, joint_ratio: f64, frame_ratio: f64, seed: u64) -> Result<(PoseSeq2D, CorruptionRecord)> {
    check_input(seq)?;
    for (name, r) in [("joint_ratio", joint_ratio), ("frame_ratio", frame_ratio)] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::invalid(name, format!("must be in [0, 1), got {r}")));
        }
    }
    let (t, j) = (seq.frames(), seq.joints());
    let mut rng = rng_from(seed);
    let mut mask = Array2::from_elem((t, j), false);

    let n_frames = round_half_up(frame_ratio * t as f64);
    let frames = sample(&mut rng, t, n_frames);
    for f in frames.iter() {
        mask.row_mut(f).fill(true);
    }
    let remaining: Vec<(usize, usize)> = mask.indexed_iter().filter(|(_, m)| !**m).map(|(ix, _)| ix).collect();
    let n_joints = round_half_up(joint_ratio * remaining.len() as f64);
    for i in sample(&mut rng, remaining.len(), n_joints).iter() {
        mask[remaining[i]] = true;
    }

    let out = apply_mask(seq, &mask);
    Ok((out, CorruptionRecord { params: ModeParams::JointFrame { joint_ratio, frame_ratio }, seed, masked_entries: mask, noise: None }))
}

/// Masks every joint of one uniformly chosen body part in all frames.
pub fn mask_body_part(seq: &PoseSeq2D, seed: u64) -> Result<(PoseSeq2D, CorruptionRecord)> {
    check_input(seq)?;
    let mut rng = rng_from(seed);
    let part = BodyPart::ALL[rng.random_range(0..BodyPart::ALL.len())];
    let mut mask = Array2::from_elem((seq.frames(), seq.joints()), false);
    for &j in seq.layout.part(part) {
        mask.column_mut(j).fill(true);
    }
    let out = apply_mask(seq, &mask);
    Ok((out, CorruptionRecord { params: ModeParams::BodyPart { part }, seed, masked_entries: mask, noise: None }))
}

/// Masks all joints inside a window whose length is uniform in `[t1, t2]`
/// and whose start is uniform in `[0, T - len]`.
pub fn mask_time_window(seq: &PoseSeq2D, t1: usize, t2: usize, seed: u64) -> Result<(PoseSeq2D, CorruptionRecord)> {
    check_input(seq)?;
    let t = seq.frames();
    if t1 < 2 || t1 > t2 {
        return Err(Error::invalid("t1", format!("need 2 <= t1 <= t2, got t1={t1}, t2={t2}")));
    }
    if t2 >= t {
        return Err(Error::invalid("t2", format!("window bound {t2} must be below sequence length {t}")));
    }
    let mut rng = rng_from(seed);
    let len = rng.random_range(t1..=t2);
    let start = rng.random_range(0..=t - len);
    let mut mask = Array2::from_elem((t, seq.joints()), false);
    for f in start..start + len {
        mask.row_mut(f).fill(true);
    }
    let out = apply_mask(seq, &mask);
    Ok((out, CorruptionRecord { params: ModeParams::TimeWindow { t1, t2, start, len }, seed, masked_entries: mask, noise: None }))
}

/// Adds i.i.d. Gaussian noise to x, y of unmasked entries. With probability
/// `outlier_prob` an entry instead gets a uniform offset in
/// `[-0.3, 0.3]` per axis. Confidence is multiplied by
/// `exp(-|offset| / sigma)` and clipped to `[CONFIDENCE_FLOOR, 1]`.
pub fn add_noise(seq: &PoseSeq2D, sigma: f64, outlier_prob: f64, seed: u64) -> Result<PoseSeq2D> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid("sigma", format!("must be a finite value >= 0, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&outlier_prob) {
        return Err(Error::invalid("outlier_prob", format!("must be in [0, 1], got {outlier_prob}")));
    }
    let mut out = seq.clone();
    if sigma == 0.0 && outlier_prob == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_from(seed);
    let gauss = Normal::new(0.0, sigma).expect("sigma validated");
    for mut e in out.data.rows_mut() {
        if e[2] == 0.0 {
            continue;
        }
        let offset = if outlier_prob > 0.0 && rng.random::<f64>() < outlier_prob {
            [rng.random_range(-OUTLIER_RANGE..=OUTLIER_RANGE), rng.random_range(-OUTLIER_RANGE..=OUTLIER_RANGE)]
        } else {
            [gauss.sample(&mut rng), gauss.sample(&mut rng)]
        };
        e[0] += offset[0];
        e[1] += offset[1];
        let norm = offset[0].hypot(offset[1]);
        let attenuation = if norm == 0.0 { 1.0 } else { (-norm / sigma).exp() };
        e[2] = (e[2] * attenuation).clamp(CONFIDENCE_FLOOR, 1.0);
    }
    Ok(out)
}

/// Parameters of the stochastic corruption schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionConfig {
    pub joint_ratio: f64,
    pub frame_ratio: f64,
    pub t1: usize,
    pub t2: usize,
    pub sigma: f64,
    pub outlier_prob: f64,
    /// Probabilities of joint/frame, body-part and time-window masking.
    pub mode_probs: [f64; 3],
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig { joint_ratio: 0.05, frame_ratio: 0.15, t1: 30, t2: 80, sigma: 0.01, outlier_prob: 0.02, mode_probs: [0.5, 0.25, 0.25] }
    }
}

impl CorruptionConfig {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        let bad = |key: &str, reason: String| Err(Error::Config { key: format!("corruption.{key}"), reason });
        if !(0.0..1.0).contains(&self.joint_ratio) {
            return bad("joint_ratio", "must be in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.frame_ratio) {
            return bad("frame_ratio", "must be in [0, 1)".into());
        }
        if self.mode_probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (self.mode_probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("mode_probs", format!("must be probabilities summing to 1, got {:?}", self.mode_probs));
        }
        if self.mode_probs[2] > 0.0 && (self.t1 < 2 || self.t1 > self.t2 || self.t2 >= seq_len) {
            return bad("t2", format!("need 2 <= t1 <= t2 < sequence length {seq_len}, got t1={}, t2={}", self.t1, self.t2));
        }
        if !(self.sigma >= 0.0) || !(0.0..=1.0).contains(&self.outlier_prob) {
            return bad("sigma", "sigma must be >= 0 and outlier_prob in [0, 1]".into());
        }
        Ok(())
    }
}

/// Picks a masking mode with `config.mode_probs`, applies it, then adds
/// noise. The masking and noise steps get seeds derived from `seed`.
pub fn schedule_corruption(seq: &PoseSeq2D, seed: u64, config: &CorruptionConfig) -> Result<(PoseSeq2D, CorruptionRecord)> {
    let mut rng = rng_from(derive(seed, 0));
    let u: f64 = rng.random();
    let mask_seed = derive(seed, 1);
    let (masked, mut record) = if u < config.mode_probs[0] {
        mask_joint_frame(seq, config.joint_ratio, config.frame_ratio, mask_seed)?
    } else if u < config.mode_probs[0] + config.mode_probs[1] {
        mask_body_part(seq, mask_seed)?
    } else {
        mask_time_window(seq, config.t1, config.t2, mask_seed)?
    };
    let noise = NoiseParams { sigma: config.sigma, outlier_prob: config.outlier_prob, seed: derive(seed, 2) };
    let out = add_noise(&masked, noise.sigma, noise.outlier_prob, noise.seed)?;
    record.noise = Some(noise);
    Ok((out, record))
}

const RECORD_MAGIC: &[u8; 4] = b"APCR";
const RECORD_VERSION: u16 = 1;

impl CorruptionRecord {
    /// Binary sidecar layout, all little-endian:
    ///
    /// ```text
    /// "APCR" u16 version u8 mode u8 noise_flag u64 seed
    /// f64 sigma f64 outlier_prob u64 noise_seed
    /// f64 joint_ratio f64 frame_ratio u8 part
    /// u32 t1 u32 t2 u32 start u32 len
    /// u32 T u32 J  mask bits, row-major, LSB first
    /// ```
    ///
    /// Fields that do not apply to the mode are written as zero.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(RECORD_MAGIC);
        b.extend_from_slice(&RECORD_VERSION.to_le_bytes());
        b.push(match self.mode() {
            CorruptionMode::JointFrame => 0,
            CorruptionMode::BodyPart => 1,
            CorruptionMode::TimeWindow => 2,
        });
        b.push(self.noise.is_some() as u8);
        b.extend_from_slice(&self.seed.to_le_bytes());
        let noise = self.noise.unwrap_or(NoiseParams { sigma: 0.0, outlier_prob: 0.0, seed: 0 });
        b.extend_from_slice(&noise.sigma.to_le_bytes());
        b.extend_from_slice(&noise.outlier_prob.to_le_bytes());
        b.extend_from_slice(&noise.seed.to_le_bytes());
        let (mut jr, mut fr, mut part, mut win) = (0.0f64, 0.0f64, 0u8, [0u32; 4]);
        match self.params {
            ModeParams::JointFrame { joint_ratio, frame_ratio } => (jr, fr) = (joint_ratio, frame_ratio),
            ModeParams::BodyPart { part: p } => part = p.index() as u8,
            ModeParams::TimeWindow { t1, t2, start, len } => win = [t1 as u32, t2 as u32, start as u32, len as u32],
        }
        b.extend_from_slice(&jr.to_le_bytes());
        b.extend_from_slice(&fr.to_le_bytes());
        b.push(part);
        for w in win {
            b.extend_from_slice(&w.to_le_bytes());
        }
        let (t, j) = self.masked_entries.dim();
        b.extend_from_slice(&(t as u32).to_le_bytes());
        b.extend_from_slice(&(j as u32).to_le_bytes());
        let mut bits = vec![0u8; (t * j).div_ceil(8)];
        for (i, &m) in self.masked_entries.iter().enumerate() {
            if m {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        b.extend_from_slice(&bits);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CorruptionRecord> {
        let bad = |reason: &str| Error::Format { what: "corruption record", reason: reason.to_string() };
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok_or_else(|| bad("truncated"))? != RECORD_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u16::from_le_bytes(r.array().ok_or_else(|| bad("truncated"))?);
        if version != RECORD_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mode = r.u8().ok_or_else(|| bad("truncated"))?;
        let noise_flag = r.u8().ok_or_else(|| bad("truncated"))?;
        let seed = r.u64().ok_or_else(|| bad("truncated"))?;
        let sigma = r.f64().ok_or_else(|| bad("truncated"))?;
        let outlier_prob = r.f64().ok_or_else(|| bad("truncated"))?;
        let noise_seed = r.u64().ok_or_else(|| bad("truncated"))?;
        let jr = r.f64().ok_or_else(|| bad("truncated"))?;
        let fr = r.f64().ok_or_else(|| bad("truncated"))?;
        let part = r.u8().ok_or_else(|| bad("truncated"))? as usize;
        let mut win = [0usize; 4];
        for w in &mut win {
            *w = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        }
        let t = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let j = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        let bits = r.take((t * j).div_ceil(8)).ok_or_else(|| bad("truncated mask"))?;
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let params = match mode {
            0 => ModeParams::JointFrame { joint_ratio: jr, frame_ratio: fr },
            1 => ModeParams::BodyPart { part: *BodyPart::ALL.get(part).ok_or_else(|| bad("bad part index"))? },
            2 => ModeParams::TimeWindow { t1: win[0], t2: win[1], start: win[2], len: win[3] },
            _ => return Err(bad("bad mode")),
        };
        let masked_entries = Array2::from_shape_fn((t, j), |(a, c)| {
            let i = a * j + c;
            bits[i / 8] >> (i % 8) & 1 == 1
        });
        let noise = (noise_flag == 1).then_some(NoiseParams { sigma, outlier_prob, seed: noise_seed });
        Ok(CorruptionRecord { params, seed, masked_entries, noise })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<CorruptionRecord> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        CorruptionRecord::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().unwrap())
    }
    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|s| s[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }
    fn f64(&mut self) -> Option<f64> {
        self.array().map(f64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::{SkeletonLayout, NUM_JOINTS};
    use ndarray::Array3;
    use proptest::prelude::*;

    pub(crate) fn clean_seq(t: usize, seed: u64) -> PoseSeq2D {
        let mut rng = rng_from(seed);
        let data = Array3::from_shape_fn((t, NUM_JOINTS, 3), |(_, _, k)| if k == 2 { 1.0 } else { rng.random_range(-0.9..0.9) });
        PoseSeq2D { data, layout: SkeletonLayout::h36m(), pixel_box: None }
    }

    fn assert_duality(out: &PoseSeq2D, rec: &CorruptionRecord) {
        assert_eq!(out.masked(), rec.masked_entries);
        for ((t, j), &m) in rec.masked_entries.indexed_iter() {
            if m {
                assert_eq!([out.data[[t, j, 0]], out.data[[t, j, 1]], out.data[[t, j, 2]]], [0.0; 3]);
            }
        }
    }

    #[test]
    fn joint_frame_counts_are_exact() {
        let seq = clean_seq(100, 1);
        let (out, rec) = mask_joint_frame(&seq, 0.05, 0.15, 3).unwrap();
        let full_frames = rec.masked_entries.rows().into_iter().filter(|r| r.iter().all(|m| *m)).count();
        assert_eq!(full_frames, 15);
        // 85 visible frames * 17 joints = 1445 entries; 5% of that rounds to 72.
        assert_eq!(rec.masked_count(), 15 * 17 + 72);
        assert_duality(&out, &rec);
    }

    #[test]
    fn zero_ratios_are_identity() {
        let seq = clean_seq(40, 2);
        let (out, rec) = mask_joint_frame(&seq, 0.0, 0.0, 9).unwrap();
        assert_eq!(out, seq);
        assert_eq!(rec.masked_count(), 0);
        assert!(mask_joint_frame(&seq, 1.0, 0.0, 9).is_err());
        assert!(mask_joint_frame(&seq, 0.0, 1.5, 9).is_err());
    }

    #[test]
    fn body_part_masks_exactly_one_part() {
        let seq = clean_seq(30, 3);
        for seed in 0..30 {
            let (out, rec) = mask_body_part(&seq, seed).unwrap();
            let ModeParams::BodyPart { part } = rec.params else { panic!() };
            let joints = seq.layout.part(part);
            for ((t, j), &m) in rec.masked_entries.indexed_iter() {
                assert_eq!(m, joints.contains(&j));
                if !m {
                    for k in 0..3 {
                        assert_eq!(out.data[[t, j, k]].to_bits(), seq.data[[t, j, k]].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn body_part_choice_is_uniform() {
        let seq = clean_seq(16, 4);
        let mut counts = [0usize; 6];
        for seed in 0..6000 {
            let (_, rec) = mask_body_part(&seq, derive(77, seed)).unwrap();
            let ModeParams::BodyPart { part } = rec.params else { panic!() };
            counts[part.index()] += 1;
        }
        for c in counts {
            assert!((850..=1150).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn time_window_stays_inside_and_is_local() {
        let seq = clean_seq(120, 5);
        for seed in 0..200 {
            let (out, rec) = mask_time_window(&seq, 30, 80, seed).unwrap();
            let ModeParams::TimeWindow { start, len, .. } = rec.params else { panic!() };
            assert!((30..=80).contains(&len));
            assert!(start + len <= 120);
            for t in 0..120 {
                let inside = (start..start + len).contains(&t);
                for j in 0..NUM_JOINTS {
                    assert_eq!(rec.masked_entries[[t, j]], inside);
                    if !inside {
                        assert_eq!(out.data[[t, j, 0]].to_bits(), seq.data[[t, j, 0]].to_bits());
                    }
                }
            }
        }
        assert!(mask_time_window(&clean_seq(80, 1), 30, 80, 0).is_err());
        assert!(mask_time_window(&clean_seq(80, 1), 1, 10, 0).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let seq = clean_seq(20, 6);
        assert_eq!(add_noise(&seq, 0.0, 0.0, 1).unwrap(), seq);
        assert!(add_noise(&seq, -1.0, 0.0, 1).is_err());
    }

    #[test]
    fn noise_std_matches_sigma() {
        // 3000 frames x 17 joints x 2 axes > 10^5 samples.
        let seq = clean_seq(3000, 7);
        let sigma = 0.02;
        let out = add_noise(&seq, sigma, 0.0, 8).unwrap();
        let diffs: Vec<f64> = out.data.iter().zip(seq.data.iter()).enumerate().filter(|(i, _)| i % 3 != 2).map(|(_, (a, b))| a - b).collect();
        assert!(diffs.len() >= 100_000);
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn noise_leaves_masked_entries_alone() {
        let seq = clean_seq(50, 8);
        let (masked, rec) = mask_body_part(&seq, 1).unwrap();
        let noisy = add_noise(&masked, 0.05, 0.3, 2).unwrap();
        assert_duality(&noisy, &rec);
        for ((t, j), &m) in rec.masked_entries.indexed_iter() {
            if !m {
                let c = noisy.data[[t, j, 2]];
                assert!((CONFIDENCE_FLOOR..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn schedule_frequencies() {
        let seq = clean_seq(100, 9);
        let config = CorruptionConfig::default();
        let mut counts = [0usize; 3];
        for i in 0..4000 {
            let (_, rec) = schedule_corruption(&seq, derive(5, i), &config).unwrap();
            counts[rec.mode() as usize] += 1;
        }
        for (c, p) in counts.iter().zip([0.5, 0.25, 0.25]) {
            assert!((*c as f64 / 4000.0 - p).abs() <= 0.03, "{counts:?}");
        }
    }

    #[test]
    fn schedule_identity_when_everything_is_zero() {
        let seq = clean_seq(30, 10);
        let config = CorruptionConfig { joint_ratio: 0.0, frame_ratio: 0.0, sigma: 0.0, outlier_prob: 0.0, mode_probs: [1.0, 0.0, 0.0], ..Default::default() };
        for seed in 0..10 {
            let (out, rec) = schedule_corruption(&seq, seed, &config).unwrap();
            assert_eq!(out, seq);
            assert!(rec.noise_applied());
        }
    }

    #[test]
    fn sidecar_round_trip_and_replay() {
        let seq = clean_seq(100, 11);
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..12 {
            let (out, rec) = schedule_corruption(&seq, seed, &CorruptionConfig::default()).unwrap();
            let path = dir.path().join(format!("{seed}.rec"));
            rec.save(&path).unwrap();
            let loaded = CorruptionRecord::load(&path).unwrap();
            assert_eq!(loaded, rec);
            let (again, rec2) = loaded.replay(&seq).unwrap();
            assert_eq!(rec2, rec);
            assert!(again.data.iter().zip(out.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert!(CorruptionRecord::from_bytes(b"APCX").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn masked_counts_follow_closed_form(t in 16usize..=512, seed in any::<u64>()) {
            let seq = clean_seq(t, seed);
            let (out, rec) = mask_joint_frame(&seq, 0.05, 0.15, seed).unwrap();
            let frames = (15 * t + 50) / 100;
            let visible = (t - frames) * NUM_JOINTS;
            let joints = (5 * visible + 50) / 100;
            prop_assert_eq!(rec.masked_count(), frames * NUM_JOINTS + joints);
            prop_assert_eq!(out.masked(), rec.masked_entries.clone());

            if t > 81 {
                let (out, rec) = mask_time_window(&seq, 30, 80, seed).unwrap();
                let ModeParams::TimeWindow { len, .. } = rec.params else { unreachable!() };
                prop_assert_eq!(rec.masked_count(), len * NUM_JOINTS);
                prop_assert_eq!(out.masked(), rec.masked_entries);
            }
        }
    }
}
