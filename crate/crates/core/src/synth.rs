//! Procedural labeled motion corpus.
//!
//! Every clip is produced by forward kinematics over a fixed rest skeleton,
//! so bone lengths are constant over time. Each action class drives joint
//! angles with a small set of periodic curves; the per-clip seed jitters
//! frequency, amplitude, phase, heading and start position.
//!
//! On disk a corpus is a directory holding `manifest.tsv` and one
//! `clips/<id>.bin` per clip (see [`write_corpus`]).

use std::collections::BTreeSet;
use std::f64::consts::{FRAC_PI_4, PI, TAU};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Rotation3, Vector3};
use ndarray::Array3;
use rand::seq::index::sample;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{derive, rng_from};
use crate::skeleton::{PoseSeq3D, SkeletonLayout, View, NUM_JOINTS};

pub const FPS: f64 = 30.0;
pub const MIN_DURATION: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ActionClass {
    Walk,
    Run,
    Jump,
    Wave,
    Kick,
    Bend,
    Raise,
    Throw,
    Pick,
    Stand,
}

impl ActionClass {
    pub const ALL: [ActionClass; 10] = [
        ActionClass::Walk,
        ActionClass::Run,
        ActionClass::Jump,
        ActionClass::Wave,
        ActionClass::Kick,
        ActionClass::Bend,
        ActionClass::Raise,
        ActionClass::Throw,
        ActionClass::Pick,
        ActionClass::Stand,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionClass::Walk => "walk",
            ActionClass::Run => "run",
            ActionClass::Jump => "jump",
            ActionClass::Wave => "wave",
            ActionClass::Kick => "kick",
            ActionClass::Bend => "bend",
            ActionClass::Raise => "raise",
            ActionClass::Throw => "throw",
            ActionClass::Pick => "pick",
            ActionClass::Stand => "stand",
        }
    }

    /// Label phrasings; a clip's label is drawn from these by its seed.
    pub fn phrasings(self) -> [&'static str; 3] {
        match self {
            ActionClass::Walk => ["walk", "walk forward", "walking straight ahead"],
            ActionClass::Run => ["run", "run forward", "jog quickly ahead"],
            ActionClass::Jump => ["jump", "jump up", "hop in place"],
            ActionClass::Wave => ["wave", "wave right hand", "greet by waving"],
            ActionClass::Kick => ["kick", "kick with right leg", "kick forward"],
            ActionClass::Bend => ["bend down", "bend over", "lean forward and down"],
            ActionClass::Raise => ["raise arms", "raise both hands", "lift arms overhead"],
            ActionClass::Throw => ["throw", "throw a ball", "throw something forward"],
            ActionClass::Pick => ["pick up", "pick something up", "crouch to pick up"],
            ActionClass::Stand => ["stand", "stand still", "stand in place"],
        }
    }
}

impl fmt::Display for ActionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActionClass::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::UnknownClass(s.to_string()))
    }
}

/// Class of a clip: a single action or a transition between two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClipClass {
    Action(ActionClass),
    Transition(ActionClass, ActionClass),
}

impl fmt::Display for ClipClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClipClass::Action(a) => write!(f, "{a}"),
            ClipClass::Transition(a, b) => write!(f, "{a}->{b}"),
        }
    }
}

impl FromStr for ClipClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once("->") {
            Some((a, b)) => Ok(ClipClass::Transition(a.parse()?, b.parse()?)),
            None => Ok(ClipClass::Action(s.parse()?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    pub motion: PoseSeq3D,
    pub label_text: String,
    pub class: ClipClass,
    pub seed: u64,
}

impl LabeledClip {
    pub fn duration(&self) -> usize {
        self.motion.frames()
    }
}

/// Rest-pose bone offsets from each joint's parent, millimeters. The body
/// faces -z (toward the front camera), so its right side is +x.
const REST_OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [130.0, 0.0, 0.0],
    [0.0, -440.0, 0.0],
    [0.0, -430.0, 0.0],
    [-130.0, 0.0, 0.0],
    [0.0, -440.0, 0.0],
    [0.0, -430.0, 0.0],
    [0.0, 230.0, 0.0],
    [0.0, 250.0, 0.0],
    [0.0, 110.0, -40.0],
    [0.0, 110.0, 20.0],
    [-160.0, -20.0, 0.0],
    [0.0, -280.0, 0.0],
    [0.0, -250.0, 0.0],
    [160.0, -20.0, 0.0],
    [0.0, -280.0, 0.0],
    [0.0, -250.0, 0.0],
];

/// Standing pelvis height, millimeters.
pub const STANDING_HEIGHT: f64 = 950.0;

const PARENTS: [Option<usize>; NUM_JOINTS] =
    [None, Some(0), Some(1), Some(2), Some(0), Some(4), Some(5), Some(0), Some(7), Some(8), Some(9), Some(8), Some(11), Some(12), Some(8), Some(14), Some(15)];

/// Joint angles of one frame, radians. Index 0 is the right side, 1 the
/// left. Flexion is forward for hips, shoulders and elbows, backward for
/// knees; spine flexion bends the torso forward.
#[derive(Debug, Default, Clone, Copy)]
struct Angles {
    hip_flex: [f64; 2],
    knee_flex: [f64; 2],
    shoulder_flex: [f64; 2],
    shoulder_abd: [f64; 2],
    elbow_flex: [f64; 2],
    spine_flex: f64,
    /// Pelvis displacement from its start, heading-relative: (lateral, up, forward).
    root: [f64; 3],
}

/// Per-clip jitter drawn from the seed.
#[derive(Debug, Clone, Copy)]
struct Style {
    freq: f64,
    amp: f64,
    phase: f64,
    heading: f64,
    start: [f64; 2],
}

fn angles(class: ActionClass, t: f64, s: &Style) -> Angles {
    let mut a = Angles::default();
    let ph = TAU * s.freq * t + s.phase;
    let amp = s.amp;
    let pos = |x: f64| x.max(0.0);
    let ease = (1.0 - ph.cos()) * 0.5;
    match class {
        ActionClass::Walk => {
            let f = s.freq;
            a.hip_flex = [0.45 * amp * ph.sin(), 0.45 * amp * (ph + PI).sin()];
            a.knee_flex = [0.3 + 0.3 * amp * (ph - 0.5 * PI).sin(), 0.3 + 0.3 * amp * (ph + 0.5 * PI).sin()];
            a.shoulder_flex = [0.35 * amp * (ph + PI).sin(), 0.35 * amp * ph.sin()];
            a.shoulder_abd = [0.1, 0.1];
            a.elbow_flex = [0.3, 0.3];
            a.root = [0.0, 20.0 * (2.0 * ph).cos(), 1200.0 * t * f];
        }
        ActionClass::Run => {
            a.hip_flex = [0.7 * amp * ph.sin(), 0.7 * amp * (ph + PI).sin()];
            a.knee_flex = [0.7 + 0.6 * amp * (ph - 0.5 * PI).sin(), 0.7 + 0.6 * amp * (ph + 0.5 * PI).sin()];
            a.shoulder_flex = [0.6 * amp * (ph + PI).sin(), 0.6 * amp * ph.sin()];
            a.shoulder_abd = [0.15, 0.15];
            a.elbow_flex = [1.4, 1.4];
            a.spine_flex = 0.15;
            a.root = [0.0, 50.0 * ph.sin().abs(), 2000.0 * t * s.freq];
        }
        ActionClass::Jump => {
            let air = pos(ph.sin());
            let crouch = pos(-ph.sin());
            a.hip_flex = [0.6 * crouch; 2];
            a.knee_flex = [1.2 * crouch + 0.1 * air; 2];
            a.shoulder_flex = [2.5 * amp * air - 0.4 * crouch; 2];
            a.elbow_flex = [0.2; 2];
            a.spine_flex = 0.3 * crouch;
            a.root = [0.0, 350.0 * amp * air - 150.0 * crouch, 0.0];
        }
        ActionClass::Wave => {
            a.shoulder_abd = [2.5 + 0.15 * amp * ph.sin(), 0.1];
            a.elbow_flex = [0.5 + 0.5 * amp * ph.sin(), 0.2];
            a.knee_flex = [0.05; 2];
            a.root = [10.0 * (0.25 * ph).sin(), 0.0, 0.0];
        }
        ActionClass::Kick => {
            let lift = pos(ph.sin());
            a.hip_flex = [1.3 * amp * lift * lift - 0.2 * pos(-ph.sin()), 0.0];
            a.knee_flex = [0.9 * pos((ph - PI / 3.0).sin()) + 0.1, 0.15];
            a.shoulder_abd = [0.4, 0.4];
            a.shoulder_flex = [-0.3 * lift, 0.3 * lift];
            a.elbow_flex = [0.4; 2];
            a.spine_flex = -0.15 * lift;
        }
        ActionClass::Bend => {
            a.spine_flex = 1.2 * amp * ease;
            a.hip_flex = [0.35 * amp * ease; 2];
            a.shoulder_flex = [0.6 * ease; 2];
            a.elbow_flex = [0.1; 2];
            a.root = [0.0, -30.0 * ease, 60.0 * ease];
        }
        ActionClass::Raise => {
            a.shoulder_flex = [2.8 * amp * ease; 2];
            a.shoulder_abd = [0.1; 2];
            a.elbow_flex = [0.15; 2];
        }
        ActionClass::Throw => {
            a.shoulder_abd = [1.2, 0.3];
            a.shoulder_flex = [1.6 * amp * ph.sin(), 0.4 * pos(-ph.sin())];
            a.elbow_flex = [1.3 * (1.0 - pos(ph.sin())), 0.3];
            a.spine_flex = 0.35 * pos(ph.sin()) - 0.1 * pos(-ph.sin());
            a.hip_flex = [0.0, 0.25 * pos(ph.sin())];
            a.knee_flex = [0.1, 0.2 * pos(ph.sin())];
        }
        ActionClass::Pick => {
            a.knee_flex = [1.6 * amp * ease; 2];
            a.hip_flex = [1.2 * amp * ease; 2];
            a.spine_flex = 0.6 * ease;
            a.shoulder_flex = [0.9 * ease; 2];
            a.elbow_flex = [0.2; 2];
            a.root = [0.0, -330.0 * amp * ease, 0.0];
        }
        ActionClass::Stand => {
            a.root = [15.0 * ph.sin(), 3.0 * (2.0 * ph).sin(), 0.0];
            a.spine_flex = 0.03 * ph.sin();
            a.shoulder_flex = [0.05 * (ph + 1.0).sin(); 2];
            a.shoulder_abd = [0.08; 2];
            a.elbow_flex = [0.15; 2];
            a.knee_flex = [0.04; 2];
        }
    }
    a
}

fn base_freq(class: ActionClass) -> f64 {
    match class {
        ActionClass::Walk => 1.0,
        ActionClass::Run => 1.6,
        ActionClass::Jump => 0.8,
        ActionClass::Wave => 2.0,
        ActionClass::Kick => 0.7,
        ActionClass::Bend => 0.4,
        ActionClass::Raise => 0.5,
        ActionClass::Throw => 0.8,
        ActionClass::Pick => 0.4,
        ActionClass::Stand => 0.3,
    }
}

/// Global joint positions of one frame.
fn forward_kinematics(a: &Angles, heading: f64, origin: [f64; 2]) -> [[f64; 3]; NUM_JOINTS] {
    let rx = |v: f64| Rotation3::from_axis_angle(&Vector3::x_axis(), v);
    let rz = |v: f64| Rotation3::from_axis_angle(&Vector3::z_axis(), v);
    let identity = Rotation3::identity();

    let mut local = [identity; NUM_JOINTS];
    // Right side at +x: abduction is +z rotation on the right, -z on the left.
    local[1] = rx(a.hip_flex[0]);
    local[2] = rx(-a.knee_flex[0]);
    local[4] = rx(a.hip_flex[1]);
    local[5] = rx(-a.knee_flex[1]);
    local[7] = rx(-a.spine_flex);
    local[14] = rz(a.shoulder_abd[0]) * rx(a.shoulder_flex[0]);
    local[15] = rx(a.elbow_flex[0]);
    local[11] = rz(-a.shoulder_abd[1]) * rx(a.shoulder_flex[1]);
    local[12] = rx(a.elbow_flex[1]);
    // Shoulders hang from the thorax, so the spine bend already reaches them.

    let yaw = Rotation3::from_axis_angle(&Vector3::y_axis(), heading);
    let forward = yaw * Vector3::new(0.0, 0.0, -1.0);
    let lateral = yaw * Vector3::new(1.0, 0.0, 0.0);
    let root = Vector3::new(origin[0], STANDING_HEIGHT, origin[1]) + lateral * a.root[0] + Vector3::y() * a.root[1] + forward * a.root[2];

    let mut global_rot = [identity; NUM_JOINTS];
    let mut pos = [Vector3::zeros(); NUM_JOINTS];
    global_rot[0] = yaw * local[0];
    pos[0] = root;
    for j in 1..NUM_JOINTS {
        let p = PARENTS[j].unwrap();
        let off = REST_OFFSETS[j];
        pos[j] = pos[p] + global_rot[p] * Vector3::new(off[0], off[1], off[2]);
        global_rot[j] = global_rot[p] * local[j];
    }
    let mut out = [[0.0; 3]; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        out[j] = [pos[j].x, pos[j].y, pos[j].z];
    }
    out
}

/// Generates one clip. Coordinates are rounded to `f32` precision so that a
/// clip written to disk and read back is identical to the generated one.
pub fn generate_motion(action_class: ActionClass, duration_frames: usize, seed: u64) -> Result<LabeledClip> {
    if duration_frames < MIN_DURATION {
        return Err(Error::invalid("duration_frames", format!("must be at least {MIN_DURATION}, got {duration_frames}")));
    }
    let mut rng = rng_from(derive(seed, 0x6d6f74));
    let phase = if action_class == ActionClass::Jump { rng.random_range(0.0..FRAC_PI_4) } else { rng.random_range(0.0..TAU) };
    let style = Style {
        freq: base_freq(action_class) * rng.random_range(0.9..1.1),
        amp: rng.random_range(0.9..1.1),
        phase,
        heading: rng.random_range(-0.35..0.35),
        start: [rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)],
    };
    let phrasing = rng.random_range(0..3usize);

    let mut data = Array3::zeros((duration_frames, NUM_JOINTS, 3));
    for t in 0..duration_frames {
        let a = angles(action_class, t as f64 / FPS, &style);
        let joints = forward_kinematics(&a, style.heading, style.start);
        for (j, p) in joints.iter().enumerate() {
            for k in 0..3 {
                data[[t, j, k]] = p[k] as f32 as f64;
            }
        }
    }
    Ok(LabeledClip {
        id: format!("{action_class}_{seed}"),
        motion: PoseSeq3D::new(data, SkeletonLayout::h36m(), FPS)?,
        label_text: action_class.phrasings()[phrasing].to_string(),
        class: ClipClass::Action(action_class),
        seed,
    })
}

/// `"transit from {a} to {b}"`.
pub fn build_transition_label(label_a: &str, label_b: &str) -> Result<String> {
    if label_a.trim().is_empty() || label_b.trim().is_empty() {
        return Err(Error::invalid("label", "transition labels must be non-empty"));
    }
    Ok(format!("transit from {label_a} to {label_b}"))
}

/// Joins two clips with a linear cross-fade over `blend_frames` frames.
///
/// Output length is `T_a + T_b - blend_frames`. Inside the blend region,
/// frame `k` (0-based) is `(1 - w) a[T_a - blend + k] + w b[k]` with
/// `w = (k + 1) / (blend + 1)`.
pub fn make_transition_clip(clip_a: &LabeledClip, clip_b: &LabeledClip, blend_frames: usize) -> Result<LabeledClip> {
    if clip_a.motion.layout != clip_b.motion.layout {
        return Err(Error::invalid("clip_b", "skeleton layouts differ"));
    }
    let (ta, tb) = (clip_a.duration(), clip_b.duration());
    if blend_frames >= ta.min(tb) {
        return Err(Error::invalid("blend_frames", format!("{blend_frames} is not below min duration {}", ta.min(tb))));
    }
    let (ClipClass::Action(ca), ClipClass::Action(cb)) = (clip_a.class, clip_b.class) else {
        return Err(Error::invalid("clip", "transitions join two single-action clips"));
    };
    let a = &clip_a.motion.data;
    let b = &clip_b.motion.data;
    let total = ta + tb - blend_frames;
    let mut data = Array3::zeros((total, NUM_JOINTS, 3));
    for t in 0..total {
        for j in 0..NUM_JOINTS {
            for k in 0..3 {
                data[[t, j, k]] = if t < ta - blend_frames {
                    a[[t, j, k]]
                } else if t < ta {
                    let i = t - (ta - blend_frames);
                    let w = (i + 1) as f64 / (blend_frames + 1) as f64;
                    (1.0 - w) * a[[t, j, k]] + w * b[[i, j, k]]
                } else {
                    b[[t + blend_frames - ta, j, k]]
                };
            }
        }
    }
    Ok(LabeledClip {
        id: format!("{}+{}", clip_a.id, clip_b.id),
        motion: PoseSeq3D::new(data, clip_a.motion.layout.clone(), clip_a.motion.fps)?,
        label_text: build_transition_label(&clip_a.label_text, &clip_b.label_text)?,
        class: ClipClass::Transition(ca, cb),
        seed: derive(clip_a.seed, clip_b.seed),
    })
}

/// What to generate: an explicit per-class histogram plus transition clips.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub histogram: Vec<(ActionClass, usize)>,
    pub transitions: usize,
    pub duration: usize,
    pub seed: u64,
}

impl CorpusSpec {
    /// `per_class` clips for each of the first `classes` action classes.
    pub fn balanced(classes: usize, per_class: usize, duration: usize, seed: u64) -> Self {
        CorpusSpec {
            histogram: ActionClass::ALL.iter().take(classes).map(|&c| (c, per_class)).collect(),
            transitions: 0,
            duration,
            seed,
        }
    }

    pub fn total_clips(&self) -> usize {
        self.histogram.iter().map(|h| h.1).sum::<usize>() + self.transitions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub clips: Vec<LabeledClip>,
}

fn corpus_clip(spec: &CorpusSpec, index: usize) -> Result<LabeledClip> {
    let seed = derive(spec.seed, index as u64);
    let singles: usize = spec.histogram.iter().map(|h| h.1).sum();
    let mut clip = if index < singles {
        let mut i = index;
        let class = spec
            .histogram
            .iter()
            .find_map(|&(c, n)| if i < n { Some(c) } else { i -= n; None })
            .expect("index within histogram");
        generate_motion(class, spec.duration, seed)?
    } else {
        let classes: Vec<ActionClass> = spec.histogram.iter().filter(|h| h.1 > 0).map(|h| h.0).collect();
        if classes.len() < 2 {
            return Err(Error::invalid("transitions", "need at least two classes"));
        }
        let mut rng = rng_from(seed);
        let pair = sample(&mut rng, classes.len(), 2);
        let half = (spec.duration / 2).max(MIN_DURATION);
        let a = generate_motion(classes[pair.index(0)], half, derive(seed, 1))?;
        let mut b = generate_motion(classes[pair.index(1)], half, derive(seed, 2))?;
        // Start the second clip where the first one ends on the ground plane.
        let last = a.duration() - 1;
        let shift = [a.motion.data[[last, 0, 0]] - b.motion.data[[0, 0, 0]], a.motion.data[[last, 0, 2]] - b.motion.data[[0, 0, 2]]];
        for mut e in b.motion.data.rows_mut() {
            e[0] = (e[0] + shift[0]) as f32 as f64;
            e[2] = (e[2] + shift[1]) as f32 as f64;
        }
        let mut clip = make_transition_clip(&a, &b, (half / 4).min(8))?;
        clip.motion.data.mapv_inplace(|v| v as f32 as f64);
        clip.seed = seed;
        clip
    };
    clip.id = format!("clip_{index:05}");
    Ok(clip)
}

/// Generates a corpus; clip `i` depends only on `(spec.seed, i)`, so the
/// result does not depend on `threads`.
pub fn generate_corpus(spec: &CorpusSpec, threads: usize) -> Result<Corpus> {
    if spec.duration < MIN_DURATION {
        return Err(Error::invalid("duration", format!("must be at least {MIN_DURATION}")));
    }
    let n = spec.total_clips();
    let threads = threads.clamp(1, n.max(1));
    let chunk = n.div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<LabeledClip>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| s.spawn(move || (start..(start + chunk).min(n)).map(|i| corpus_clip(spec, i)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("generator thread panicked")).collect()
    });
    let mut clips = Vec::with_capacity(n);
    for p in parts {
        clips.extend(p?);
    }
    Ok(Corpus { clips })
}

impl Corpus {
    /// Clip count per class, in class order.
    pub fn histogram(&self) -> Vec<(ClipClass, usize)> {
        let mut counts: std::collections::BTreeMap<ClipClass, usize> = Default::default();
        for c in &self.clips {
            *counts.entry(c.class).or_default() += 1;
        }
        counts.into_iter().collect()
    }

    /// Distinct `(class, label)` pairs.
    pub fn label_pool(&self) -> BTreeSet<(ClipClass, String)> {
        self.clips.iter().map(|c| (c.class, c.label_text.clone())).collect()
    }
}

/// One anchor of a contrastive batch: a clip seen from one camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub clip: usize,
    pub view: View,
}

/// Anchors with their positive text and `K` negative texts. Candidate
/// order per anchor is `[positive, negatives...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Vec<Anchor>,
    pub positives: Vec<String>,
    pub negatives: Vec<Vec<String>>,
    pub targets: Vec<Vec<f64>>,
    pub positive_index: usize,
}

impl ContrastiveBatch {
    /// All `K + 1` candidate texts of anchor `i`.
    pub fn candidates(&self, i: usize) -> impl Iterator<Item = &str> {
        std::iter::once(self.positives[i].as_str()).chain(self.negatives[i].iter().map(String::as_str))
    }
}

/// Target distribution over `K + 1` candidates with the positive first.
pub fn target_distribution(k: usize, epsilon: f64) -> Vec<f64> {
    let mut y = vec![if k > 0 { epsilon / k as f64 } else { 0.0 }; k + 1];
    y[0] = 1.0 - epsilon;
    y
}

/// Samples `batch_size` anchors over every `(clip, view)` pair (without
/// replacement when the batch fits) and `k` negatives per anchor drawn
/// uniformly without replacement from labels of other classes.
pub fn sample_contrastive_batch(corpus: &Corpus, batch_size: usize, k: usize, epsilon: f64, seed: u64) -> Result<ContrastiveBatch> {
    if batch_size == 0 || corpus.clips.is_empty() {
        return Err(Error::invalid("batch_size", "need a non-empty corpus and batch"));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid("epsilon", format!("must be in [0, 1), got {epsilon}")));
    }
    let pool: Vec<(ClipClass, String)> = corpus.label_pool().into_iter().collect();
    let mut rng = rng_from(seed);
    let n = corpus.clips.len() * 2;
    let picks: Vec<usize> = if batch_size <= n {
        sample(&mut rng, n, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| rng.random_range(0..n)).collect()
    };
    let mut batch = ContrastiveBatch {
        anchors: Vec::with_capacity(batch_size),
        positives: Vec::with_capacity(batch_size),
        negatives: Vec::with_capacity(batch_size),
        targets: Vec::with_capacity(batch_size),
        positive_index: 0,
    };
    for p in picks {
        let clip = &corpus.clips[p / 2];
        let others: Vec<&String> = pool.iter().filter(|(c, l)| *c != clip.class && *l != clip.label_text).map(|(_, l)| l).collect();
        if others.len() < k {
            return Err(Error::invalid("k", format!("{k} negatives requested but only {} labels of other classes", others.len())));
        }
        let negatives = sample(&mut rng, others.len(), k).into_iter().map(|i| others[i].clone()).collect();
        batch.anchors.push(Anchor { clip: p / 2, view: View::BOTH[p % 2] });
        batch.positives.push(clip.label_text.clone());
        batch.negatives.push(negatives);
        batch.targets.push(target_distribution(k, epsilon));
    }
    Ok(batch)
}

const MANIFEST: &str = "manifest.tsv";
const CLIP_DIR: &str = "clips";

/// Writes `manifest.tsv` (one line per clip: `id class label_text seed
/// duration`, tab-separated) and `clips/<id>.bin` (u32 LE `T`, `J`, `C`,
/// then `T*J*C` f32 LE values in frame, joint, coordinate order).
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let clip_dir = dir.join(CLIP_DIR);
    fs::create_dir_all(&clip_dir).map_err(|e| Error::io(&clip_dir, e))?;
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = String::new();
    for clip in &corpus.clips {
        if clip.label_text.contains(['\t', '\n']) || clip.id.contains(['\t', '\n', '/']) {
            return Err(Error::invalid("clip", format!("id/label of {} cannot be stored in a manifest", clip.id)));
        }
        manifest.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", clip.id, clip.class, clip.label_text, clip.seed, clip.duration()));
        let path = clip_dir.join(format!("{}.bin", clip.id));
        write_tensor(&path, &clip.motion.data)?;
    }
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))
}

pub(crate) fn write_tensor(path: &Path, data: &Array3<f64>) -> Result<()> {
    let (t, j, c) = data.dim();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut buf = Vec::with_capacity(12 + 4 * data.len());
    for d in [t, j, c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_tensor(path: &Path) -> Result<Array3<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format { what: "clip tensor", reason: format!("{}: {reason}", path.display()) };
    if bytes.len() < 12 {
        return Err(bad("truncated header".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (t, j, c) = (dim(0), dim(1), dim(2));
    if bytes.len() != 12 + 4 * t * j * c {
        return Err(bad(format!("expected {} bytes for {t}x{j}x{c}, found {}", 12 + 4 * t * j * c, bytes.len())));
    }
    let values = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    Array3::from_shape_vec((t, j, c), values).map_err(|e| bad(e.to_string()))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let layout: Arc<SkeletonLayout> = SkeletonLayout::h36m();
    let mut clips = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |reason: String| Error::Format { what: "manifest", reason: format!("line {}: {reason}", i + 1) };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(bad(format!("expected 5 tab-separated columns, got {}", cols.len())));
        }
        let class: ClipClass = cols[1].parse()?;
        let seed: u64 = cols[3].parse().map_err(|_| bad(format!("bad seed `{}`", cols[3])))?;
        let duration: usize = cols[4].parse().map_err(|_| bad(format!("bad duration `{}`", cols[4])))?;
        let data = read_tensor(&dir.join(CLIP_DIR).join(format!("{}.bin", cols[0])))?;
        if data.dim().0 != duration {
            return Err(bad(format!("duration {duration} but tensor has {} frames", data.dim().0)));
        }
        clips.push(LabeledClip {
            id: cols[0].to_string(),
            motion: PoseSeq3D::new(data, layout.clone(), FPS)?,
            label_text: cols[2].to_string(),
            class,
            seed,
        });
    }
    Ok(Corpus { clips })
}
