//! Skeleton layout, pose sequence containers and the geometric transforms
//! shared by the rest of the crate.
//!
//! Axes convention for 3D data: `x` lateral, `y` vertical (up), `z` depth
//! away from the front camera. All 3D coordinates are millimeters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};

/// Joint count of the Human3.6M-style layout.
pub const NUM_JOINTS: usize = 17;

/// Input channels of a 2D sequence: x, y, confidence.
pub const C_IN: usize = 3;

/// Index of the pelvis in the layout.
pub const ROOT: usize = 0;

const H36M_TABLE: &str = include_str!("../data/h36m_layout.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BodyPart {
    Head,
    Arms,
    UpperBody,
    Hips,
    Legs,
    LowerBody,
}

impl BodyPart {
    pub const ALL: [BodyPart; 6] = [
        BodyPart::Head,
        BodyPart::Arms,
        BodyPart::UpperBody,
        BodyPart::Hips,
        BodyPart::Legs,
        BodyPart::LowerBody,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BodyPart::Head => "head",
            BodyPart::Arms => "arms",
            BodyPart::UpperBody => "upper_body",
            BodyPart::Hips => "hips",
            BodyPart::Legs => "legs",
            BodyPart::LowerBody => "lower_body",
        }
    }

    pub fn index(self) -> usize {
        BodyPart::ALL.iter().position(|&p| p == self).unwrap()
    }
}

impl fmt::Display for BodyPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BodyPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BodyPart::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownPart(s.to_string()))
    }
}

/// Joint names, kinematic tree and the six-part body partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonLayout {
    joint_names: Vec<String>,
    parents: Vec<Option<usize>>,
    parts: BTreeMap<BodyPart, Vec<usize>>,
}

impl SkeletonLayout {
    /// The shipped 17-joint layout.
    pub fn h36m() -> Arc<SkeletonLayout> {
        static LAYOUT: OnceLock<Arc<SkeletonLayout>> = OnceLock::new();
        LAYOUT
            .get_or_init(|| Arc::new(SkeletonLayout::parse(H36M_TABLE).expect("bundled layout table is valid")))
            .clone()
    }

    /// Parses a layout table: one joint per line, `index name parent parts`,
    /// `-` as the root's parent, `#` comments.
    pub fn parse(text: &str) -> Result<SkeletonLayout> {
        let mut rows = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 4 {
                return Err(Error::Layout { line: lineno + 1, reason: format!("expected 4 columns, got {}", cols.len()) });
            }
            let index: usize = cols[0]
                .parse()
                .map_err(|_| Error::Layout { line: lineno + 1, reason: format!("bad index `{}`", cols[0]) })?;
            if index != rows.len() {
                return Err(Error::Layout { line: lineno + 1, reason: format!("index {index} out of order") });
            }
            rows.push((lineno + 1, cols[1].to_string(), cols[2].to_string(), cols[3].to_string()));
        }

        let joint_names: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        let mut parents = Vec::with_capacity(rows.len());
        let mut parts: BTreeMap<BodyPart, Vec<usize>> = BTreeMap::new();
        for (j, (line, _, parent, part_list)) in rows.iter().enumerate() {
            let parent = if parent == "-" {
                None
            } else {
                let p = joint_names
                    .iter()
                    .position(|n| n == parent)
                    .ok_or_else(|| Error::Layout { line: *line, reason: format!("unknown parent `{parent}`") })?;
                Some(p)
            };
            parents.push(parent);
            for name in part_list.split(',') {
                let part: BodyPart = name.parse().map_err(|_| Error::Layout { line: *line, reason: format!("unknown part `{name}`") })?;
                parts.entry(part).or_default().push(j);
            }
        }
        let layout = SkeletonLayout { joint_names, parents, parts };
        layout.validate()?;
        Ok(layout)
    }

    fn validate(&self) -> Result<()> {
        let fail = |reason: String| Err(Error::Layout { line: 0, reason });
        if self.joint_names.len() != NUM_JOINTS {
            return fail(format!("expected {NUM_JOINTS} joints, got {}", self.joint_names.len()));
        }
        if self.parents[ROOT].is_some() || self.parents.iter().filter(|p| p.is_none()).count() != 1 {
            return fail("joint 0 must be the unique root".into());
        }
        // Every joint must reach the root without revisiting a joint.
        for start in 0..self.num_joints() {
            let mut j = start;
            let mut steps = 0;
            while let Some(p) = self.parents[j] {
                j = p;
                steps += 1;
                if steps > self.num_joints() {
                    return fail(format!("cycle through joint {start}"));
                }
            }
        }
        for part in BodyPart::ALL {
            if self.parts.get(&part).is_none_or(|v| v.is_empty()) {
                return fail(format!("part `{part}` is empty"));
            }
        }
        let mut covered = vec![false; self.num_joints()];
        for joints in self.parts.values() {
            for &j in joints {
                covered[j] = true;
            }
        }
        if let Some(j) = covered.iter().position(|c| !c) {
            return fail(format!("joint `{}` belongs to no part", self.joint_names[j]));
        }
        Ok(())
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joint_names.iter().position(|n| n == name)
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    /// Joint indices of one body part, ascending.
    pub fn part(&self, part: BodyPart) -> &[usize] {
        &self.parts[&part]
    }

    /// `(child, parent)` pairs for every bone.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.parents.iter().enumerate().filter_map(|(c, p)| p.map(|p| (c, p)))
    }
}

/// Joint set of a named part.
pub fn part_joints<'a>(layout: &'a SkeletonLayout, part_name: &str) -> Result<&'a [usize]> {
    let part: BodyPart = part_name.parse()?;
    Ok(layout.part(part))
}

/// A 3D motion clip, `T x J x 3`, millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSeq3D {
    pub data: Array3<f64>,
    pub layout: Arc<SkeletonLayout>,
    pub fps: f64,
}

impl PoseSeq3D {
    pub fn new(data: Array3<f64>, layout: Arc<SkeletonLayout>, fps: f64) -> Result<Self> {
        let seq = PoseSeq3D { data, layout, fps };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let (t, j, c) = self.data.dim();
        if t < 2 {
            return Err(Error::invalid("seq", format!("need at least 2 frames, got {t}")));
        }
        if j != self.layout.num_joints() || c != 3 {
            return Err(Error::Shape {
                expected: format!("T x {} x 3", self.layout.num_joints()),
                got: format!("{t} x {j} x {c}"),
            });
        }
        check_finite(&self.data)
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    /// Distance between every bone's endpoints, `T x bones`.
    pub fn bone_lengths(&self) -> Vec<Vec<f64>> {
        let bones: Vec<(usize, usize)> = self.layout.bones().collect();
        (0..self.frames())
            .map(|t| {
                bones
                    .iter()
                    .map(|&(c, p)| {
                        (0..3).map(|k| (self.data[[t, c, k]] - self.data[[t, p, k]]).powi(2)).sum::<f64>().sqrt()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Affine map between camera-plane millimeters and normalized `[-1, 1]`
/// coordinates: `normalized = (mm - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelBox {
    pub center: [f64; 2],
    pub scale: f64,
}

/// Margin added around the tight bounding box.
pub const BOX_MARGIN: f64 = 0.1;

impl PixelBox {
    /// Square box around every visible entry of the clip. `scale` is half
    /// of the longer side times `1 + margin`.
    pub fn enclosing(seq: &PoseSeq2D, margin: f64) -> Result<PixelBox> {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for e in seq.data.rows() {
            if e[2] <= 0.0 {
                continue;
            }
            for k in 0..2 {
                lo[k] = lo[k].min(e[k]);
                hi[k] = hi[k].max(e[k]);
            }
        }
        if !lo[0].is_finite() {
            return Err(Error::invalid("bbox", "no visible entries"));
        }
        let half = 0.5 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
        if half <= 0.0 {
            return Err(Error::invalid("bbox", "zero extent"));
        }
        Ok(PixelBox { center: [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])], scale: half * (1.0 + margin) })
    }
}

/// A 2D sequence, `T x J x 3` with channels (x, y, confidence).
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSeq2D {
    pub data: Array3<f64>,
    pub layout: Arc<SkeletonLayout>,
    /// Set once the sequence has been normalized; maps back to millimeters.
    pub pixel_box: Option<PixelBox>,
}

impl PoseSeq2D {
    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn joints(&self) -> usize {
        self.data.dim().1
    }

    pub fn validate(&self) -> Result<()> {
        let (t, j, c) = self.data.dim();
        if j != self.layout.num_joints() || c != C_IN {
            return Err(Error::Shape {
                expected: format!("T x {} x {C_IN}", self.layout.num_joints()),
                got: format!("{t} x {j} x {c}"),
            });
        }
        check_finite(&self.data)
    }

    /// `T x J` mask of entries whose confidence is exactly zero.
    pub fn masked(&self) -> ndarray::Array2<bool> {
        self.data.index_axis(Axis(2), 2).mapv(|c| c == 0.0)
    }
}

fn check_finite(data: &Array3<f64>) -> Result<()> {
    match data.indexed_iter().find(|(_, v)| !v.is_finite()) {
        Some(((t, j, k), v)) => Err(Error::NonFinite(format!("frame {t}, joint {j}, channel {k} ({v})"))),
        None => Ok(()),
    }
}

/// Camera used for orthographic projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum View {
    /// Looks along +z; image plane (x, y).
    Front,
    /// Looks along -x; image plane (z, y).
    Side,
}

impl View {
    pub const BOTH: [View; 2] = [View::Front, View::Side];

    pub fn name(self) -> &'static str {
        match self {
            View::Front => "front",
            View::Side => "side",
        }
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(View::Front),
            "side" => Ok(View::Side),
            _ => Err(Error::invalid("view", format!("`{s}` is not front|side"))),
        }
    }
}

/// Orthographic projection. The result is in millimeters (not yet
/// normalized) with confidence 1 everywhere.
pub fn project_orthographic(seq: &PoseSeq3D, view: View) -> Result<PoseSeq2D> {
    check_finite(&seq.data)?;
    let (t, j, _) = seq.data.dim();
    let (u, v) = match view {
        View::Front => (0, 1),
        View::Side => (2, 1),
    };
    let mut out = Array3::zeros((t, j, C_IN));
    for ti in 0..t {
        for ji in 0..j {
            out[[ti, ji, 0]] = seq.data[[ti, ji, u]];
            out[[ti, ji, 1]] = seq.data[[ti, ji, v]];
            out[[ti, ji, 2]] = 1.0;
        }
    }
    Ok(PoseSeq2D { data: out, layout: seq.layout.clone(), pixel_box: None })
}

/// Expresses a clip in the coordinate frame of `view`'s camera, so that the
/// first two channels coincide with [`project_orthographic`] and the third
/// is depth. The side camera is the front camera rotated 90 degrees about
/// the vertical axis: `(x, y, z) -> (z, y, -x)`.
pub fn to_camera_frame(seq: &PoseSeq3D, view: View) -> PoseSeq3D {
    let mut out = seq.clone();
    if view == View::Side {
        for mut e in out.data.rows_mut() {
            let (x, z) = (e[0], e[2]);
            e[0] = z;
            e[2] = -x;
        }
    }
    out
}

/// Maps x, y into the normalized square of `bbox`. Entries with zero
/// confidence are left as they are.
pub fn normalize_to_pixels(seq: &PoseSeq2D, bbox: PixelBox) -> Result<PoseSeq2D> {
    if !(bbox.scale > 0.0) || !bbox.scale.is_finite() {
        return Err(Error::invalid("bbox", format!("scale must be positive, got {}", bbox.scale)));
    }
    let mut out = seq.clone();
    for mut e in out.data.rows_mut() {
        if e[2] == 0.0 {
            continue;
        }
        e[0] = (e[0] - bbox.center[0]) / bbox.scale;
        e[1] = (e[1] - bbox.center[1]) / bbox.scale;
    }
    out.pixel_box = Some(bbox);
    Ok(out)
}

/// Inverse of [`normalize_to_pixels`] using the stored box.
pub fn denormalize(seq: &PoseSeq2D) -> Result<PoseSeq2D> {
    let bbox = seq.pixel_box.ok_or_else(|| Error::invalid("seq", "sequence was never normalized"))?;
    let mut out = seq.clone();
    for mut e in out.data.rows_mut() {
        if e[2] == 0.0 {
            continue;
        }
        e[0] = e[0] * bbox.scale + bbox.center[0];
        e[1] = e[1] * bbox.scale + bbox.center[1];
    }
    out.pixel_box = None;
    Ok(out)
}

/// Translates each frame so the pelvis sits at the origin.
pub fn root_center(seq: &PoseSeq3D) -> PoseSeq3D {
    let mut out = seq.clone();
    root_center_in_place(&mut out.data);
    out
}

pub(crate) fn root_center_in_place(data: &mut Array3<f64>) {
    let (t, j, _) = data.dim();
    for ti in 0..t {
        let root = [data[[ti, ROOT, 0]], data[[ti, ROOT, 1]], data[[ti, ROOT, 2]]];
        for ji in 0..j {
            for k in 0..3 {
                data[[ti, ji, k]] -= root[k];
            }
        }
    }
}
