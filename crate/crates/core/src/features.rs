//! Static and dynamic micro-motion features.
//!
//! Four groups per frame:
//!
//! * position (16): arm and leg joints relative to the neck, divided by bbox height.
//! * distance (24): 12 static values for ankle, knee, wrist and elbow pairs, then their
//!   12 first differences.
//! * static angle (16): limb segment directions, left-right segment differences and
//!   cross-body directions, all in units of pi.
//! * dynamic angle (16): wrapped first differences of the static angles.
//!
//! Dynamic entries of a sequence's first frame are zero.

use std::f64::consts::{PI, TAU};

use crate::error::Result;
use crate::skeleton::{bbox_from_pose, impute_pose_in_place, kp, BBox, ImputeReport, Pose, Track};

/// Bumped whenever feature definitions change; stored in model files.
pub const FEATURE_VERSION: u32 = 1;

pub const POSITION_DIM: usize = 16;
pub const DISTANCE_STATIC_DIM: usize = 12;
pub const DISTANCE_DIM: usize = 2 * DISTANCE_STATIC_DIM;
pub const ANGLE_DIM: usize = 16;

/// Minimum hip width in pixels before falling back to a height-based normalizer.
pub const EPSILON_W: f64 = 2.0;
/// Hip width used when the measured one is below [`EPSILON_W`], as a fraction of bbox height.
pub const HIP_FALLBACK_RATIO: f64 = 0.25;

/// Joints whose neck-relative coordinates make up the position group, in output order.
pub const POSITION_JOINTS: [usize; 8] = [
    kp::R_ELBOW,
    kp::R_WRIST,
    kp::L_ELBOW,
    kp::L_WRIST,
    kp::R_KNEE,
    kp::R_ANKLE,
    kp::L_KNEE,
    kp::L_ANKLE,
];

/// Right/left pairs for distance features: ankles, knees, wrists, elbows.
pub const DISTANCE_PAIRS: [(usize, usize); 4] = [
    (kp::R_ANKLE, kp::L_ANKLE),
    (kp::R_KNEE, kp::L_KNEE),
    (kp::R_WRIST, kp::L_WRIST),
    (kp::R_ELBOW, kp::L_ELBOW),
];

/// Limb segments measured against the horizontal axis.
pub const SEGMENTS: [(usize, usize); 8] = [
    (kp::R_SHOULDER, kp::R_ELBOW),
    (kp::R_ELBOW, kp::R_WRIST),
    (kp::L_SHOULDER, kp::L_ELBOW),
    (kp::L_ELBOW, kp::L_WRIST),
    (kp::R_HIP, kp::R_KNEE),
    (kp::R_KNEE, kp::R_ANKLE),
    (kp::L_HIP, kp::L_KNEE),
    (kp::L_KNEE, kp::L_ANKLE),
];

/// (right, left) indices into [`SEGMENTS`]: upper arms, forearms, thighs, shanks.
pub const SEGMENT_PAIRS: [(usize, usize); 4] = [(0, 2), (1, 3), (4, 6), (5, 7)];

/// Directions between keypoints of opposite limbs.
pub const CROSS_DIRECTIONS: [(usize, usize); 4] = [
    (kp::R_WRIST, kp::L_ELBOW),
    (kp::L_WRIST, kp::R_ELBOW),
    (kp::R_ANKLE, kp::L_KNEE),
    (kp::L_ANKLE, kp::R_KNEE),
];

/// A fixed-width feature block with per-entry validity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entries<const N: usize> {
    pub values: [f64; N],
    pub valid: [bool; N],
}

impl<const N: usize> Entries<N> {
    fn empty() -> Self {
        Entries {
            values: [0.0; N],
            valid: [false; N],
        }
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|&v| v)
    }
}

/// Difference between two angles, mapped into (-pi, pi].
pub fn wrap_angle_diff(prev: f64, cur: f64) -> f64 {
    let d = (cur - prev) % TAU;
    if d > PI {
        d - TAU
    } else if d <= -PI {
        d + TAU
    } else {
        d
    }
}

/// Direction of `from -> to` against the horizontal axis in (-pi, pi], or `None` for
/// coincident points.
fn direction(pose: &Pose, from: usize, to: usize) -> Option<f64> {
    let (x0, y0) = pose.point(from);
    let (x1, y1) = pose.point(to);
    let (dx, dy) = (x1 - x0, y1 - y0);
    if dx == 0.0 && dy == 0.0 {
        return None;
    }
    let theta = dy.atan2(dx);
    Some(if theta == -PI { PI } else { theta })
}

pub fn position_features(pose: &Pose, bbox: &BBox, conf_threshold: f64) -> Entries<POSITION_DIM> {
    let mut out = Entries::empty();
    let neck = &pose.keypoints[kp::NECK];
    if !neck.is_valid(conf_threshold) {
        return out;
    }
    let h = bbox.height();
    for (slot, &joint) in POSITION_JOINTS.iter().enumerate() {
        let k = &pose.keypoints[joint];
        if k.is_valid(conf_threshold) {
            out.values[2 * slot] = (k.x - neck.x) / h;
            out.values[2 * slot + 1] = (k.y - neck.y) / h;
            out.valid[2 * slot] = true;
            out.valid[2 * slot + 1] = true;
        }
    }
    out
}

/// Hip width used to normalize Euclidean distances.
pub fn hip_normalizer(pose: &Pose, bbox: &BBox, conf_threshold: f64) -> f64 {
    let r = &pose.keypoints[kp::R_HIP];
    let l = &pose.keypoints[kp::L_HIP];
    let width = if r.is_valid(conf_threshold) && l.is_valid(conf_threshold) {
        (r.x - l.x).hypot(r.y - l.y)
    } else {
        0.0
    };
    if width >= EPSILON_W {
        width
    } else {
        HIP_FALLBACK_RATIO * bbox.height()
    }
}

pub fn distance_features_static(
    pose: &Pose,
    bbox: &BBox,
    conf_threshold: f64,
) -> Entries<DISTANCE_STATIC_DIM> {
    let mut out = Entries::empty();
    let w = hip_normalizer(pose, bbox, conf_threshold);
    let h = bbox.height();
    for (slot, &(a, b)) in DISTANCE_PAIRS.iter().enumerate() {
        let (ka, kb) = (&pose.keypoints[a], &pose.keypoints[b]);
        if !(ka.is_valid(conf_threshold) && kb.is_valid(conf_threshold)) {
            continue;
        }
        let (dx, dy) = (kb.x - ka.x, kb.y - ka.y);
        let base = 3 * slot;
        out.values[base] = dx.hypot(dy) / w;
        out.values[base + 1] = dx.abs() / h;
        out.values[base + 2] = dy.abs() / h;
        out.valid[base..base + 3].fill(true);
    }
    out
}

pub fn angle_features_static(pose: &Pose, conf_threshold: f64) -> Entries<ANGLE_DIM> {
    let mut out = Entries::empty();
    let dir = |from: usize, to: usize| {
        if pose.keypoints[from].is_valid(conf_threshold)
            && pose.keypoints[to].is_valid(conf_threshold)
        {
            direction(pose, from, to)
        } else {
            None
        }
    };

    let mut segment = [None; 8];
    for (i, &(from, to)) in SEGMENTS.iter().enumerate() {
        segment[i] = dir(from, to);
        if let Some(theta) = segment[i] {
            out.values[i] = theta / PI;
            out.valid[i] = true;
        }
    }
    for (i, &(r, l)) in SEGMENT_PAIRS.iter().enumerate() {
        if let (Some(tr), Some(tl)) = (segment[r], segment[l]) {
            out.values[8 + i] = wrap_angle_diff(tr, tl) / PI;
            out.valid[8 + i] = true;
        }
    }
    for (i, &(from, to)) in CROSS_DIRECTIONS.iter().enumerate() {
        if let Some(theta) = dir(from, to) {
            out.values[12 + i] = theta / PI;
            out.valid[12 + i] = true;
        }
    }
    out
}

/// Per-frame static features, the part of a frame that does not depend on history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticFeatures {
    pub position: Entries<POSITION_DIM>,
    pub distance: Entries<DISTANCE_STATIC_DIM>,
    pub angle: Entries<ANGLE_DIM>,
}

pub fn static_features(pose: &Pose, conf_threshold: f64) -> Result<StaticFeatures> {
    let bbox = bbox_from_pose(pose, conf_threshold)?;
    Ok(StaticFeatures {
        position: position_features(pose, &bbox, conf_threshold),
        distance: distance_features_static(pose, &bbox, conf_threshold),
        angle: angle_features_static(pose, conf_threshold),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ValidMask {
    pub position: bool,
    pub distance: bool,
    pub angle_static: bool,
    pub angle_dynamic: bool,
}

impl ValidMask {
    pub fn all(&self) -> bool {
        self.position && self.distance && self.angle_static && self.angle_dynamic
    }
}

/// The model input `x_t` for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFrame {
    pub frame_index: u64,
    /// Position of the source pose within its track.
    pub source: usize,
    pub position: [f64; POSITION_DIM],
    /// Static distances followed by their first differences.
    pub distance: [f64; DISTANCE_DIM],
    pub angle_static: [f64; ANGLE_DIM],
    pub angle_dynamic: [f64; ANGLE_DIM],
    pub valid_mask: ValidMask,
}

/// Combines the current static features with the previous retained frame's.
pub fn combine(
    current: &StaticFeatures,
    prev: Option<&StaticFeatures>,
    frame_index: u64,
    source: usize,
) -> FeatureFrame {
    let mut distance = [0.0; DISTANCE_DIM];
    distance[..DISTANCE_STATIC_DIM].copy_from_slice(&current.distance.values);
    let mut angle_dynamic = [0.0; ANGLE_DIM];
    let mut dist_dyn_ok = true;
    let mut angle_dyn_ok = true;

    if let Some(prev) = prev {
        for i in 0..DISTANCE_STATIC_DIM {
            if current.distance.valid[i] && prev.distance.valid[i] {
                distance[DISTANCE_STATIC_DIM + i] =
                    current.distance.values[i] - prev.distance.values[i];
            } else {
                dist_dyn_ok = false;
            }
        }
        for i in 0..ANGLE_DIM {
            if current.angle.valid[i] && prev.angle.valid[i] {
                angle_dynamic[i] =
                    wrap_angle_diff(prev.angle.values[i] * PI, current.angle.values[i] * PI) / PI;
            } else {
                angle_dyn_ok = false;
            }
        }
    }

    FeatureFrame {
        frame_index,
        source,
        position: current.position.values,
        distance,
        angle_static: current.angle.values,
        angle_dynamic,
        valid_mask: ValidMask {
            position: current.position.all_valid(),
            distance: current.distance.all_valid() && dist_dyn_ok,
            angle_static: current.angle.all_valid(),
            angle_dynamic: angle_dyn_ok,
        },
    }
}

/// Causal feature extractor holding the history needed for one track.
///
/// Imputation, bbox checks and differencing all happen incrementally, so feeding
/// a track frame by frame produces exactly what [`extract_track_features`] returns.
#[derive(Debug, Clone)]
pub struct FeatureCursor {
    conf_threshold: f64,
    last_valid: [Option<(f64, f64)>; crate::skeleton::NUM_KEYPOINTS],
    prev: Option<StaticFeatures>,
    seen: usize,
}

impl FeatureCursor {
    pub fn new(conf_threshold: f64) -> Self {
        FeatureCursor {
            conf_threshold,
            last_valid: [None; crate::skeleton::NUM_KEYPOINTS],
            prev: None,
            seen: 0,
        }
    }

    pub fn conf_threshold(&self) -> f64 {
        self.conf_threshold
    }

    /// Static features of the last retained frame.
    pub fn prev_static(&self) -> Option<&StaticFeatures> {
        self.prev.as_ref()
    }

    /// Feeds one pose. A degenerate pose is skipped: the error is returned and the
    /// differencing history is left untouched (imputation memory still advances).
    pub fn push(&mut self, pose: &Pose) -> Result<FeatureFrame> {
        let source = self.seen;
        self.seen += 1;
        let mut pose = pose.clone();
        impute_pose_in_place(
            &mut pose,
            &mut self.last_valid,
            self.conf_threshold,
            &mut ImputeReport::default(),
        );
        let current = static_features(&pose, self.conf_threshold)?;
        let frame = combine(&current, self.prev.as_ref(), pose.frame_index, source);
        self.prev = Some(current);
        Ok(frame)
    }
}

/// Feature sequence of a whole track. Frames whose pose is degenerate are dropped and
/// differencing bridges the gap from the previous retained frame.
pub fn extract_track_features(track: &Track, conf_threshold: f64) -> Vec<FeatureFrame> {
    let mut cursor = FeatureCursor::new(conf_threshold);
    track
        .poses
        .iter()
        .filter_map(|pose| cursor.push(pose).ok())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureGroup {
    Position,
    Distance,
    AngleStatic,
    AngleDynamic,
}

impl FeatureGroup {
    pub fn name(self) -> &'static str {
        match self {
            FeatureGroup::Position => "position",
            FeatureGroup::Distance => "distance",
            FeatureGroup::AngleStatic => "angle_static",
            FeatureGroup::AngleDynamic => "angle_dynamic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            FeatureGroup::Position,
            FeatureGroup::Distance,
            FeatureGroup::AngleStatic,
            FeatureGroup::AngleDynamic,
        ]
        .into_iter()
        .find(|g| g.name() == s)
    }
}

/// Which feature groups feed the model; everything but `All` is an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureSelection {
    All,
    NoPosition,
    NoDistance,
    NoAngle,
    NoDynamic,
}

impl FeatureSelection {
    /// Rows of the ablation table, in report order.
    pub const ABLATION_ORDER: [FeatureSelection; 5] = [
        FeatureSelection::NoPosition,
        FeatureSelection::NoDistance,
        FeatureSelection::NoAngle,
        FeatureSelection::NoDynamic,
        FeatureSelection::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FeatureSelection::All => "all",
            FeatureSelection::NoPosition => "no-position",
            FeatureSelection::NoDistance => "no-distance",
            FeatureSelection::NoAngle => "no-angle",
            FeatureSelection::NoDynamic => "no-dynamic",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            FeatureSelection::All => "with all features",
            FeatureSelection::NoPosition => "without position features",
            FeatureSelection::NoDistance => "without distance features",
            FeatureSelection::NoAngle => "without angle features",
            FeatureSelection::NoDynamic => "without dynamic features",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            FeatureSelection::All,
            FeatureSelection::NoPosition,
            FeatureSelection::NoDistance,
            FeatureSelection::NoAngle,
            FeatureSelection::NoDynamic,
        ]
        .into_iter()
        .find(|sel| sel.name() == s)
    }

    /// Enabled groups with their input widths.
    pub fn groups(self) -> Vec<(FeatureGroup, usize)> {
        use FeatureGroup::*;
        match self {
            FeatureSelection::All => vec![
                (Position, POSITION_DIM),
                (Distance, DISTANCE_DIM),
                (AngleStatic, ANGLE_DIM),
                (AngleDynamic, ANGLE_DIM),
            ],
            FeatureSelection::NoPosition => vec![
                (Distance, DISTANCE_DIM),
                (AngleStatic, ANGLE_DIM),
                (AngleDynamic, ANGLE_DIM),
            ],
            FeatureSelection::NoDistance => vec![
                (Position, POSITION_DIM),
                (AngleStatic, ANGLE_DIM),
                (AngleDynamic, ANGLE_DIM),
            ],
            FeatureSelection::NoAngle => vec![(Position, POSITION_DIM), (Distance, DISTANCE_DIM)],
            FeatureSelection::NoDynamic => vec![
                (Position, POSITION_DIM),
                (Distance, DISTANCE_STATIC_DIM),
                (AngleStatic, ANGLE_DIM),
            ],
        }
    }

    pub fn input_width(self) -> usize {
        self.groups().iter().map(|&(_, d)| d).sum()
    }

    /// Flat model input: enabled groups concatenated in canonical order.
    pub fn model_input(self, frame: &FeatureFrame) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.input_width());
        for (group, width) in self.groups() {
            match group {
                FeatureGroup::Position => out.extend_from_slice(&frame.position),
                FeatureGroup::Distance => out.extend_from_slice(&frame.distance[..width]),
                FeatureGroup::AngleStatic => out.extend_from_slice(&frame.angle_static),
                FeatureGroup::AngleDynamic => out.extend_from_slice(&frame.angle_dynamic),
            }
        }
        out
    }
}
