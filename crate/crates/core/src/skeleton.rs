//! 2D pose and track data model.
//!
//! Keypoints follow the 18-point COCO-with-neck layout:
//!
//! | index | joint       | index | joint       |
//! |-------|-------------|-------|-------------|
//! | 0     | nose        | 9     | r-knee      |
//! | 1     | neck        | 10    | r-ankle     |
//! | 2     | r-shoulder  | 11    | l-hip       |
//! | 3     | r-elbow     | 12    | l-knee      |
//! | 4     | r-wrist     | 13    | l-ankle     |
//! | 5     | l-shoulder  | 14/15 | r/l-eye     |
//! | 6     | l-elbow     | 16/17 | r/l-ear     |
//! | 7     | l-wrist     |       |             |
//! | 8     | r-hip       |       |             |
//!
//! Image coordinates: x grows rightward, y grows downward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 18;

/// Default confidence below which a keypoint is treated as missing.
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.3;

/// Minimum bounding-box height in pixels.
pub const EPSILON_H: f64 = 1.0;

pub mod kp {
    pub const NOSE: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
    pub const R_EYE: usize = 14;
    pub const L_EYE: usize = 15;
    pub const R_EAR: usize = 16;
    pub const L_EAR: usize = 17;
}

/// Right/left index pairs exchanged by a horizontal flip.
pub const MIRROR_PAIRS: [(usize, usize); 8] = [
    (2, 5),
    (3, 6),
    (4, 7),
    (8, 11),
    (9, 12),
    (10, 13),
    (14, 15),
    (16, 17),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionState {
    Walking,
    Standing,
}

impl MotionState {
    pub fn as_str(self) -> &'static str {
        match self {
            MotionState::Walking => "walking",
            MotionState::Standing => "standing",
        }
    }

    /// Class index used by the classifier head (0 = walking, 1 = standing).
    pub fn class_index(self) -> usize {
        match self {
            MotionState::Walking => 0,
            MotionState::Standing => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub const fn new(x: f64, y: f64, confidence: f64) -> Self {
        Keypoint { x, y, confidence }
    }

    #[inline]
    pub fn is_valid(&self, conf_threshold: f64) -> bool {
        self.confidence >= conf_threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub keypoints: [Keypoint; NUM_KEYPOINTS],
    pub frame_index: u64,
}

impl Pose {
    pub fn new(keypoints: [Keypoint; NUM_KEYPOINTS], frame_index: u64) -> Self {
        Pose {
            keypoints,
            frame_index,
        }
    }

    #[inline]
    pub fn point(&self, index: usize) -> (f64, f64) {
        let k = &self.keypoints[index];
        (k.x, k.y)
    }

    pub fn valid_count(&self, conf_threshold: f64) -> usize {
        self.keypoints
            .iter()
            .filter(|k| k.is_valid(conf_threshold))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center_x(&self) -> f64 {
        0.5 * (self.x_min + self.x_max)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: String,
    pub poses: Vec<Pose>,
    /// Per-frame labels, `None` where the state is unknown. Same length as `poses`.
    pub labels: Vec<Option<MotionState>>,
    pub fps: f64,
}

impl Track {
    /// Builds a track, checking ordering and label alignment.
    pub fn new(
        track_id: impl Into<String>,
        poses: Vec<Pose>,
        labels: Vec<Option<MotionState>>,
        fps: f64,
    ) -> Result<Self> {
        let track = Track {
            track_id: track_id.into(),
            poses,
            labels,
            fps,
        };
        track.validate()?;
        Ok(track)
    }

    pub fn unlabeled(track_id: impl Into<String>, poses: Vec<Pose>, fps: f64) -> Result<Self> {
        let n = poses.len();
        Self::new(track_id, poses, vec![None; n], fps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.poses.len() {
            return Err(Error::LengthMismatch {
                left: self.poses.len(),
                right: self.labels.len(),
            });
        }
        for pair in self.poses.windows(2) {
            if pair[1].frame_index <= pair[0].frame_index {
                return Err(Error::InvalidConfig(format!(
                    "track {}: frame indices not strictly increasing ({} then {})",
                    self.track_id, pair[0].frame_index, pair[1].frame_index
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Contiguous sub-track `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Track {
        Track {
            track_id: self.track_id.clone(),
            poses: self.poses[start..start + len].to_vec(),
            labels: self.labels[start..start + len].to_vec(),
            fps: self.fps,
        }
    }
}

/// Axis-aligned extent of all keypoints with confidence at or above `conf_threshold`.
pub fn bbox_from_pose(pose: &Pose, conf_threshold: f64) -> Result<BBox> {
    let mut valid = pose.keypoints.iter().filter(|k| k.is_valid(conf_threshold));
    let first = valid
        .next()
        .ok_or_else(|| Error::DegeneratePose("no valid keypoints".into()))?;
    let mut bbox = BBox {
        x_min: first.x,
        y_min: first.y,
        x_max: first.x,
        y_max: first.y,
    };
    let mut count = 1;
    for k in valid {
        bbox.x_min = bbox.x_min.min(k.x);
        bbox.y_min = bbox.y_min.min(k.y);
        bbox.x_max = bbox.x_max.max(k.x);
        bbox.y_max = bbox.y_max.max(k.y);
        count += 1;
    }
    if count < 2 {
        return Err(Error::DegeneratePose(format!(
            "frame {}: only one valid keypoint",
            pose.frame_index
        )));
    }
    // negated comparison also rejects NaN extents
    if !(bbox.height() >= EPSILON_H) {
        return Err(Error::DegeneratePose(format!(
            "frame {}: bbox height {} below {EPSILON_H} px",
            pose.frame_index,
            bbox.height()
        )));
    }
    Ok(bbox)
}

/// Reflects the pose about the vertical line `x = axis_x` and swaps left/right joints.
pub fn mirror_pose(pose: &Pose, axis_x: f64) -> Pose {
    let twice = 2.0 * axis_x;
    let mut keypoints = pose.keypoints;
    for k in keypoints.iter_mut() {
        k.x = twice - k.x;
    }
    for &(r, l) in MIRROR_PAIRS.iter() {
        keypoints.swap(r, l);
    }
    Pose {
        keypoints,
        frame_index: pose.frame_index,
    }
}

/// Counts produced by [`impute_track_with_report`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ImputeReport {
    /// Keypoints filled from an earlier observation.
    pub imputed: usize,
    /// Keypoints left invalid because nothing had been observed yet.
    pub unrecoverable: usize,
}

pub fn impute_track(track: &Track, conf_threshold: f64) -> Track {
    impute_track_with_report(track, conf_threshold).0
}

/// Carry-forward imputation of missing keypoints.
///
/// An invalid keypoint takes the position of the most recent valid observation of
/// the same joint, with its confidence set to `conf_threshold`. Joints that were
/// never observed keep their original (sub-threshold) confidence.
pub fn impute_track_with_report(track: &Track, conf_threshold: f64) -> (Track, ImputeReport) {
    let mut last: [Option<(f64, f64)>; NUM_KEYPOINTS] = [None; NUM_KEYPOINTS];
    let mut report = ImputeReport::default();
    let poses = track
        .poses
        .iter()
        .map(|pose| {
            let mut out = pose.clone();
            impute_pose_in_place(&mut out, &mut last, conf_threshold, &mut report);
            out
        })
        .collect();
    (
        Track {
            track_id: track.track_id.clone(),
            poses,
            labels: track.labels.clone(),
            fps: track.fps,
        },
        report,
    )
}

/// One causal imputation step; `last` carries the most recent valid position per joint.
pub(crate) fn impute_pose_in_place(
    pose: &mut Pose,
    last: &mut [Option<(f64, f64)>; NUM_KEYPOINTS],
    conf_threshold: f64,
    report: &mut ImputeReport,
) {
    for (k, slot) in pose.keypoints.iter_mut().zip(last.iter_mut()) {
        if k.is_valid(conf_threshold) {
            *slot = Some((k.x, k.y));
        } else if let Some((x, y)) = *slot {
            *k = Keypoint::new(x, y, conf_threshold);
            report.imputed += 1;
        } else {
            report.unrecoverable += 1;
        }
    }
}
