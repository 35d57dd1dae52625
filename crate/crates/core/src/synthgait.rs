//! Kinematic walking/standing generator with exact per-frame labels.
//!
//! Bodies are built from a fixed rest pose scaled by `body_scale` (the neck-to-hip
//! length in pixels). While walking, ankles swing sinusoidally in x in antiphase,
//! knees follow at half amplitude, wrists swing against the ipsilateral ankle and
//! the body drifts in the walking direction. Standing frames hold the rest pose.
//! Gaussian jitter is added to every coordinate of every frame.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::skeleton::{kp, Keypoint, MotionState, Pose, Track, NUM_KEYPOINTS};

pub const DEFAULT_FPS: f64 = 30.0;

/// Rest pose relative to the neck in units of `body_scale`, image y pointing down.
/// Right-side joints sit at negative x.
const REST: [(f64, f64); NUM_KEYPOINTS] = [
    (0.0, -0.35),   // nose
    (0.0, 0.0),     // neck
    (-0.15, 0.02),  // right shoulder
    (-0.17, 0.38),  // right elbow
    (-0.18, 0.72),  // right wrist
    (-0.15, 1.0),   // right hip
    (-0.07, 1.5),   // right knee
    (0.0, 2.0),     // right ankle
    (0.15, 0.02),   // left shoulder
    (0.17, 0.38),   // left elbow
    (0.18, 0.72),   // left wrist
    (0.15, 1.0),    // left hip
    (0.07, 1.5),    // left knee
    (0.0, 2.0),     // left ankle
    (-0.04, -0.42), // right eye
    (0.04, -0.42),  // left eye
    (-0.09, -0.38), // right ear
    (0.09, -0.38),  // left ear
];

/// Table rows above follow limb order; this maps them onto keypoint indices.
const REST_SLOTS: [usize; NUM_KEYPOINTS] = [
    kp::NOSE,
    kp::NECK,
    kp::R_SHOULDER,
    kp::R_ELBOW,
    kp::R_WRIST,
    kp::R_HIP,
    kp::R_KNEE,
    kp::R_ANKLE,
    kp::L_SHOULDER,
    kp::L_ELBOW,
    kp::L_WRIST,
    kp::L_HIP,
    kp::L_KNEE,
    kp::L_ANKLE,
    kp::R_EYE,
    kp::L_EYE,
    kp::R_EAR,
    kp::L_EAR,
];

/// Hip-to-ankle length in units of `body_scale`.
const LEG_LENGTH: f64 = 1.0;
/// Peak foot lift during swing, relative to the swing amplitude.
const LIFT_RATIO: f64 = 0.3;
/// Frames over which the gait amplitude ramps at a standing/walking boundary.
pub const RAMP_FRAMES: usize = 3;
const CONFIDENCE_RANGE: (f64, f64) = (0.5, 1.0);

#[derive(Debug, Clone, PartialEq)]
pub struct GaitConfig {
    pub fps: f64,
    /// Steps per second (two steps per stride).
    pub cadence: f64,
    /// Peak ankle displacement as a fraction of leg length.
    pub swing_amplitude: f64,
    /// Peak wrist displacement as a fraction of the ankle displacement.
    pub arm_amplitude: f64,
    pub jitter_sigma: f64,
    /// Neck-to-hip length in pixels.
    pub body_scale: f64,
    pub schedule: Vec<(MotionState, usize)>,
    /// Neck position of the first frame.
    pub origin: (f64, f64),
    /// +1 walks toward increasing x, -1 toward decreasing x.
    pub direction: f64,
}

impl Default for GaitConfig {
    fn default() -> Self {
        GaitConfig {
            fps: DEFAULT_FPS,
            cadence: 2.0,
            swing_amplitude: 0.35,
            arm_amplitude: 0.7,
            jitter_sigma: 0.5,
            body_scale: 100.0,
            schedule: vec![(MotionState::Standing, 60), (MotionState::Walking, 90), (MotionState::Standing, 60)],
            origin: (640.0, 200.0),
            direction: 1.0,
        }
    }
}

impl GaitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if !(self.cadence >= 0.0 && self.swing_amplitude >= 0.0 && self.arm_amplitude >= 0.0) {
            return bad("cadence and amplitudes must be non-negative");
        }
        if !(self.jitter_sigma >= 0.0) || !(self.body_scale > 0.0) {
            return bad("jitter_sigma must be non-negative and body_scale positive");
        }
        if self.schedule.iter().any(|&(_, d)| d == 0) {
            return bad("schedule durations must be at least 1");
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.schedule.iter().map(|&(_, d)| d).sum()
    }

    /// Frame indices where a new schedule segment with a different state begins.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut start = 0;
        for (i, &(state, d)) in self.schedule.iter().enumerate() {
            if i > 0 && self.schedule[i - 1].0 != state {
                out.push(start);
            }
            start += d;
        }
        out
    }
}

/// Amplitude multiplier for frame `k` of an `n`-frame walking segment.
fn ramp(k: usize, n: usize, ramp_in: bool, ramp_out: bool) -> f64 {
    let mut r: f64 = 1.0;
    if ramp_in {
        r = r.min((k + 1) as f64 / RAMP_FRAMES as f64);
    }
    if ramp_out {
        r = r.min((n - k) as f64 / RAMP_FRAMES as f64);
    }
    r
}

/// Noise-free pose offsets (relative to the neck) for gait phase `phi` at amplitude `r`.
fn body_offsets(config: &GaitConfig, phi: f64, r: f64) -> [(f64, f64); NUM_KEYPOINTS] {
    let l = config.body_scale;
    let mut out = [(0.0, 0.0); NUM_KEYPOINTS];
    for (slot, &(x, y)) in REST_SLOTS.iter().zip(REST.iter()) {
        out[*slot] = (x * l, y * l);
    }
    out[kp::NOSE].0 += 0.05 * l * config.direction;
    if r == 0.0 {
        return out;
    }
    let a = config.swing_amplitude * LEG_LENGTH * l * r;
    let swing = config.direction * a * phi.sin();
    let lift = LIFT_RATIO * a;
    let right_lift = lift * phi.cos().max(0.0);
    let left_lift = lift * (-phi.cos()).max(0.0);

    out[kp::R_ANKLE].0 += swing;
    out[kp::L_ANKLE].0 -= swing;
    out[kp::R_KNEE].0 += 0.5 * swing;
    out[kp::L_KNEE].0 -= 0.5 * swing;
    out[kp::R_ANKLE].1 -= right_lift;
    out[kp::L_ANKLE].1 -= left_lift;
    out[kp::R_KNEE].1 -= 0.5 * right_lift;
    out[kp::L_KNEE].1 -= 0.5 * left_lift;

    let arm = config.arm_amplitude * swing;
    out[kp::R_WRIST].0 -= arm;
    out[kp::L_WRIST].0 += arm;
    out[kp::R_ELBOW].0 -= 0.5 * arm;
    out[kp::L_ELBOW].0 += 0.5 * arm;
    out
}

/// Builds a labeled track following `config.schedule`. Deterministic per seed.
pub fn generate_track(config: &GaitConfig, seed: u64) -> Result<Track> {
    generate_track_with_id(config, seed, format!("synth-{seed}"))
}

pub fn generate_track_with_id(config: &GaitConfig, seed: u64, track_id: String) -> Result<Track> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, config.jitter_sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    // phase advance per frame: one stride (two steps) per 2*pi
    let dphi = std::f64::consts::PI * config.cadence / config.fps;
    let speed = 2.0 * config.swing_amplitude * LEG_LENGTH * config.body_scale * config.cadence / config.fps;

    let mut poses = Vec::with_capacity(config.frames());
    let mut labels = Vec::with_capacity(config.frames());
    let (mut neck_x, neck_y) = config.origin;
    for (si, &(state, n)) in config.schedule.iter().enumerate() {
        let after_standing = si > 0 && config.schedule[si - 1].0 == MotionState::Standing;
        let before_standing = config
            .schedule
            .get(si + 1)
            .is_some_and(|&(s, _)| s == MotionState::Standing);
        for k in 0..n {
            let (phi, r) = match state {
                MotionState::Walking => (dphi * k as f64, ramp(k, n, after_standing, before_standing)),
                MotionState::Standing => (0.0, 0.0),
            };
            neck_x += config.direction * speed * r;
            let offsets = body_offsets(config, phi, r);
            let mut keypoints = [Keypoint::default(); NUM_KEYPOINTS];
            for (kpt, &(dx, dy)) in keypoints.iter_mut().zip(offsets.iter()) {
                let (jx, jy) = if config.jitter_sigma > 0.0 {
                    (jitter.sample(&mut rng), jitter.sample(&mut rng))
                } else {
                    (0.0, 0.0)
                };
                let conf = rng.random_range(CONFIDENCE_RANGE.0..=CONFIDENCE_RANGE.1);
                *kpt = Keypoint::new(neck_x + dx + jx, neck_y + dy + jy, conf);
            }
            poses.push(Pose::new(keypoints, poses.len() as u64));
            labels.push(Some(state));
        }
    }
    Track::new(track_id, poses, labels, config.fps)
}

/// Sampling ranges (inclusive) for randomized dataset generation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaitRanges {
    pub body_scale: (f64, f64),
    pub jitter_sigma: (f64, f64),
    pub swing_amplitude: (f64, f64),
    pub arm_amplitude: (f64, f64),
    pub cadence: (f64, f64),
    /// Segment durations in frames before the mix scaling.
    pub segment_frames: (usize, usize),
    pub track_frames: (usize, usize),
    pub fps: f64,
}

impl Default for GaitRanges {
    fn default() -> Self {
        GaitRanges {
            body_scale: (60.0, 160.0),
            jitter_sigma: (0.3, 1.5),
            swing_amplitude: (0.25, 0.45),
            arm_amplitude: (0.5, 1.0),
            cadence: (1.6, 2.4),
            segment_frames: (45, 150),
            track_frames: (240, 420),
            fps: DEFAULT_FPS,
        }
    }
}

impl GaitRanges {
    pub const KEYS: [&'static str; 15] = [
        "body_scale_min",
        "body_scale_max",
        "jitter_sigma_min",
        "jitter_sigma_max",
        "swing_amplitude_min",
        "swing_amplitude_max",
        "arm_amplitude_min",
        "arm_amplitude_max",
        "cadence_min",
        "cadence_max",
        "segment_frames_min",
        "segment_frames_max",
        "track_frames_min",
        "track_frames_max",
        "fps",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "body_scale_min" => self.body_scale.0 = num(key, value)?,
            "body_scale_max" => self.body_scale.1 = num(key, value)?,
            "jitter_sigma_min" => self.jitter_sigma.0 = num(key, value)?,
            "jitter_sigma_max" => self.jitter_sigma.1 = num(key, value)?,
            "swing_amplitude_min" => self.swing_amplitude.0 = num(key, value)?,
            "swing_amplitude_max" => self.swing_amplitude.1 = num(key, value)?,
            "arm_amplitude_min" => self.arm_amplitude.0 = num(key, value)?,
            "arm_amplitude_max" => self.arm_amplitude.1 = num(key, value)?,
            "cadence_min" => self.cadence.0 = num(key, value)?,
            "cadence_max" => self.cadence.1 = num(key, value)?,
            "segment_frames_min" => self.segment_frames.0 = num(key, value)?,
            "segment_frames_max" => self.segment_frames.1 = num(key, value)?,
            "track_frames_min" => self.track_frames.0 = num(key, value)?,
            "track_frames_max" => self.track_frames.1 = num(key, value)?,
            "fps" => self.fps = num(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo <= hi && lo >= 0.0;
        if !(ordered(self.body_scale) && self.body_scale.0 > 0.0)
            || !ordered(self.jitter_sigma)
            || !ordered(self.swing_amplitude)
            || !ordered(self.arm_amplitude)
            || !ordered(self.cadence)
        {
            return Err(Error::InvalidConfig("gait ranges must be non-negative with min <= max".into()));
        }
        if self.segment_frames.0 == 0
            || self.segment_frames.0 > self.segment_frames.1
            || self.track_frames.0 == 0
            || self.track_frames.0 > self.track_frames.1
        {
            return Err(Error::InvalidConfig("frame ranges need 1 <= min <= max".into()));
        }
        if !(self.fps > 0.0) {
            return Err(Error::InvalidConfig("fps must be positive".into()));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Alternating schedule of total length `frames`. Walking segments are scaled by
/// `2 * mix` and standing ones by `2 * (1 - mix)`, so walking makes up about `mix`
/// of all frames.
fn random_schedule<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    mix: f64,
    segment: (usize, usize),
) -> Vec<(MotionState, usize)> {
    if mix >= 1.0 {
        return vec![(MotionState::Walking, frames)];
    }
    if mix <= 0.0 {
        return vec![(MotionState::Standing, frames)];
    }
    let mut state = if rng.random::<f64>() < mix {
        MotionState::Walking
    } else {
        MotionState::Standing
    };
    let mut schedule = Vec::new();
    let mut left = frames;
    while left > 0 {
        let base = rng.random_range(segment.0..=segment.1) as f64;
        let scale = match state {
            MotionState::Walking => 2.0 * mix,
            MotionState::Standing => 2.0 * (1.0 - mix),
        };
        let d = ((base * scale).round() as usize).clamp(1, left);
        schedule.push((state, d));
        left -= d;
        state = match state {
            MotionState::Walking => MotionState::Standing,
            MotionState::Standing => MotionState::Walking,
        };
    }
    schedule
}

/// Draws one randomized configuration.
pub fn random_config<R: Rng + ?Sized>(rng: &mut R, mix: f64, ranges: &GaitRanges) -> GaitConfig {
    let frames = rng.random_range(ranges.track_frames.0..=ranges.track_frames.1);
    GaitConfig {
        fps: ranges.fps,
        cadence: uniform(rng, ranges.cadence),
        swing_amplitude: uniform(rng, ranges.swing_amplitude),
        arm_amplitude: uniform(rng, ranges.arm_amplitude),
        jitter_sigma: uniform(rng, ranges.jitter_sigma),
        body_scale: uniform(rng, ranges.body_scale),
        schedule: random_schedule(rng, frames, mix, ranges.segment_frames),
        origin: (rng.random_range(200.0..1000.0), rng.random_range(100.0..300.0)),
        direction: if rng.random::<bool>() { 1.0 } else { -1.0 },
    }
}

/// `n_tracks` tracks with randomized bodies, gaits and schedules. Walking makes up
/// roughly `mix` of all frames.
pub fn generate_dataset(n_tracks: usize, mix: f64, seed: u64) -> Result<Vec<Track>> {
    generate_dataset_with(n_tracks, mix, seed, &GaitRanges::default())
}

pub fn generate_dataset_with(n_tracks: usize, mix: f64, seed: u64, ranges: &GaitRanges) -> Result<Vec<Track>> {
    generate_configs(n_tracks, mix, seed, ranges)?
        .into_iter()
        .map(|(id, config, track_seed)| generate_track_with_id(&config, track_seed, id))
        .collect()
}

/// The configurations and per-track seeds behind [`generate_dataset_with`].
pub fn generate_configs(
    n_tracks: usize,
    mix: f64,
    seed: u64,
    ranges: &GaitRanges,
) -> Result<Vec<(String, GaitConfig, u64)>> {
    if n_tracks == 0 {
        return Err(Error::InvalidConfig("n_tracks must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&mix) {
        return Err(Error::InvalidConfig(format!("mix {mix} outside [0, 1]")));
    }
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_tracks)
        .map(|i| {
            let config = random_config(&mut rng, mix, ranges);
            (format!("synth-{i:04}"), config, rng.next_u64())
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::extract_track_features;
    use crate::skeleton::bbox_from_pose;

    #[test]
    fn zero_swing_zero_jitter_is_static() {
        let config = GaitConfig {
            swing_amplitude: 0.0,
            jitter_sigma: 0.0,
            schedule: vec![(MotionState::Walking, 40)],
            ..GaitConfig::default()
        };
        let track = generate_track(&config, 3).unwrap();
        let first: Vec<(f64, f64)> = track.poses[0].keypoints.iter().map(|k| (k.x, k.y)).collect();
        for p in &track.poses {
            let xy: Vec<(f64, f64)> = p.keypoints.iter().map(|k| (k.x, k.y)).collect();
            assert_eq!(xy, first);
        }
        for f in extract_track_features(&track, 0.3) {
            assert!(f.angle_dynamic.iter().all(|&v| v == 0.0));
            assert!(f.distance[12..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_track() {
        let c = GaitConfig::default();
        assert_eq!(generate_track(&c, 9).unwrap(), generate_track(&c, 9).unwrap());
        assert_ne!(generate_track(&c, 9).unwrap(), generate_track(&c, 10).unwrap());
    }

    #[test]
    fn labels_follow_schedule() {
        let c = GaitConfig::default();
        let t = generate_track(&c, 1).unwrap();
        assert_eq!(t.len(), 210);
        assert_eq!(t.labels[59], Some(MotionState::Standing));
        assert_eq!(t.labels[60], Some(MotionState::Walking));
        assert_eq!(t.labels[150], Some(MotionState::Standing));
        assert_eq!(c.boundaries(), vec![60, 150]);
    }

    #[test]
    fn every_pose_has_a_bbox() {
        for track in generate_dataset(20, 0.5, 4).unwrap() {
            for p in &track.poses {
                bbox_from_pose(p, 0.3).unwrap();
            }
        }
    }

    #[test]
    fn dataset_basics() {
        assert_eq!(generate_dataset(1, 0.5, 0).unwrap().len(), 1);
        assert_eq!(generate_dataset(3, 0.5, 7).unwrap(), generate_dataset(3, 0.5, 7).unwrap());
        assert!(generate_dataset(0, 0.5, 7).is_err());
    }

    #[test]
    fn ramp_shape() {
        assert_eq!(ramp(0, 10, true, true), 1.0 / 3.0);
        assert_eq!(ramp(2, 10, true, true), 1.0);
        assert_eq!(ramp(9, 10, true, true), 1.0 / 3.0);
        assert_eq!(ramp(0, 10, false, false), 1.0);
    }
}
