//! Helpers shared by the integration tests: random poses and tracks, and a
//! brute-force feature extractor written directly from the feature definitions
//! without reusing any library code beyond the data types.

#![allow(dead_code)]

use std::f64::consts::PI;

use micromotion::features::FeatureFrame;
use micromotion::skeleton::{Keypoint, MotionState, Pose, Track};
use rand::Rng;

pub const THRESHOLD: f64 = 0.3;

/// Rough standing-person layout (neck at origin, y down) used to seed random poses.
const LAYOUT: [(f64, f64); 18] = [
    (0.0, -0.35),
    (0.0, 0.0),
    (-0.15, 0.02),
    (-0.2, 0.38),
    (-0.22, 0.72),
    (0.15, 0.02),
    (0.2, 0.38),
    (0.22, 0.72),
    (-0.12, 1.0),
    (-0.1, 1.5),
    (-0.1, 2.0),
    (0.12, 1.0),
    (0.1, 1.5),
    (0.1, 2.0),
    (-0.04, -0.42),
    (0.04, -0.42),
    (-0.09, -0.38),
    (0.09, -0.38),
];

/// A plausible fully-confident pose: layout scaled by 40..200 px, each joint moved
/// by up to 0.3 of the scale, placed somewhere in a 1280x720 frame. Hips move less in
/// x so the hip width stays above 8 px, clear of the fallback floor even at half scale.
pub fn random_pose<R: Rng>(rng: &mut R, frame_index: u64) -> Pose {
    let scale = rng.random_range(40.0..200.0);
    let (ox, oy) = (rng.random_range(100.0..1180.0), rng.random_range(50.0..300.0));
    let mut kps = [Keypoint::default(); 18];
    for (i, (k, &(x, y))) in kps.iter_mut().zip(LAYOUT.iter()).enumerate() {
        let spread = if i == 8 || i == 11 { 0.02 } else { 0.3 };
        let jx = rng.random_range(-spread..spread);
        let jy = rng.random_range(-0.3..0.3);
        *k = Keypoint::new(ox + (x + jx) * scale, oy + (y + jy) * scale, rng.random_range(0.5..1.0));
    }
    Pose::new(kps, frame_index)
}

/// Random track with occlusions, coincident joints, collapsed hips, unusable frames
/// and gaps in frame numbering.
pub fn random_messy_track<R: Rng>(rng: &mut R, id: &str) -> Track {
    let len = rng.random_range(1..40);
    let mut frame = rng.random_range(0..5u64);
    let mut base = random_pose(rng, 0);
    let mut poses = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len);
    for _ in 0..len {
        let mut pose = base.clone();
        pose.frame_index = frame;
        for k in pose.keypoints.iter_mut() {
            k.x += rng.random_range(-6.0..6.0);
            k.y += rng.random_range(-6.0..6.0);
            if rng.random::<f64>() < 0.12 {
                k.confidence = rng.random_range(0.0..0.3);
            }
        }
        match rng.random_range(0..12) {
            0 => {
                // every keypoint occluded
                for k in pose.keypoints.iter_mut() {
                    k.confidence = 0.05;
                }
            }
            1 => pose.keypoints[4] = pose.keypoints[3],
            2 => pose.keypoints[11] = Keypoint::new(pose.keypoints[8].x + 0.5, pose.keypoints[8].y, 0.9),
            3 => {
                // flat pose: zero height
                for k in pose.keypoints.iter_mut() {
                    k.y = 100.0;
                }
            }
            _ => {}
        }
        poses.push(pose);
        labels.push(match rng.random_range(0..3) {
            0 => Some(MotionState::Walking),
            1 => Some(MotionState::Standing),
            _ => None,
        });
        frame += rng.random_range(1..3);
        if rng.random::<f64>() < 0.1 {
            base = random_pose(rng, 0);
        }
    }
    Track::new(id, poses, labels, 30.0).expect("valid track")
}

/// Brute-force reference output for one retained frame.
#[derive(Debug, Clone)]
pub struct OracleFrame {
    pub source: usize,
    pub frame_index: u64,
    /// position 16 | distance static 12 | distance dynamic 12 | angle static 16 | angle dynamic 16
    pub values: Vec<f64>,
    /// position, distance, angle static, angle dynamic
    pub mask: [bool; 4],
}

fn angle_of(dx: f64, dy: f64) -> f64 {
    let a = dy.atan2(dx);
    if a == -PI {
        PI
    } else {
        a
    }
}

fn wrap(d: f64) -> f64 {
    let mut d = d;
    while d > PI {
        d -= 2.0 * PI;
    }
    while d <= -PI {
        d += 2.0 * PI;
    }
    d
}

struct Static {
    values: Vec<f64>, // 16 position, 12 distance, 16 angle
    ok: Vec<bool>,
}

fn oracle_static(p: &[(f64, f64, f64); 18], thr: f64) -> Option<Static> {
    let ok = |i: usize| p[i].2 >= thr;
    let valid: Vec<usize> = (0..18).filter(|&i| ok(i)).collect();
    if valid.len() < 2 {
        return None;
    }
    let ys: Vec<f64> = valid.iter().map(|&i| p[i].1).collect();
    let top = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let bottom = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let height = bottom - top;
    if !(height >= 1.0) {
        return None;
    }
    let mut values = vec![0.0; 44];
    let mut okv = vec![false; 44];

    // position: elbows, wrists, knees, ankles relative to the neck
    for (n, j) in [3usize, 4, 6, 7, 9, 10, 12, 13].into_iter().enumerate() {
        if ok(1) && ok(j) {
            values[2 * n] = (p[j].0 - p[1].0) / height;
            values[2 * n + 1] = (p[j].1 - p[1].1) / height;
            okv[2 * n] = true;
            okv[2 * n + 1] = true;
        }
    }

    // distances: ankles, knees, wrists, elbows
    let mut hip = 0.0;
    if ok(8) && ok(11) {
        hip = ((p[8].0 - p[11].0).powi(2) + (p[8].1 - p[11].1).powi(2)).sqrt();
    }
    if hip < 2.0 {
        hip = 0.25 * height;
    }
    for (n, (a, b)) in [(10usize, 13usize), (9, 12), (4, 7), (3, 6)].into_iter().enumerate() {
        if ok(a) && ok(b) {
            let dx = p[b].0 - p[a].0;
            let dy = p[b].1 - p[a].1;
            values[16 + 3 * n] = (dx * dx + dy * dy).sqrt() / hip;
            values[16 + 3 * n + 1] = dx.abs() / height;
            values[16 + 3 * n + 2] = dy.abs() / height;
            for m in 0..3 {
                okv[16 + 3 * n + m] = true;
            }
        }
    }

    // angles
    let seg = |a: usize, b: usize| -> Option<f64> {
        if !(ok(a) && ok(b)) {
            return None;
        }
        let dx = p[b].0 - p[a].0;
        let dy = p[b].1 - p[a].1;
        if dx == 0.0 && dy == 0.0 {
            None
        } else {
            Some(angle_of(dx, dy))
        }
    };
    let r_upper = seg(2, 3);
    let r_fore = seg(3, 4);
    let l_upper = seg(5, 6);
    let l_fore = seg(6, 7);
    let r_thigh = seg(8, 9);
    let r_shank = seg(9, 10);
    let l_thigh = seg(11, 12);
    let l_shank = seg(12, 13);
    let segments = [r_upper, r_fore, l_upper, l_fore, r_thigh, r_shank, l_thigh, l_shank];
    for (n, s) in segments.iter().enumerate() {
        if let Some(a) = s {
            values[28 + n] = a / PI;
            okv[28 + n] = true;
        }
    }
    let pairs = [(r_upper, l_upper), (r_fore, l_fore), (r_thigh, l_thigh), (r_shank, l_shank)];
    for (n, (r, l)) in pairs.iter().enumerate() {
        if let (Some(r), Some(l)) = (r, l) {
            values[36 + n] = wrap(l - r) / PI;
            okv[36 + n] = true;
        }
    }
    let cross = [seg(4, 6), seg(7, 3), seg(10, 12), seg(13, 9)];
    for (n, c) in cross.iter().enumerate() {
        if let Some(a) = c {
            values[40 + n] = a / PI;
            okv[40 + n] = true;
        }
    }
    Some(Static { values, ok: okv })
}

pub fn oracle_features(track: &Track, thr: f64) -> Vec<OracleFrame> {
    // carry-forward imputation
    let mut last: [Option<(f64, f64)>; 18] = [None; 18];
    let mut raw = Vec::new();
    for pose in &track.poses {
        let mut p = [(0.0, 0.0, 0.0); 18];
        for j in 0..18 {
            let k = pose.keypoints[j];
            if k.confidence >= thr {
                last[j] = Some((k.x, k.y));
                p[j] = (k.x, k.y, k.confidence);
            } else if let Some((x, y)) = last[j] {
                p[j] = (x, y, thr);
            } else {
                p[j] = (k.x, k.y, k.confidence);
            }
        }
        raw.push(p);
    }

    let mut out = Vec::new();
    let mut prev: Option<Static> = None;
    for (i, p) in raw.iter().enumerate() {
        let Some(cur) = oracle_static(p, thr) else {
            continue;
        };
        let mut values = Vec::with_capacity(72);
        values.extend_from_slice(&cur.values[0..16]);
        values.extend_from_slice(&cur.values[16..28]);
        let mut dist_dyn = vec![0.0; 12];
        let mut ang_dyn = vec![0.0; 16];
        let mut dist_dyn_ok = true;
        let mut ang_dyn_ok = true;
        if let Some(pr) = &prev {
            for n in 0..12 {
                if cur.ok[16 + n] && pr.ok[16 + n] {
                    dist_dyn[n] = cur.values[16 + n] - pr.values[16 + n];
                } else {
                    dist_dyn_ok = false;
                }
            }
            for n in 0..16 {
                if cur.ok[28 + n] && pr.ok[28 + n] {
                    ang_dyn[n] = wrap(PI * cur.values[28 + n] - PI * pr.values[28 + n]) / PI;
                } else {
                    ang_dyn_ok = false;
                }
            }
        }
        values.extend_from_slice(&dist_dyn);
        values.extend_from_slice(&cur.values[28..44]);
        values.extend_from_slice(&ang_dyn);
        let mask = [
            cur.ok[0..16].iter().all(|&b| b),
            cur.ok[16..28].iter().all(|&b| b) && dist_dyn_ok,
            cur.ok[28..44].iter().all(|&b| b),
            ang_dyn_ok,
        ];
        out.push(OracleFrame {
            source: i,
            frame_index: track.poses[i].frame_index,
            values,
            mask,
        });
        prev = Some(cur);
    }
    out
}

pub fn flatten(f: &FeatureFrame) -> Vec<f64> {
    let mut v = Vec::with_capacity(72);
    v.extend_from_slice(&f.position);
    v.extend_from_slice(&f.distance);
    v.extend_from_slice(&f.angle_static);
    v.extend_from_slice(&f.angle_dynamic);
    v
}

/// Largest elementwise difference between the library and the oracle over a track, or
/// a description of the first structural mismatch.
pub fn compare_with_oracle(track: &Track, thr: f64) -> Result<f64, String> {
    let lib = micromotion::features::extract_track_features(track, thr);
    let oracle = oracle_features(track, thr);
    if lib.len() != oracle.len() {
        return Err(format!("{}: {} frames vs oracle {}", track.track_id, lib.len(), oracle.len()));
    }
    let mut worst: f64 = 0.0;
    for (a, b) in lib.iter().zip(&oracle) {
        if a.source != b.source || a.frame_index != b.frame_index {
            return Err(format!("{}: frame alignment differs at source {}", track.track_id, b.source));
        }
        let m = a.valid_mask;
        if [m.position, m.distance, m.angle_static, m.angle_dynamic] != b.mask {
            return Err(format!("{}: mask differs at source {}", track.track_id, b.source));
        }
        for (x, y) in flatten(a).iter().zip(&b.values) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

/// Features of the mirrored pose predicted from the original's features.
///
/// Position: x negated, right/left joint entries swapped. Distances: unchanged.
/// Segment angles: theta -> wrap(pi - theta) with right/left swapped. Pair differences:
/// unchanged. Cross directions: right/left counterparts swapped with theta -> pi - theta.
/// Dynamic angle entries follow by differencing: segment and cross deltas negate and
/// swap, pair deltas stay.
pub fn mirror_expected(f: &FeatureFrame) -> Vec<f64> {
    let mut v = vec![0.0; 72];
    // position: slots r-elb, r-wri, l-elb, l-wri, r-knee, r-ank, l-knee, l-ank
    let swap_slot = [2usize, 3, 0, 1, 6, 7, 4, 5];
    for s in 0..8 {
        let from = swap_slot[s];
        v[2 * s] = -f.position[2 * from];
        v[2 * s + 1] = f.position[2 * from + 1];
    }
    v[16..40].copy_from_slice(&f.distance);
    let reflect = |a: f64| wrap(PI - a * PI) / PI;
    // segments: r-upper, r-fore, l-upper, l-fore, r-thigh, r-shank, l-thigh, l-shank
    let seg_swap = [2usize, 3, 0, 1, 6, 7, 4, 5];
    for s in 0..8 {
        v[40 + s] = reflect(f.angle_static[seg_swap[s]]);
        v[56 + s] = -f.angle_dynamic[seg_swap[s]];
    }
    v[48..52].copy_from_slice(&f.angle_static[8..12]);
    v[64..68].copy_from_slice(&f.angle_dynamic[8..12]);
    // cross: (4->6) <-> (7->3), (10->12) <-> (13->9)
    let cross_swap = [13usize, 12, 15, 14];
    for s in 12..16 {
        v[40 + s] = reflect(f.angle_static[cross_swap[s - 12]]);
        v[56 + s] = -f.angle_dynamic[cross_swap[s - 12]];
    }
    v
}

/// Difference on the circle of normalized angles (period 2), so that values at the
/// +-1 seam compare as equal.
pub fn angle_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0);
    d.min(2.0 - d)
}

/// Largest difference between two flattened frames; angle blocks compare on the circle.
pub fn frame_gap(a: &[f64], b: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..72 {
        let d = if (40..72).contains(&i) {
            angle_gap(a[i], b[i])
        } else {
            (a[i] - b[i]).abs()
        };
        worst = worst.max(d);
    }
    worst
}

pub fn transform_pose(p: &Pose, f: impl Fn(f64, f64) -> (f64, f64)) -> Pose {
    let mut q = p.clone();
    for k in q.keypoints.iter_mut() {
        let (x, y) = f(k.x, k.y);
        k.x = x;
        k.y = y;
    }
    q
}

pub fn two_frame_track(a: Pose, b: Pose) -> Track {
    let mut b = b;
    b.frame_index = a.frame_index + 1;
    Track::unlabeled("pair", vec![a, b], 30.0).expect("valid track")
}
