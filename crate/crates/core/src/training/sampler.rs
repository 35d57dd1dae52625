//! Mini-batch construction: random crops, flip augmentation and class balancing.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::features::extract_track_features;
use crate::network::Sequence;
use crate::skeleton::{bbox_from_pose, mirror_pose, BBox, MotionState, Track};

#[derive(Debug, Clone)]
pub struct Batch {
    pub sequences: Vec<Sequence>,
    /// Where each sequence came from.
    pub crops: Vec<Crop>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Crop {
    pub track: usize,
    pub start: usize,
    pub len: usize,
    pub flipped: bool,
}

impl Batch {
    /// Supervised (walking, standing) frame counts.
    pub fn class_frames(&self) -> (usize, usize) {
        let mut counts = (0, 0);
        for label in self.sequences.iter().flat_map(|s| &s.labels) {
            match label {
                Some(MotionState::Walking) => counts.0 += 1,
                Some(MotionState::Standing) => counts.1 += 1,
                None => {}
            }
        }
        counts
    }
}

/// Draws batches from a fixed set of tracks.
///
/// Balancing works on labels: at the start of every epoch each frame of the
/// over-represented class is kept for supervision with probability
/// `minority / majority`, so both classes contribute equal expected frame counts.
/// Dropped frames still feed the recurrence but carry no loss.
pub struct Sampler<'a> {
    tracks: &'a [Track],
    config: TrainConfig,
    eligible: Vec<usize>,
    weights: WeightedIndex<usize>,
    keep_prob: [f64; 2],
    class_frames: [usize; 2],
    keep: Vec<Vec<bool>>,
}

impl<'a> Sampler<'a> {
    pub fn new(tracks: &'a [Track], config: &TrainConfig) -> Result<Self> {
        let eligible: Vec<usize> = (0..tracks.len())
            .filter(|&i| tracks[i].len() >= config.seq_len_min)
            .collect();
        if eligible.is_empty() {
            return Err(Error::InsufficientData(format!(
                "no track has at least {} frames",
                config.seq_len_min
            )));
        }
        let mut class_frames = [0usize; 2];
        for &i in &eligible {
            for label in tracks[i].labels.iter().flatten() {
                class_frames[label.class_index()] += 1;
            }
        }
        if class_frames[0] == 0 || class_frames[1] == 0 {
            return Err(Error::InsufficientData(format!(
                "training data needs both classes (walking {}, standing {})",
                class_frames[0], class_frames[1]
            )));
        }
        let minority = class_frames[0].min(class_frames[1]) as f64;
        let keep_prob = [
            minority / class_frames[0] as f64,
            minority / class_frames[1] as f64,
        ];
        let weights = WeightedIndex::new(eligible.iter().map(|&i| tracks[i].len()))
            .map_err(|e| Error::InsufficientData(e.to_string()))?;
        Ok(Sampler {
            tracks,
            config: config.clone(),
            keep: eligible.iter().map(|&i| vec![true; tracks[i].len()]).collect(),
            eligible,
            weights,
            keep_prob,
            class_frames,
        })
    }

    /// Labeled (walking, standing) frames over eligible tracks.
    pub fn class_frames(&self) -> (usize, usize) {
        (self.class_frames[0], self.class_frames[1])
    }

    /// Optimizer steps per epoch: balanced frames over the expected frames per batch.
    pub fn updates_per_epoch(&self) -> usize {
        let balanced = 2 * self.class_frames[0].min(self.class_frames[1]);
        let mean_len = 0.5 * (self.config.seq_len_min + self.config.seq_len_max) as f64;
        let per_batch = self.config.batch_size as f64 * mean_len;
        ((balanced as f64 / per_batch).ceil() as usize).max(1)
    }

    /// Redraws which over-represented frames are supervised this epoch.
    pub fn begin_epoch<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for (slot, &ti) in self.eligible.iter().enumerate() {
            for (keep, label) in self.keep[slot].iter_mut().zip(&self.tracks[ti].labels) {
                *keep = match label {
                    Some(state) => {
                        let p = self.keep_prob[state.class_index()];
                        p >= 1.0 || rng.random::<f64>() < p
                    }
                    None => true,
                };
            }
        }
    }

    pub fn sample_crop<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, Crop) {
        let slot = self.weights.sample(rng);
        let track = &self.tracks[self.eligible[slot]];
        let want = rng.random_range(self.config.seq_len_min..=self.config.seq_len_max);
        let len = want.min(track.len());
        let start = rng.random_range(0..=track.len() - len);
        let flipped = self.config.flip_prob > 0.0 && rng.random::<f64>() < self.config.flip_prob;
        (
            slot,
            Crop {
                track: self.eligible[slot],
                start,
                len,
                flipped,
            },
        )
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R) -> Batch {
        let crops: Vec<(usize, Crop)> = (0..self.config.batch_size).map(|_| self.sample_crop(rng)).collect();
        let sequences = crops.iter().map(|&(slot, crop)| self.materialize(slot, crop)).collect();
        Batch {
            sequences,
            crops: crops.into_iter().map(|(_, c)| c).collect(),
        }
    }

    fn materialize(&self, slot: usize, crop: Crop) -> Sequence {
        let mut sub = self.tracks[crop.track].slice(crop.start, crop.len);
        for (label, &keep) in sub
            .labels
            .iter_mut()
            .zip(&self.keep[slot][crop.start..crop.start + crop.len])
        {
            if !keep {
                *label = None;
            }
        }
        if crop.flipped {
            sub = flip_track(&sub, self.config.conf_threshold);
        }
        let frames = extract_track_features(&sub, self.config.conf_threshold);
        Sequence::from_frames(&frames, &sub.labels, self.config.features)
    }
}

/// Mirrors every pose about the x-center of the track's overall bounding box.
pub fn flip_track(track: &Track, conf_threshold: f64) -> Track {
    let extent = track
        .poses
        .iter()
        .filter_map(|p| bbox_from_pose(p, conf_threshold).ok())
        .reduce(|a: BBox, b| a.union(&b));
    let axis = extent.map(|b| b.center_x()).unwrap_or(0.0);
    Track {
        track_id: track.track_id.clone(),
        poses: track.poses.iter().map(|p| mirror_pose(p, axis)).collect(),
        labels: track.labels.clone(),
        fps: track.fps,
    }
}
