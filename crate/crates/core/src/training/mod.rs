//! Training: exact gradients, Adam with step decay, augmentation and the epoch loop.

mod adam;
mod backprop;
mod gradcheck;
mod sampler;

pub use adam::{adam_update, lr_schedule, OptimizerState, BETA1, BETA2, EPSILON as ADAM_EPSILON};
pub use backprop::{
    backward, backward_with_masks, batch_loss, draw_dropout_masks, forward_batch, l2_penalty, loss,
    BatchForward, DropoutMasks, Gradients, PROB_FLOOR,
};
pub use gradcheck::{
    grad_check, grad_check_against, random_batch, relative_error, tiny_grad_check, GradCheckReport,
    TinyCheck, REL_ERROR_FLOOR,
};
pub use sampler::{flip_track, Batch, Crop, Sampler};

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data_io::split_dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::features::FeatureSelection;
use crate::network::{init_params_from_rng, Arch, ModelParams, BN_MOMENTUM};
use crate::skeleton::{Track, DEFAULT_CONF_THRESHOLD};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub l2_weight: f64,
    pub dropout_rate: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub flip_prob: f64,
    pub clip_norm: f64,
    pub conf_threshold: f64,
    pub features: FeatureSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.0002,
            epochs: 80,
            batch_size: 32,
            decay_factor: 0.9,
            decay_every: 3000,
            l2_weight: 0.0005,
            dropout_rate: 0.5,
            seq_len_min: 30,
            seq_len_max: 64,
            seed: 0,
            val_fraction: 0.1,
            flip_prob: 0.5,
            clip_norm: 5.0,
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            features: FeatureSelection::All,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 15] = [
        "lr0",
        "epochs",
        "batch_size",
        "decay_factor",
        "decay_every",
        "l2_weight",
        "dropout_rate",
        "seq_len_min",
        "seq_len_max",
        "seed",
        "val_fraction",
        "flip_prob",
        "clip_norm",
        "conf_threshold",
        "features",
    ];

    /// Sets one field from its textual form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "lr0" => self.lr0 = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "decay_factor" => self.decay_factor = num(key, value)?,
            "decay_every" => self.decay_every = num(key, value)?,
            "l2_weight" => self.l2_weight = num(key, value)?,
            "dropout_rate" => self.dropout_rate = num(key, value)?,
            "seq_len_min" => self.seq_len_min = num(key, value)?,
            "seq_len_max" => self.seq_len_max = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "val_fraction" => self.val_fraction = num(key, value)?,
            "flip_prob" => self.flip_prob = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "conf_threshold" => self.conf_threshold = num(key, value)?,
            "features" => {
                self.features = FeatureSelection::parse(value.trim())
                    .ok_or_else(|| Error::InvalidConfig(format!("features: unknown selection {value:?}")))?
            }
            other => return Err(Error::InvalidConfig(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr0", self.lr0.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("decay_every", self.decay_every.to_string()),
            ("l2_weight", self.l2_weight.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("seq_len_min", self.seq_len_min.to_string()),
            ("seq_len_max", self.seq_len_max.to_string()),
            ("seed", self.seed.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("flip_prob", self.flip_prob.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("conf_threshold", self.conf_threshold.to_string()),
            ("features", self.features.name().to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return bad("need 0 < seq_len_min <= seq_len_max");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob must be in [0, 1]");
        }
        if !(self.decay_factor > 0.0) || !(self.clip_norm > 0.0) || self.l2_weight < 0.0 {
            return bad("decay_factor and clip_norm must be positive, l2_weight non-negative");
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return bad("conf_threshold must be in [0, 1]");
        }
        Ok(())
    }

    pub fn arch(&self) -> Arch {
        Arch::for_selection(self.features)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(step, self.lr0, self.decay_factor, self.decay_every)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub updates: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub max_grad_norm: f64,
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_params: ModelParams,
    /// Parameters of the epoch with the best validation accuracy (latest on ties);
    /// equal to `final_params` when there is no validation split.
    pub best_params: ModelParams,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    pub train_tracks: usize,
    pub val_tracks: usize,
}

/// A failed run, carrying the last parameters known to be finite when available.
#[derive(Debug)]
pub struct TrainError {
    pub error: Error,
    pub checkpoint: Option<Box<ModelParams>>,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainError {}

impl From<Error> for TrainError {
    fn from(error: Error) -> Self {
        TrainError {
            error,
            checkpoint: None,
        }
    }
}

/// One optimizer step: gradients, clipping, Adam, running batch-norm statistics.
/// Returns the batch loss and pre-clip gradient norm.
pub fn train_step<R: RngCore + ?Sized>(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &Batch,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let masks = draw_dropout_masks(&batch.sequences, &params.arch, config.dropout_rate, rng);
    let (loss, mut grads, fwd) = backward_with_masks(&batch.sequences, params, &masks, config.l2_weight)?;
    let norm = grads.clip_global_norm(config.clip_norm);
    let lr = config.lr_at(opt.step);
    adam_update(params, &grads, opt, lr);
    let n = fwd.positions() as f64;
    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
    for (emb, (mean, var)) in params.embeddings.iter_mut().zip(fwd.batch_stats()) {
        for k in 0..mean.len() {
            emb.bn.running_mean[k] = BN_MOMENTUM * emb.bn.running_mean[k] + (1.0 - BN_MOMENTUM) * mean[k];
            emb.bn.running_var[k] = BN_MOMENTUM * emb.bn.running_var[k] + (1.0 - BN_MOMENTUM) * var[k] * unbias;
        }
    }
    if !params.is_finite() {
        return Err(Error::non_finite("parameters after update"));
    }
    Ok((loss, norm))
}

/// Trains from scratch. All randomness (initialization, validation split, crops,
/// flips, balancing, dropout) comes from one generator seeded with `config.seed`.
pub fn train(tracks: &[Track], config: &TrainConfig) -> std::result::Result<TrainOutcome, TrainError> {
    train_with_progress(tracks, config, |_| {})
}

pub fn train_with_progress(
    tracks: &[Track],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> std::result::Result<TrainOutcome, TrainError> {
    config.validate()?;
    if tracks.is_empty() {
        return Err(Error::InsufficientData("no tracks".into()).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = init_params_from_rng(&config.arch(), &mut rng);

    let (train_set, val_set) = if config.val_fraction > 0.0 {
        let split_seed = rng.next_u64();
        split_dataset(tracks, config.val_fraction, split_seed)?
    } else {
        (tracks.to_vec(), Vec::new())
    };
    let mut sampler = Sampler::new(&train_set, config)?;
    let per_epoch = sampler.updates_per_epoch();

    let mut opt = OptimizerState::new(&params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 0..config.epochs {
        sampler.begin_epoch(&mut rng);
        let mut loss_sum = 0.0;
        let mut max_norm: f64 = 0.0;
        for _ in 0..per_epoch {
            let batch = sampler.sample_batch(&mut rng);
            let checkpoint = params.clone();
            match train_step(&mut params, &mut opt, &batch, config, &mut rng) {
                Ok((loss, norm)) => {
                    loss_sum += loss;
                    max_norm = max_norm.max(norm);
                }
                Err(error) => {
                    return Err(TrainError {
                        error,
                        checkpoint: Some(Box::new(checkpoint)),
                    })
                }
            }
        }
        let val = if val_set.is_empty() {
            None
        } else {
            Some(evaluate(&params, &val_set, config.conf_threshold)?)
        };
        if let Some(report) = &val {
            if best.as_ref().is_none_or(|(acc, _, _)| report.accuracy >= *acc) {
                best = Some((report.accuracy, epoch, params.clone()));
            }
        }
        let record = EpochRecord {
            epoch,
            updates: opt.step,
            lr: config.lr_at(opt.step),
            train_loss: loss_sum / per_epoch as f64,
            max_grad_norm: max_norm,
            val,
        };
        on_epoch(&record);
        history.push(record);
    }

    let (best_params, best_epoch) = match best {
        Some((_, epoch, p)) => (p, Some(epoch)),
        None => (params.clone(), None),
    };
    Ok(TrainOutcome {
        final_params: params,
        best_params,
        best_epoch,
        history,
        train_tracks: train_set.len(),
        val_tracks: val_set.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_entries() {
        let mut c = TrainConfig {
            seed: 42,
            epochs: 3,
            features: FeatureSelection::NoDynamic,
            ..TrainConfig::default()
        };
        let entries = c.entries();
        let mut d = TrainConfig::default();
        for (k, v) in &entries {
            d.set(k, v).unwrap();
        }
        assert_eq!(c, d);
        assert!(c.set("learning_rate", "1").is_err());
        assert!(c.set("epochs", "-1").is_err());
        assert_eq!(entries.len(), TrainConfig::KEYS.len());
    }

    #[test]
    fn validation_rejects_bad_lengths() {
        let c = TrainConfig {
            seq_len_min: 70,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
