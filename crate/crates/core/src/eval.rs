//! Frame-level metrics, whole-track inference and the feature ablation study.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{extract_track_features, FeatureSelection};
use crate::network::{forward_sequence, Mode, ModelParams, Probs};
use crate::skeleton::{MotionState, Track};
use crate::training::{train, TrainConfig, TrainError};

/// Frame counts with walking as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn record(&mut self, predicted: MotionState, actual: MotionState) {
        match (predicted, actual) {
            (MotionState::Walking, MotionState::Walking) => self.tp += 1,
            (MotionState::Walking, MotionState::Standing) => self.fp += 1,
            (MotionState::Standing, MotionState::Walking) => self.fn_ += 1,
            (MotionState::Standing, MotionState::Standing) => self.tn += 1,
        }
    }

    pub fn merge(self, other: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
            tn: self.tn + other.tn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub support_walking: u64,
    pub support_standing: u64,
    /// Set when the ratio had a zero denominator and was reported as 0.
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub f1_undefined: bool,
    pub confusion: ConfusionMatrix,
}

/// Counts argmax predictions (ties go to walking) against labels.
pub fn confusion(predictions: &[Probs], labels: &[MotionState]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (p, &label) in predictions.iter().zip(labels) {
        cm.record(p.argmax(), label);
    }
    Ok(cm)
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let (precision, precision_undefined) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, recall_undefined) = ratio(cm.tp, cm.tp + cm.fn_);
    let (f1, f1_undefined) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Ok(MetricsReport {
        precision,
        recall,
        f1,
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        support_walking: cm.tp + cm.fn_,
        support_standing: cm.fp + cm.tn,
        precision_undefined,
        recall_undefined,
        f1_undefined,
        confusion: *cm,
    })
}

/// Per-pose output of whole-track inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramePrediction {
    pub frame_index: u64,
    pub probs: Probs,
    /// The pose was unusable; `probs` carries the previous estimate (uniform at track start).
    pub stale: bool,
}

/// Infer-mode forward over a full track, one prediction per pose. Frames dropped by
/// feature extraction repeat the last estimate, which is what streaming produces.
pub fn predict_track(params: &ModelParams, track: &Track, conf_threshold: f64) -> Result<Vec<FramePrediction>> {
    let frames = extract_track_features(track, conf_threshold);
    let inputs: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| params.arch.selection.model_input(f))
        .collect();
    let probs = forward_sequence(&inputs, params, Mode::Infer)?;
    let mut out = Vec::with_capacity(track.len());
    let mut last = Probs::UNIFORM;
    let mut next = frames.iter().zip(&probs).peekable();
    for (i, pose) in track.poses.iter().enumerate() {
        let stale = match next.peek() {
            Some((frame, &p)) if frame.source == i => {
                last = p;
                next.next();
                false
            }
            _ => true,
        };
        out.push(FramePrediction {
            frame_index: pose.frame_index,
            probs: last,
            stale,
        });
    }
    Ok(out)
}

fn labeled_pairs<'a>(
    preds: &'a [FramePrediction],
    track: &'a Track,
    keep: impl Fn(usize) -> bool + 'a,
) -> impl Iterator<Item = (Probs, MotionState)> + 'a {
    preds
        .iter()
        .zip(&track.labels)
        .enumerate()
        .filter(move |(i, _)| keep(*i))
        .filter_map(|(_, (p, label))| label.map(|l| (p.probs, l)))
}

fn confusion_over(
    params: &ModelParams,
    tracks: &[Track],
    conf_threshold: f64,
    select: impl Fn(&Track) -> Vec<bool> + Sync,
) -> Result<ConfusionMatrix> {
    let parts: Vec<Result<ConfusionMatrix>> = tracks
        .par_iter()
        .map(|track| {
            let preds = predict_track(params, track, conf_threshold)?;
            let keep = select(track);
            let mut cm = ConfusionMatrix::default();
            for (p, label) in labeled_pairs(&preds, track, |i| keep[i]) {
                cm.record(p.argmax(), label);
            }
            Ok(cm)
        })
        .collect();
    parts
        .into_iter()
        .try_fold(ConfusionMatrix::default(), |acc, cm| Ok(acc.merge(cm?)))
}

/// Frame-level metrics over every labeled frame of every track.
pub fn evaluate(params: &ModelParams, tracks: &[Track], conf_threshold: f64) -> Result<MetricsReport> {
    let cm = confusion_over(params, tracks, conf_threshold, |t| vec![true; t.len()])?;
    metrics(&cm)
}

/// Indices where the label switches between walking and standing.
pub fn label_boundaries(track: &Track) -> Vec<usize> {
    (1..track.len())
        .filter(|&i| matches!((track.labels[i - 1], track.labels[i]), (Some(a), Some(b)) if a != b))
        .collect()
}

/// Marks the `window` frames on each side of every label boundary: for a boundary at
/// frame `k` that is frames `k - window ..= k + window - 1`.
pub fn transition_mask(track: &Track, window: usize) -> Vec<bool> {
    let mut mask = vec![false; track.len()];
    for k in label_boundaries(track) {
        let lo = k.saturating_sub(window);
        let hi = (k + window).min(track.len());
        mask[lo..hi].iter_mut().for_each(|m| *m = true);
    }
    mask
}

/// Metrics restricted to frames near label boundaries.
pub fn evaluate_transitions(
    params: &ModelParams,
    tracks: &[Track],
    conf_threshold: f64,
    window: usize,
) -> Result<MetricsReport> {
    let cm = confusion_over(params, tracks, conf_threshold, |t| transition_mask(t, window))?;
    metrics(&cm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub selection: &'static str,
    pub description: &'static str,
    pub input_width: usize,
    pub report: MetricsReport,
}

/// Retrains from scratch once per feature selection (same seed and recipe) and
/// evaluates the best-validation parameters on `test`.
pub fn ablate(train_tracks: &[Track], test_tracks: &[Track], config: &TrainConfig) -> std::result::Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(FeatureSelection::ABLATION_ORDER.len());
    for selection in FeatureSelection::ABLATION_ORDER {
        let cfg = TrainConfig {
            features: selection,
            ..config.clone()
        };
        let outcome = train(train_tracks, &cfg)?;
        let report = evaluate(&outcome.best_params, test_tracks, cfg.conf_threshold)?;
        rows.push(AblationRow {
            selection: selection.name(),
            description: selection.description(),
            input_width: selection.input_width(),
            report,
        });
    }
    Ok(rows)
}

pub fn format_report(report: &MetricsReport) -> String {
    let flag = |undefined: bool| if undefined { " (undefined)" } else { "" };
    format!(
        "precision {:.4}{}\nrecall    {:.4}{}\nf1        {:.4}{}\naccuracy  {:.4}\nsupport   walking {} standing {}\nconfusion tp {} fp {} fn {} tn {}\n",
        report.precision,
        flag(report.precision_undefined),
        report.recall,
        flag(report.recall_undefined),
        report.f1,
        flag(report.f1_undefined),
        report.accuracy,
        report.support_walking,
        report.support_standing,
        report.confusion.tp,
        report.confusion.fp,
        report.confusion.fn_,
        report.confusion.tn,
    )
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<28} {:>6} {:>9} {:>9} {:>9} {:>9}\n",
        "features", "width", "precision", "recall", "f1", "accuracy"
    );
    for row in rows {
        out.push_str(&format!(
            "{:<28} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}\n",
            row.description, row.input_width, row.report.precision, row.report.recall, row.report.f1, row.report.accuracy
        ));
    }
    out
}
