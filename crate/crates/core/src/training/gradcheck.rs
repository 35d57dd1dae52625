//! Central finite-difference verification of [`backward_with_masks`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::backprop::{backward_with_masks, batch_loss, draw_dropout_masks, DropoutMasks, Gradients};
use crate::error::Result;
use crate::network::{init_params_from_rng, Arch, ModelParams, Sequence};
use crate::skeleton::MotionState;

/// Denominator floor so that pairs of vanishing gradients do not produce spurious ratios.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a| + |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Compares `grads` against central differences of the loss for every learnable entry
/// whose tensor name passes `select`.
pub fn grad_check_against(
    params: &ModelParams,
    grads: &Gradients,
    batch: &[Sequence],
    masks: &DropoutMasks,
    l2_weight: f64,
    eps: f64,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport> {
    let names: Vec<String> = params
        .tensors()
        .into_iter()
        .filter(|t| t.learnable)
        .map(|t| t.name)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut probe = params.clone();
    for (ti, (name, analytic)) in names.iter().zip(grads.tensors()).enumerate() {
        if !select(name) {
            continue;
        }
        for i in 0..analytic.len() {
            let original = probe.learnable_mut()[ti][i];
            probe.learnable_mut()[ti][i] = original + eps;
            let plus = batch_loss(batch, &probe, masks, l2_weight)?;
            probe.learnable_mut()[ti][i] = original - eps;
            let minus = batch_loss(batch, &probe, masks, l2_weight)?;
            probe.learnable_mut()[ti][i] = original;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), i));
                report.analytic_at_worst = analytic[i];
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Analytic gradients vs central differences over every learnable parameter.
pub fn grad_check(
    params: &ModelParams,
    batch: &[Sequence],
    masks: &DropoutMasks,
    l2_weight: f64,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, grads, _) = backward_with_masks(batch, params, masks, l2_weight)?;
    grad_check_against(params, &grads, batch, masks, l2_weight, eps, |_| true)
}

/// Random labeled sequences for a given architecture.
pub fn random_batch<R: Rng + ?Sized>(arch: &Arch, sequences: usize, steps: usize, rng: &mut R) -> Vec<Sequence> {
    (0..sequences)
        .map(|_| Sequence {
            inputs: (0..steps)
                .map(|_| (0..arch.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect(),
            labels: (0..steps)
                .map(|_| {
                    Some(if rng.random::<bool>() {
                        MotionState::Walking
                    } else {
                        MotionState::Standing
                    })
                })
                .collect(),
        })
        .collect()
}

/// Settings of the standard tiny-model check.
#[derive(Debug, Clone, Copy)]
pub struct TinyCheck {
    pub sequences: usize,
    pub steps: usize,
    pub eps: f64,
    pub l2_weight: f64,
    pub dropout_rate: f64,
}

impl Default for TinyCheck {
    fn default() -> Self {
        TinyCheck {
            sequences: 3,
            steps: 4,
            eps: 1e-5,
            l2_weight: 0.0005,
            dropout_rate: 0.5,
        }
    }
}

/// Builds a tiny model (groups 2 wide, hidden 3) from `seed`, freezes a dropout mask,
/// and checks every parameter.
pub fn tiny_grad_check(seed: u64, settings: TinyCheck) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Arch::tiny();
    let mut params = init_params_from_rng(&arch, &mut rng);
    // move batch norm away from its identity initialization so gamma/beta paths are exercised
    for emb in params.embeddings.iter_mut() {
        for g in emb.bn.gamma.iter_mut() {
            *g = rng.random_range(0.5..1.5);
        }
        for b in emb.bn.beta.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    for b in params.classifier_bias.iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    let batch = random_batch(&arch, settings.sequences, settings.steps, &mut rng);
    let masks = draw_dropout_masks(&batch, &arch, settings.dropout_rate, &mut rng);
    grad_check(&params, &batch, &masks, settings.l2_weight, settings.eps)
}
