//! Forward model: per-group embeddings with batch normalization, concatenation into
//! the internal representation, a bias-free GRU and a softmax head.

mod params;
mod stream;

pub use params::{
    init_params, init_params_from_rng, Arch, BatchNorm, GroupEmbedding, GruWeights, ModelParams,
    TensorRef, BN_EPSILON, BN_MOMENTUM, NUM_CLASSES,
};
pub use stream::{stream_step, StreamOutput, StreamState};

use rand::RngCore;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::{FeatureFrame, FeatureSelection};
use crate::linalg::{sigmoid, Matrix};
use crate::skeleton::MotionState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Probs {
    pub p_walking: f64,
    pub p_standing: f64,
}

impl Probs {
    pub const UNIFORM: Probs = Probs {
        p_walking: 0.5,
        p_standing: 0.5,
    };

    pub fn get(&self, state: MotionState) -> f64 {
        match state {
            MotionState::Walking => self.p_walking,
            MotionState::Standing => self.p_standing,
        }
    }

    /// Predicted state; ties go to walking.
    pub fn argmax(&self) -> MotionState {
        if self.p_walking >= self.p_standing {
            MotionState::Walking
        } else {
            MotionState::Standing
        }
    }
}

/// A model-ready sequence: flat per-step inputs plus optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<Option<MotionState>>,
}

impl Sequence {
    pub fn from_frames(
        frames: &[FeatureFrame],
        labels: &[Option<MotionState>],
        selection: FeatureSelection,
    ) -> Self {
        Sequence {
            inputs: frames.iter().map(|f| selection.model_input(f)).collect(),
            labels: frames.iter().map(|f| labels[f.source]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Batch-norm statistics source for [`embed`].
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    /// Running statistics stored in the parameters.
    Running,
    /// Statistics of the current batch (train mode).
    Batch { mean: &'a [f64], var: &'a [f64] },
}

/// `tanh(BN(W x))` for one feature group.
pub fn embed(input: &[f64], group: &GroupEmbedding, stats: BnStats<'_>) -> Result<Vec<f64>> {
    let mut pre = group.weight.matvec(input);
    let (mean, var) = match stats {
        BnStats::Running => (&group.bn.running_mean[..], &group.bn.running_var[..]),
        BnStats::Batch { mean, var } => (mean, var),
    };
    for (i, a) in pre.iter_mut().enumerate() {
        let xhat = (*a - mean[i]) / (var[i] + BN_EPSILON).sqrt();
        *a = (group.bn.gamma[i] * xhat + group.bn.beta[i]).tanh();
        if !a.is_finite() {
            return Err(Error::non_finite("embedding output"));
        }
    }
    Ok(pre)
}

/// Intermediates of one GRU step, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct GruCache {
    pub r: Vec<f64>,
    pub z: Vec<f64>,
    pub candidate: Vec<f64>,
    pub reset_h: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn gru_step_cached(input: &[f64], h_prev: &[f64], gru: &GruWeights) -> Result<GruCache> {
    let n = h_prev.len();
    let mut r = gru.w_rx.matvec(input);
    let mut z = gru.w_zx.matvec(input);
    let mut tmp = vec![0.0; n];
    gru.w_rh.matvec_into(h_prev, &mut tmp);
    for (ri, t) in r.iter_mut().zip(&tmp) {
        *ri = sigmoid(*ri + t);
    }
    gru.w_zh.matvec_into(h_prev, &mut tmp);
    for (zi, t) in z.iter_mut().zip(&tmp) {
        *zi = sigmoid(*zi + t);
    }
    let reset_h: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let mut candidate = gru.w_xh.matvec(input);
    gru.w_hh.matvec_into(&reset_h, &mut tmp);
    for (c, t) in candidate.iter_mut().zip(&tmp) {
        *c = (*c + t).tanh();
    }
    let h: Vec<f64> = (0..n)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * candidate[i])
        .collect();
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("gru hidden state"));
    }
    Ok(GruCache {
        r,
        z,
        candidate,
        reset_h,
        h,
    })
}

/// One recurrence step:
/// `r = σ(W_rx I + W_rh h)`, `z = σ(W_zx I + W_zh h)`,
/// `h~ = tanh(W_xh I + W_hh (r ⊙ h))`, `h' = (1 - z) ⊙ h + z ⊙ h~`.
pub fn gru_step(input: &[f64], h_prev: &[f64], gru: &GruWeights) -> Result<Vec<f64>> {
    Ok(gru_step_cached(input, h_prev, gru)?.h)
}

pub fn softmax2(logits: [f64; 2]) -> Probs {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let s = e0 + e1;
    Probs {
        p_walking: e0 / s,
        p_standing: e1 / s,
    }
}

pub fn logits(h: &[f64], classifier: &Matrix, bias: &[f64]) -> [f64; 2] {
    let l = classifier.matvec(h);
    [l[0] + bias[0], l[1] + bias[1]]
}

pub fn classify(h: &[f64], params: &ModelParams) -> Probs {
    softmax2(logits(h, &params.classifier, &params.classifier_bias))
}

/// Internal representation `I_t` in infer mode.
pub fn internal_representation(input: &[f64], params: &ModelParams) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(params.arch.internal_dim());
    let mut offset = 0;
    for (group, &(_, width)) in params.embeddings.iter().zip(&params.arch.groups) {
        out.extend(embed(&input[offset..offset + width], group, BnStats::Running)?);
        offset += width;
    }
    Ok(out)
}

/// Infer-mode step from the previous hidden state.
pub fn infer_step(input: &[f64], h_prev: &[f64], params: &ModelParams) -> Result<(Vec<f64>, Probs)> {
    if input.len() != params.arch.input_dim() {
        return Err(Error::LengthMismatch {
            left: input.len(),
            right: params.arch.input_dim(),
        });
    }
    let internal = internal_representation(input, params)?;
    let h = gru_step(&internal, h_prev, &params.gru)?;
    let probs = classify(&h, params);
    if !(probs.p_walking.is_finite() && probs.p_standing.is_finite()) {
        return Err(Error::non_finite("classifier output"));
    }
    Ok((h, probs))
}

pub enum Mode<'a> {
    Infer,
    /// Batch statistics from this sequence alone, inverted dropout on `I_t`.
    Train {
        dropout_rate: f64,
        rng: &'a mut dyn RngCore,
    },
}

/// Runs the model over a sequence from `h_0 = 0`, returning one `Probs` per step.
pub fn forward_sequence(inputs: &[Vec<f64>], params: &ModelParams, mode: Mode<'_>) -> Result<Vec<Probs>> {
    match mode {
        Mode::Infer => {
            let mut h = vec![0.0; params.arch.hidden_dim];
            let mut out = Vec::with_capacity(inputs.len());
            for (t, x) in inputs.iter().enumerate() {
                let (h_next, probs) = infer_step(x, &h, params).map_err(|e| at_step(e, t))?;
                h = h_next;
                out.push(probs);
            }
            Ok(out)
        }
        Mode::Train { dropout_rate, rng } => {
            let seq = Sequence {
                inputs: inputs.to_vec(),
                labels: vec![None; inputs.len()],
            };
            let batch = std::slice::from_ref(&seq);
            let masks = crate::training::draw_dropout_masks(batch, &params.arch, dropout_rate, rng);
            let fwd = crate::training::forward_batch(batch, params, &masks)?;
            Ok(fwd.probs(0))
        }
    }
}

fn at_step(err: Error, t: usize) -> Error {
    match err {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{context} at timestep {t}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureGroup, FeatureSelection};

    fn scalar_gru(w: f64) -> GruWeights {
        let m = || Matrix::from_vec(1, 1, vec![w]);
        GruWeights {
            w_rx: m(),
            w_rh: m(),
            w_zx: m(),
            w_zh: m(),
            w_xh: m(),
            w_hh: m(),
        }
    }

    #[test]
    fn gru_zero_fixed_point() {
        let params = init_params(&Arch::for_selection(FeatureSelection::All), 3);
        let h = gru_step(&[0.0; 64], &[0.0; 64], &params.gru).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_scalar_example() {
        let c = gru_step_cached(&[1.0], &[0.5], &scalar_gru(1.0)).unwrap();
        let r = 1.0 / (1.0 + (-1.5f64).exp());
        let cand = (1.0 + 0.5 * r).tanh();
        let h = (1.0 - r) * 0.5 + r * cand;
        assert!((c.r[0] - 0.817_574).abs() < 1e-6);
        assert!((c.candidate[0] - 0.887_236).abs() < 1e-6);
        assert!((c.h[0] - 0.816_595).abs() < 1e-6);
        assert!((c.h[0] - h).abs() < 1e-12);
    }

    fn scalar_group(w: f64, gamma: f64, beta: f64, mean: f64, var: f64) -> GroupEmbedding {
        GroupEmbedding {
            weight: Matrix::from_vec(1, 1, vec![w]),
            bn: BatchNorm {
                gamma: vec![gamma],
                beta: vec![beta],
                running_mean: vec![mean],
                running_var: vec![var],
            },
        }
    }

    #[test]
    fn embed_scalar_examples() {
        let g = scalar_group(1.0, 1.0, 0.0, 0.0, 1.0);
        let out = embed(&[2.0], &g, BnStats::Running).unwrap();
        assert!((out[0] - (2.0 / (1.0f64 + 1e-5).sqrt()).tanh()).abs() < 1e-15);
        assert!((out[0] - 0.964_02).abs() < 1e-5);

        // epsilon 0 variant: evaluated through batch stats with var chosen so var + eps = 4
        let g = scalar_group(1.0, 2.0, 0.5, 0.0, 1.0);
        let var = [4.0 - BN_EPSILON];
        let out = embed(&[3.0], &g, BnStats::Batch { mean: &[1.0], var: &var }).unwrap();
        assert!((out[0] - 0.986_61).abs() < 1e-5);
    }

    #[test]
    fn embed_with_zero_weights_is_zero() {
        let mut params = init_params(&Arch::for_selection(FeatureSelection::All), 1);
        for g in params.embeddings.iter_mut() {
            g.weight.as_mut_slice().fill(0.0);
        }
        let out = embed(&[3.0; 16], &params.embeddings[0], BnStats::Running).unwrap();
        assert_eq!(out, vec![0.0; 16]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax2([0.0, 0.0]), Probs::UNIFORM);
        let p = softmax2([3.0f64.ln(), 0.0]);
        assert!((p.p_walking - 0.75).abs() < 1e-15);
        assert!((p.p_standing - 0.25).abs() < 1e-15);
        let p = softmax2([1000.0, 0.0]);
        assert_eq!(p.p_walking, 1.0);
        assert!(p.p_standing.is_finite() && p.p_standing < 1e-300);
    }

    #[test]
    fn argmax_ties_walk() {
        assert_eq!(Probs::UNIFORM.argmax(), MotionState::Walking);
    }

    #[test]
    fn zero_classifier_gives_uniform_sequence() {
        let mut params = init_params(&Arch::for_selection(FeatureSelection::All), 5);
        params.classifier.as_mut_slice().fill(0.0);
        let inputs = vec![vec![0.3; 72]; 7];
        let probs = forward_sequence(&inputs, &params, Mode::Infer).unwrap();
        assert_eq!(probs.len(), 7);
        assert!(probs.iter().all(|p| *p == Probs::UNIFORM));
    }

    #[test]
    fn input_width_is_checked() {
        let params = init_params(&Arch::for_selection(FeatureSelection::NoAngle), 5);
        assert_eq!(params.arch.groups[1], (FeatureGroup::Distance, 24));
        assert!(infer_step(&[0.0; 72], &[0.0; 64], &params).is_err());
        assert!(infer_step(&[0.0; 40], &[0.0; 64], &params).is_ok());
    }
}
