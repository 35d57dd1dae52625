//! Train-mode forward pass with cached intermediates and reverse-mode gradients.
//!
//! Batch normalization statistics are taken over every timestep of every sequence in
//! the batch, so the embedding stage is handled batch-wide while the recurrence and
//! classifier run per sequence (in parallel, reduced in sequence order).

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{axpy, Matrix};
use crate::network::{
    gru_step_cached, logits, softmax2, Arch, GruCache, GruWeights, ModelParams, Probs, Sequence,
    BN_EPSILON, NUM_CLASSES,
};
use crate::skeleton::MotionState;

/// Probability floor inside the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

/// Inverted-dropout multipliers on `I_t`, one row per batch position.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub rate: f64,
    pub rows: Vec<Vec<f64>>,
}

impl DropoutMasks {
    pub fn none(batch: &[Sequence], arch: &Arch) -> Self {
        let n: usize = batch.iter().map(Sequence::len).sum();
        DropoutMasks {
            rate: 0.0,
            rows: vec![vec![1.0; arch.internal_dim()]; n],
        }
    }
}

/// Draws keep/drop decisions for every `I_t` entry of the batch; kept entries are
/// scaled by `1 / (1 - rate)`.
pub fn draw_dropout_masks<R: RngCore + ?Sized>(
    batch: &[Sequence],
    arch: &Arch,
    rate: f64,
    rng: &mut R,
) -> DropoutMasks {
    if rate <= 0.0 {
        return DropoutMasks::none(batch, arch);
    }
    let keep_scale = 1.0 / (1.0 - rate);
    let n: usize = batch.iter().map(Sequence::len).sum();
    let rows = (0..n)
        .map(|_| {
            (0..arch.internal_dim())
                .map(|_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep_scale
                    }
                })
                .collect()
        })
        .collect();
    DropoutMasks { rate, rows }
}

/// Same shape as the learnable part of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub embed_weight: Vec<Matrix>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub gru: GruWeights,
    pub classifier: Matrix,
    pub classifier_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros(arch: &Arch) -> Self {
        let e = arch.embed_dim;
        Gradients {
            embed_weight: arch.groups.iter().map(|&(_, d)| Matrix::zeros(e, d)).collect(),
            gamma: vec![vec![0.0; e]; arch.groups.len()],
            beta: vec![vec![0.0; e]; arch.groups.len()],
            gru: GruWeights::zeros(arch.hidden_dim, arch.internal_dim()),
            classifier: Matrix::zeros(NUM_CLASSES, arch.hidden_dim),
            classifier_bias: vec![0.0; NUM_CLASSES],
        }
    }

    /// Flat views in the order of [`ModelParams::learnable_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for i in 0..self.embed_weight.len() {
            out.push(self.embed_weight[i].as_slice());
            out.push(&self.gamma[i]);
            out.push(&self.beta[i]);
        }
        for (_, m) in self.gru.named() {
            out.push(m.as_slice());
        }
        out.push(self.classifier.as_slice());
        out.push(&self.classifier_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let Gradients {
            embed_weight,
            gamma,
            beta,
            gru,
            classifier,
            classifier_bias,
        } = self;
        for ((w, g), b) in embed_weight.iter_mut().zip(gamma.iter_mut()).zip(beta.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(g);
            out.push(b);
        }
        for (_, m) in gru.named_mut() {
            out.push(m.as_mut_slice());
        }
        out.push(classifier.as_mut_slice());
        out.push(classifier_bias);
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Rescales to `max_norm` when the global norm exceeds it. Returns the pre-clip norm.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }
}

#[derive(Debug, Clone)]
struct GroupCache {
    mean: Vec<f64>,
    var: Vec<f64>,
    /// Normalized pre-activations, `positions x embed_dim`.
    xhat: Vec<f64>,
    /// `tanh` outputs, `positions x embed_dim`.
    out: Vec<f64>,
}

#[derive(Debug, Clone)]
struct SequenceCache {
    steps: Vec<GruCache>,
    probs: Vec<Probs>,
}

/// Train-mode forward pass over a batch, with everything backward needs.
#[derive(Debug, Clone)]
pub struct BatchForward {
    offsets: Vec<usize>,
    groups: Vec<GroupCache>,
    /// `I_t` after dropout, per batch position.
    internal: Vec<Vec<f64>>,
    sequences: Vec<SequenceCache>,
}

impl BatchForward {
    pub fn probs(&self, seq: usize) -> Vec<Probs> {
        self.sequences[seq].probs.clone()
    }

    /// Per-group batch mean and biased variance of the pre-normalization activations.
    pub fn batch_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.groups
            .iter()
            .map(|g| (g.mean.as_slice(), g.var.as_slice()))
            .collect()
    }

    pub fn positions(&self) -> usize {
        self.internal.len()
    }
}

pub fn forward_batch(
    batch: &[Sequence],
    params: &ModelParams,
    masks: &DropoutMasks,
) -> Result<BatchForward> {
    let arch = &params.arch;
    let e = arch.embed_dim;
    let d_in = arch.input_dim();
    let mut offsets = Vec::with_capacity(batch.len());
    let mut total = 0;
    for seq in batch {
        offsets.push(total);
        total += seq.len();
        if let Some(x) = seq.inputs.iter().find(|x| x.len() != d_in) {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: d_in,
            });
        }
    }
    if total == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    if masks.rows.len() != total {
        return Err(Error::LengthMismatch {
            left: masks.rows.len(),
            right: total,
        });
    }
    let inputs: Vec<&[f64]> = batch.iter().flat_map(|s| s.inputs.iter().map(|x| x.as_slice())).collect();

    let mut groups = Vec::with_capacity(arch.groups.len());
    let mut offset = 0;
    for (emb, &(_, width)) in params.embeddings.iter().zip(&arch.groups) {
        let mut pre = vec![0.0; total * e];
        for (p, x) in inputs.iter().enumerate() {
            emb.weight
                .matvec_into(&x[offset..offset + width], &mut pre[p * e..(p + 1) * e]);
        }
        let n = total as f64;
        let mut mean = vec![0.0; e];
        for row in pre.chunks_exact(e) {
            axpy(1.0, row, &mut mean);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; e];
        for row in pre.chunks_exact(e) {
            for k in 0..e {
                let d = row[k] - mean[k];
                var[k] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut xhat = pre;
        let mut out = vec![0.0; total * e];
        for (xrow, orow) in xhat.chunks_exact_mut(e).zip(out.chunks_exact_mut(e)) {
            for k in 0..e {
                xrow[k] = (xrow[k] - mean[k]) * inv_std[k];
                orow[k] = (emb.bn.gamma[k] * xrow[k] + emb.bn.beta[k]).tanh();
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite("embedding output (train)"));
        }
        groups.push(GroupCache {
            mean,
            var,
            xhat,
            out,
        });
        offset += width;
    }

    let internal: Vec<Vec<f64>> = (0..total)
        .map(|p| {
            let mut row = Vec::with_capacity(arch.internal_dim());
            for g in &groups {
                row.extend_from_slice(&g.out[p * e..(p + 1) * e]);
            }
            for (v, m) in row.iter_mut().zip(&masks.rows[p]) {
                *v *= m;
            }
            row
        })
        .collect();

    let sequences = batch
        .par_iter()
        .enumerate()
        .map(|(b, seq)| {
            let mut h = vec![0.0; arch.hidden_dim];
            let mut steps = Vec::with_capacity(seq.len());
            let mut probs = Vec::with_capacity(seq.len());
            for t in 0..seq.len() {
                let cache = gru_step_cached(&internal[offsets[b] + t], &h, &params.gru)?;
                probs.push(softmax2(logits(
                    &cache.h,
                    &params.classifier,
                    &params.classifier_bias,
                )));
                h = cache.h.clone();
                steps.push(cache);
            }
            Ok(SequenceCache { steps, probs })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(BatchForward {
        offsets,
        groups,
        internal,
        sequences,
    })
}

/// Sum of squared regularized weights.
pub fn l2_penalty(params: &ModelParams) -> f64 {
    params
        .tensors()
        .iter()
        .filter(|t| t.regularized)
        .flat_map(|t| t.data.iter())
        .map(|w| w * w)
        .sum()
}

/// Mean per-step cross-entropy over labeled steps plus `l2_weight * sum(w^2)`.
pub fn loss(
    probs: &[Probs],
    labels: &[Option<MotionState>],
    params: &ModelParams,
    l2_weight: f64,
) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: probs.len(),
            right: labels.len(),
        });
    }
    let (sum, count) = cross_entropy_sum(probs.iter().zip(labels));
    let ce = if count > 0 { sum / count as f64 } else { 0.0 };
    Ok(ce + l2_weight * l2_penalty(params))
}

fn cross_entropy_sum<'a>(
    pairs: impl Iterator<Item = (&'a Probs, &'a Option<MotionState>)>,
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    for (p, label) in pairs {
        if let Some(state) = label {
            sum -= p.get(*state).max(PROB_FLOOR).ln();
            count += 1;
        }
    }
    (sum, count)
}

/// Loss of a batch under fixed dropout masks.
pub fn batch_loss(
    batch: &[Sequence],
    params: &ModelParams,
    masks: &DropoutMasks,
    l2_weight: f64,
) -> Result<f64> {
    let fwd = forward_batch(batch, params, masks)?;
    Ok(loss_from_forward(batch, &fwd, params, l2_weight))
}

fn loss_from_forward(batch: &[Sequence], fwd: &BatchForward, params: &ModelParams, l2_weight: f64) -> f64 {
    let (sum, count) = cross_entropy_sum(
        batch
            .iter()
            .zip(&fwd.sequences)
            .flat_map(|(s, c)| c.probs.iter().zip(&s.labels)),
    );
    let ce = if count > 0 { sum / count as f64 } else { 0.0 };
    ce + l2_weight * l2_penalty(params)
}

struct SequenceGrads {
    gru: GruWeights,
    classifier: Matrix,
    classifier_bias: Vec<f64>,
    /// Gradient w.r.t. the undropped `I_t`, per step.
    d_internal: Vec<Vec<f64>>,
}

/// Analytic gradients of [`batch_loss`] under the given masks.
pub fn backward_with_masks(
    batch: &[Sequence],
    params: &ModelParams,
    masks: &DropoutMasks,
    l2_weight: f64,
) -> Result<(f64, Gradients, BatchForward)> {
    let fwd = forward_batch(batch, params, masks)?;
    let loss = loss_from_forward(batch, &fwd, params, l2_weight);
    if !loss.is_finite() {
        return Err(Error::non_finite("loss"));
    }
    let arch = &params.arch;
    let labeled: usize = batch
        .iter()
        .map(|s| s.labels.iter().filter(|l| l.is_some()).count())
        .sum();
    let ce_scale = if labeled > 0 { 1.0 / labeled as f64 } else { 0.0 };

    let per_seq: Vec<SequenceGrads> = batch
        .par_iter()
        .enumerate()
        .map(|(b, seq)| sequence_backward(seq, &fwd, b, params, masks, ce_scale))
        .collect();

    let mut grads = Gradients::zeros(arch);
    let mut d_internal: Vec<Vec<f64>> = Vec::with_capacity(fwd.positions());
    for sg in per_seq {
        for ((_, acc), (_, part)) in grads.gru.named_mut().into_iter().zip(sg.gru.named()) {
            acc.add_assign(part);
        }
        grads.classifier.add_assign(&sg.classifier);
        axpy(1.0, &sg.classifier_bias, &mut grads.classifier_bias);
        d_internal.extend(sg.d_internal);
    }

    // embeddings and batch norm, batch-wide
    let e = arch.embed_dim;
    let n = fwd.positions();
    let inputs: Vec<&[f64]> = batch.iter().flat_map(|s| s.inputs.iter().map(|x| x.as_slice())).collect();
    let mut offset = 0;
    for (gi, (emb, &(_, width))) in params.embeddings.iter().zip(&arch.groups).enumerate() {
        let cache = &fwd.groups[gi];
        let mut d_xhat = vec![0.0; n * e];
        let mut sum_d = vec![0.0; e];
        let mut sum_d_xhat = vec![0.0; e];
        for p in 0..n {
            for k in 0..e {
                let out = cache.out[p * e + k];
                let dy = d_internal[p][gi * e + k] * (1.0 - out * out);
                let xh = cache.xhat[p * e + k];
                grads.gamma[gi][k] += dy * xh;
                grads.beta[gi][k] += dy;
                let dxh = dy * emb.bn.gamma[k];
                d_xhat[p * e + k] = dxh;
                sum_d[k] += dxh;
                sum_d_xhat[k] += dxh * xh;
            }
        }
        let nf = n as f64;
        let inv_std: Vec<f64> = cache.var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut d_pre = vec![0.0; e];
        for (p, x) in inputs.iter().enumerate() {
            for k in 0..e {
                let xh = cache.xhat[p * e + k];
                d_pre[k] = inv_std[k] / nf
                    * (nf * d_xhat[p * e + k] - sum_d[k] - xh * sum_d_xhat[k]);
            }
            grads.embed_weight[gi].add_outer(&d_pre, &x[offset..offset + width]);
        }
        offset += width;
    }

    if l2_weight != 0.0 {
        let tensors = params.tensors();
        let learnable: Vec<_> = tensors.iter().filter(|t| t.learnable).collect();
        for (t, g) in learnable.iter().zip(grads.tensors_mut()) {
            if t.regularized {
                axpy(2.0 * l2_weight, t.data, g);
            }
        }
    }

    let names: Vec<String> = params
        .tensors()
        .into_iter()
        .filter(|t| t.learnable)
        .map(|t| t.name)
        .collect();
    for (name, g) in names.iter().zip(grads.tensors()) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("gradient of {name}")));
        }
    }
    Ok((loss, grads, fwd))
}

/// Draws dropout masks from `rng` and returns the loss and exact gradients.
pub fn backward<R: RngCore + ?Sized>(
    batch: &[Sequence],
    params: &ModelParams,
    l2_weight: f64,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    let masks = draw_dropout_masks(batch, &params.arch, dropout_rate, rng);
    let (loss, grads, _) = backward_with_masks(batch, params, &masks, l2_weight)?;
    Ok((loss, grads))
}

fn sequence_backward(
    seq: &Sequence,
    fwd: &BatchForward,
    b: usize,
    params: &ModelParams,
    masks: &DropoutMasks,
    ce_scale: f64,
) -> SequenceGrads {
    let arch = &params.arch;
    let hd = arch.hidden_dim;
    let id = arch.internal_dim();
    let gru = &params.gru;
    let cache = &fwd.sequences[b];
    let base = fwd.offsets[b];

    let mut g = GruWeights::zeros(hd, id);
    let mut classifier = Matrix::zeros(NUM_CLASSES, hd);
    let mut classifier_bias = vec![0.0; NUM_CLASSES];
    let mut d_internal = vec![vec![0.0; id]; seq.len()];

    let zeros = vec![0.0; hd];
    let mut dh_next = vec![0.0; hd];
    let mut dh = vec![0.0; hd];
    let mut dh_prev = vec![0.0; hd];
    let mut da_c = vec![0.0; hd];
    let mut da_r = vec![0.0; hd];
    let mut da_z = vec![0.0; hd];
    let mut d_reset = vec![0.0; hd];

    for t in (0..seq.len()).rev() {
        let step = &cache.steps[t];
        let h_prev: &[f64] = if t == 0 { &zeros } else { &cache.steps[t - 1].h };
        let x = &fwd.internal[base + t];

        dh.copy_from_slice(&dh_next);
        if let Some(state) = seq.labels[t] {
            let p = cache.probs[t];
            let target = state.class_index();
            let dlogits = [
                (p.p_walking - if target == 0 { 1.0 } else { 0.0 }) * ce_scale,
                (p.p_standing - if target == 1 { 1.0 } else { 0.0 }) * ce_scale,
            ];
            classifier.add_outer(&dlogits, &step.h);
            axpy(1.0, &dlogits, &mut classifier_bias);
            params.classifier.matvec_t_acc(&dlogits, &mut dh);
        }

        for i in 0..hd {
            let dz = dh[i] * (step.candidate[i] - h_prev[i]);
            let dc = dh[i] * step.z[i];
            dh_prev[i] = dh[i] * (1.0 - step.z[i]);
            da_c[i] = dc * (1.0 - step.candidate[i] * step.candidate[i]);
            da_z[i] = dz * step.z[i] * (1.0 - step.z[i]);
        }
        g.w_xh.add_outer(&da_c, x);
        g.w_hh.add_outer(&da_c, &step.reset_h);
        d_reset.iter_mut().for_each(|v| *v = 0.0);
        gru.w_hh.matvec_t_acc(&da_c, &mut d_reset);
        for i in 0..hd {
            let dr = d_reset[i] * h_prev[i];
            dh_prev[i] += d_reset[i] * step.r[i];
            da_r[i] = dr * step.r[i] * (1.0 - step.r[i]);
        }
        g.w_rx.add_outer(&da_r, x);
        g.w_rh.add_outer(&da_r, h_prev);
        g.w_zx.add_outer(&da_z, x);
        g.w_zh.add_outer(&da_z, h_prev);
        gru.w_rh.matvec_t_acc(&da_r, &mut dh_prev);
        gru.w_zh.matvec_t_acc(&da_z, &mut dh_prev);

        let dx = &mut d_internal[t];
        gru.w_xh.matvec_t_acc(&da_c, dx);
        gru.w_rx.matvec_t_acc(&da_r, dx);
        gru.w_zx.matvec_t_acc(&da_z, dx);
        for (v, m) in dx.iter_mut().zip(&masks.rows[base + t]) {
            *v *= m;
        }
        std::mem::swap(&mut dh_next, &mut dh_prev);
    }

    SequenceGrads {
        gru: g,
        classifier,
        classifier_bias,
        d_internal,
    }
}
