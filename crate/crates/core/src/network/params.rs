use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::{FeatureGroup, FeatureSelection};
use crate::linalg::Matrix;

pub const NUM_CLASSES: usize = 2;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

pub const DEFAULT_EMBED_DIM: usize = 16;
pub const DEFAULT_HIDDEN_DIM: usize = 64;

/// Layer sizes and the feature groups feeding the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub selection: FeatureSelection,
    /// Enabled groups with their input widths, in input order.
    pub groups: Vec<(FeatureGroup, usize)>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Arch {
    pub fn for_selection(selection: FeatureSelection) -> Self {
        Arch {
            selection,
            groups: selection.groups(),
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
        }
    }

    /// A miniature model for gradient checks: every group 2 wide, embedding 2, hidden 3.
    pub fn tiny() -> Self {
        Arch {
            selection: FeatureSelection::All,
            groups: FeatureSelection::All
                .groups()
                .into_iter()
                .map(|(g, _)| (g, 2))
                .collect(),
            embed_dim: 2,
            hidden_dim: 3,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.groups.iter().map(|&(_, d)| d).sum()
    }

    /// Width of the internal representation `I_t`.
    pub fn internal_dim(&self) -> usize {
        self.embed_dim * self.groups.len()
    }

    /// True when the group widths are what feature extraction produces for `selection`.
    pub fn matches_features(&self) -> bool {
        self.groups == self.selection.groups()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(n: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            running_mean: vec![0.0; n],
            running_var: vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupEmbedding {
    /// `embed_dim x group_width`
    pub weight: Matrix,
    pub bn: BatchNorm,
}

/// The six recurrence matrices. `*_x` act on `I_t`, `*_h` on the hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_rx: Matrix,
    pub w_rh: Matrix,
    pub w_zx: Matrix,
    pub w_zh: Matrix,
    pub w_xh: Matrix,
    pub w_hh: Matrix,
}

impl GruWeights {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruWeights {
            w_rx: Matrix::zeros(hidden, input),
            w_rh: Matrix::zeros(hidden, hidden),
            w_zx: Matrix::zeros(hidden, input),
            w_zh: Matrix::zeros(hidden, hidden),
            w_xh: Matrix::zeros(hidden, input),
            w_hh: Matrix::zeros(hidden, hidden),
        }
    }

    pub(crate) fn named(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("gru.w_rx", &self.w_rx),
            ("gru.w_rh", &self.w_rh),
            ("gru.w_zx", &self.w_zx),
            ("gru.w_zh", &self.w_zh),
            ("gru.w_xh", &self.w_xh),
            ("gru.w_hh", &self.w_hh),
        ]
    }

    pub(crate) fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 6] {
        [
            ("gru.w_rx", &mut self.w_rx),
            ("gru.w_rh", &mut self.w_rh),
            ("gru.w_zx", &mut self.w_zx),
            ("gru.w_zh", &mut self.w_zh),
            ("gru.w_xh", &mut self.w_xh),
            ("gru.w_hh", &mut self.w_hh),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Arch,
    pub embeddings: Vec<GroupEmbedding>,
    pub gru: GruWeights,
    /// `NUM_CLASSES x hidden_dim`
    pub classifier: Matrix,
    pub classifier_bias: Vec<f64>,
}

/// A named view of one parameter tensor.
#[derive(Debug)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    /// Learned by gradient descent (as opposed to running statistics).
    pub learnable: bool,
    /// Included in the L2 penalty.
    pub regularized: bool,
}

impl ModelParams {
    pub fn zeros(arch: &Arch) -> Self {
        let e = arch.embed_dim;
        ModelParams {
            arch: arch.clone(),
            embeddings: arch
                .groups
                .iter()
                .map(|&(_, d)| GroupEmbedding {
                    weight: Matrix::zeros(e, d),
                    bn: BatchNorm::identity(e),
                })
                .collect(),
            gru: GruWeights::zeros(arch.hidden_dim, arch.internal_dim()),
            classifier: Matrix::zeros(NUM_CLASSES, arch.hidden_dim),
            classifier_bias: vec![0.0; NUM_CLASSES],
        }
    }

    /// Every stored tensor, learnable ones first in canonical order, then running statistics.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        fn tensor<'a>(name: String, shape: Vec<usize>, data: &'a [f64], learnable: bool, regularized: bool) -> TensorRef<'a> {
            TensorRef {
                name,
                shape,
                data,
                learnable,
                regularized,
            }
        }
        // mirrors learnable_mut ordering
        let mut out = Vec::new();
        let mut stats = Vec::new();
        for (emb, &(group, _)) in self.embeddings.iter().zip(&self.arch.groups) {
            let g = group.name();
            let (r, c) = emb.weight.shape();
            out.push(tensor(format!("embed.{g}.weight"), vec![r, c], emb.weight.as_slice(), true, true));
            out.push(tensor(format!("bn.{g}.gamma"), vec![r], &emb.bn.gamma, true, false));
            out.push(tensor(format!("bn.{g}.beta"), vec![r], &emb.bn.beta, true, false));
            stats.push(tensor(format!("bn.{g}.running_mean"), vec![r], &emb.bn.running_mean, false, false));
            stats.push(tensor(format!("bn.{g}.running_var"), vec![r], &emb.bn.running_var, false, false));
        }
        for (name, m) in self.gru.named() {
            let (r, c) = m.shape();
            out.push(tensor(name.to_string(), vec![r, c], m.as_slice(), true, true));
        }
        let (r, c) = self.classifier.shape();
        out.push(tensor("classifier.weight".into(), vec![r, c], self.classifier.as_slice(), true, true));
        out.push(tensor("classifier.bias".into(), vec![NUM_CLASSES], &self.classifier_bias, true, false));
        out.extend(stats);
        out
    }

    /// Mutable learnable tensors in the same order as [`ModelParams::tensors`].
    pub fn learnable_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for emb in self.embeddings.iter_mut() {
            out.push(emb.weight.as_mut_slice());
            out.push(&mut emb.bn.gamma);
            out.push(&mut emb.bn.beta);
        }
        for (_, m) in self.gru.named_mut() {
            out.push(m.as_mut_slice());
        }
        out.push(self.classifier.as_mut_slice());
        out.push(&mut self.classifier_bias);
        out
    }

    /// Mutable access to every stored tensor, in [`ModelParams::tensors`] order.
    pub fn all_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut stats: Vec<&mut [f64]> = Vec::new();
        let mut out: Vec<&mut [f64]> = Vec::new();
        for emb in self.embeddings.iter_mut() {
            out.push(emb.weight.as_mut_slice());
            out.push(&mut emb.bn.gamma);
            out.push(&mut emb.bn.beta);
            stats.push(&mut emb.bn.running_mean);
            stats.push(&mut emb.bn.running_var);
        }
        for (_, m) in self.gru.named_mut() {
            out.push(m.as_mut_slice());
        }
        out.push(self.classifier.as_mut_slice());
        out.push(&mut self.classifier_bias);
        out.extend(stats);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|t| t.learnable)
            .map(|t| t.data.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

fn glorot_fill<R: Rng + ?Sized>(m: &mut Matrix, rng: &mut R) {
    let (fan_out, fan_in) = m.shape();
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for v in m.as_mut_slice() {
        *v = rng.random_range(-bound..=bound);
    }
}

pub fn init_params_from_rng<R: Rng + ?Sized>(arch: &Arch, rng: &mut R) -> ModelParams {
    let mut params = ModelParams::zeros(arch);
    for emb in params.embeddings.iter_mut() {
        glorot_fill(&mut emb.weight, rng);
    }
    for (_, m) in params.gru.named_mut() {
        glorot_fill(m, rng);
    }
    glorot_fill(&mut params.classifier, rng);
    params
}

/// Glorot-uniform weights, identity batch norm, zero classifier bias.
pub fn init_params(arch: &Arch, seed: u64) -> ModelParams {
    init_params_from_rng(arch, &mut ChaCha8Rng::seed_from_u64(seed))
}
