//! The combiner head: composes a reference image embedding with a condition
//! text embedding into a query vector scored against target embeddings.
//!
//! g(x, e) = normalize(λ·h1(x) + (1 − λ)·h2(e) + h3([x; e])), λ = σ(h4([x; e]))

mod checkpoint;
mod loss;
mod mlp;
mod train;

use thiserror::Error;

use crate::rng::derive_rng;


pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, read_checkpoint, write_checkpoint, CheckpointError};
pub use train::{template_validator, train, train_on_vectors, LogRow, TrainConfig, TrainLog, TrainOutput, TrainingSet};
pub use loss::{backward, batch_loss, info_nce_loss, logit_gradient, loss_and_gradients, Gradients, Sample};
pub use mlp::{Layer, Mlp, MlpCache};


#[derive(Debug, Error)]
pub enum CombinerError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing {kind} embedding for {id:?}")]
    MissingEmbedding { kind: String, id: String },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("validation: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinerParams {
    pub dim: usize,
    pub h1: Mlp,
    pub h2: Mlp,
    pub h3: Mlp,
    pub h4: Mlp,
    /// When set, λ = σ(h4(·)); otherwise the raw h4 output is used.
    pub squash_lambda: bool,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub c1: MlpCache,
    pub c2: MlpCache,
    pub c3: MlpCache,
    pub c4: MlpCache,
    pub lambda: f64,
    pub norm: f64,
    pub g: Vec<f64>,
}

impl CombinerParams {
    /// Two-layer MLPs with hidden width `hidden_mult * dim`, initialized
    /// uniformly in ±1/sqrt(fan_in).
    pub fn init(dim: usize, hidden_mult: usize, seed: u64, squash_lambda: bool) -> Self {
        let hidden = (hidden_mult * dim).max(1);
        let mk = |label: &str, dims: &[usize]| {
            let mut rng = derive_rng(seed, &["combiner-init", label]);
            Mlp::init(dims, &mut rng)
        };
        Self {
            dim,
            h1: mk("h1", &[dim, hidden, dim]),
            h2: mk("h2", &[dim, hidden, dim]),
            h3: mk("h3", &[2 * dim, hidden, dim]),
            h4: mk("h4", &[2 * dim, hidden, 1]),
            squash_lambda,
        }
    }

    /// Builds from explicit MLPs, checking their widths against `dim`.
    pub fn from_parts(
        dim: usize,
        h1: Mlp,
        h2: Mlp,
        h3: Mlp,
        h4: Mlp,
        squash_lambda: bool,
    ) -> Result<Self, CombinerError> {
        let expect = |m: &Mlp, i: usize, o: usize| {
            if m.input_dim() != i {
                Err(CombinerError::DimensionMismatch { expected: i, got: m.input_dim() })
            } else if m.output_dim() != o {
                Err(CombinerError::DimensionMismatch { expected: o, got: m.output_dim() })
            } else {
                Ok(())
            }
        };
        expect(&h1, dim, dim)?;
        expect(&h2, dim, dim)?;
        expect(&h3, 2 * dim, dim)?;
        expect(&h4, 2 * dim, 1)?;
        Ok(Self { dim, h1, h2, h3, h4, squash_lambda })
    }

    pub fn mlps(&self) -> [&Mlp; 4] {
        [&self.h1, &self.h2, &self.h3, &self.h4]
    }

    pub fn mlps_mut(&mut self) -> [&mut Mlp; 4] {
        [&mut self.h1, &mut self.h2, &mut self.h3, &mut self.h4]
    }

    /// Every parameter tensor in a fixed order: per MLP, per layer, weight then bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.mlps().into_iter().flat_map(|m| m.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlps_mut().into_iter().flat_map(|m| m.tensors_mut()).collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        ["h1", "h2", "h3", "h4"]
            .iter()
            .zip(self.mlps())
            .flat_map(|(n, m)| {
                (0..m.layers.len())
                    .flat_map(move |l| [format!("{n}.{l}.weight"), format!("{n}.{l}.bias")])
            })
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, x_r: &[f64], e: &[f64]) -> Result<(), CombinerError> {
        for v in [x_r, e] {
            if v.len() != self.dim {
                return Err(CombinerError::DimensionMismatch { expected: self.dim, got: v.len() });
            }
        }
        Ok(())
    }

    pub fn forward_cached(&self, x_r: &[f64], e: &[f64]) -> Result<ForwardCache, CombinerError> {
        self.check_inputs(x_r, e)?;
        let z: Vec<f64> = x_r.iter().chain(e).copied().collect();
        let c1 = self.h1.forward_cached(x_r);
        let c2 = self.h2.forward_cached(e);
        let c3 = self.h3.forward_cached(&z);
        let c4 = self.h4.forward_cached(&z);
        let raw = c4.output()[0];
        let lambda = if self.squash_lambda { sigmoid(raw) } else { raw };
        let u: Vec<f64> = (0..self.dim)
            .map(|k| lambda * c1.output()[k] + (1.0 - lambda) * c2.output()[k] + c3.output()[k])
            .collect();
        let norm = dot(&u, &u).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(CombinerError::NonFinite(format!("combined vector norm {norm}")));
        }
        let g = u.iter().map(|v| v / norm).collect();
        Ok(ForwardCache { c1, c2, c3, c4, lambda, norm, g })
    }

    /// The unit-norm query vector g(x_R, e).
    pub fn forward(&self, x_r: &[f64], e: &[f64]) -> Result<Vec<f64>, CombinerError> {
        Ok(self.forward_cached(x_r, e)?.g)
    }
}

pub fn combiner_forward(x_r: &[f64], e: &[f64], params: &CombinerParams) -> Result<Vec<f64>, CombinerError> {
    params.forward(x_r, e)
}

/// f(target; reference, condition) = g · x_T.
pub fn conditional_score(x_t: &[f64], g: &[f64]) -> Result<f64, CombinerError> {
    if x_t.len() != g.len() {
        return Err(CombinerError::DimensionMismatch { expected: g.len(), got: x_t.len() });
    }
    Ok(dot(x_t, g))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
