//! The constructed `N`-layer decoder-only transformer.
//!
//! Block `k` (zero-based, i.e. layer `k + 1`) maps its input `Λ` (`L x d`) to
//!
//! ```text
//! S = κ Λ U Λᵀ + M                 (causal mask M)
//! σ = row-softmax(S)
//! o = σ Λ                          (row ℓ is o_ℓ = Λᵀ σ_ℓ)
//! μ = (ω / √m) ReLU(o W) A
//! Λ' = Λ + μ
//! ```
//!
//! and the model output is `ε Λ_N`, which telescopes to `ε Σ_{ν=0..N} μ_ν`
//! with `μ_0 = X`. Positional embeddings are zero.

use std::hash::{Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::SampleSet;
use crate::error::{Error, Result};
use crate::rng::seeded;

/// Additive logit for masked (future) positions.
const MASK_LOGIT: f64 = -1e30;

/// Failure probability used for the `B` factor.
pub const DEFAULT_DELTA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// MLP width `m`.
    pub width: usize,
    pub dim: usize,
    pub seq_len: usize,
    pub epsilon: f64,
    pub omega: f64,
    pub kappa: f64,
    pub seed: u64,
}

/// `B = max(sqrt(ln(L m d / δ)), 1)`.
pub fn b_factor(seq_len: usize, width: usize, dim: usize, delta: f64) -> f64 {
    ((seq_len * width * dim) as f64 / delta).ln().max(0.0).sqrt().max(1.0)
}

/// The block scale `ω = c / (N L² d^2.5 B³)` of the Good-Properties regime.
pub fn good_properties_omega(n_layers: usize, seq_len: usize, width: usize, dim: usize, c: f64) -> f64 {
    let b = b_factor(seq_len, width, dim, DEFAULT_DELTA);
    c / (n_layers as f64 * (seq_len * seq_len) as f64 * (dim as f64).powf(2.5) * b.powi(3))
}

impl ModelConfig {
    /// A configuration in the Good-Properties regime: `κ = 1/√m`, `ω` from
    /// [`good_properties_omega`] with unit constant, `ε = 1`, seed 0.
    pub fn new(n_layers: usize, width: usize, dim: usize, seq_len: usize) -> Self {
        Self {
            n_layers,
            width,
            dim,
            seq_len,
            epsilon: 1.0,
            omega: good_properties_omega(n_layers.max(1), seq_len.max(1), width.max(1), dim.max(1), 1.0),
            kappa: 1.0 / (width.max(1) as f64).sqrt(),
            seed: 0,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.omega = omega;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Same hyperparameter recipe at another width (`κ` follows `1/√m`).
    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self.kappa = 1.0 / (width as f64).sqrt();
        self
    }

    pub fn b_factor(&self) -> f64 {
        b_factor(self.seq_len, self.width, self.dim, DEFAULT_DELTA)
    }

    /// `N (m d + d²)`; the frozen `A` matrices are not counted.
    pub fn trainable_params(&self) -> usize {
        self.n_layers * (self.width * self.dim + self.dim * self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.width == 0 || self.dim == 0 || self.seq_len == 0 {
            return Err(Error::Config(format!("all model counts must be >= 1: {self:?}")));
        }
        // ε = 0 is admitted: it is the degenerate zero-output model used as a control.
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) || !positive(self.omega) || !positive(self.kappa) {
            return Err(Error::Config(format!(
                "scales must be positive: epsilon={}, omega={}, kappa={}",
                self.epsilon, self.omega, self.kappa
            )));
        }
        Ok(())
    }
}

/// Parameters of one block. `u` is `d x d`, `w` is `d x m` (columns `w_r`),
/// `a` is `m x d` with entries in `{-1, +1}` (rows `a_r`), frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub u: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layers: Vec<LayerParams>,
    /// Accumulated training time.
    pub t: f64,
}

/// Which trainable block a coordinate belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    U,
    W,
}

/// A single trainable scalar: `layers[layer].{u,w}[(row, col)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamCoord {
    pub layer: usize,
    pub block: Block,
    pub row: usize,
    pub col: usize,
}

/// Draws `U, W ~ N(0, 1)` entrywise and `A ~ Uniform{-1, +1}`.
///
/// The generator is consumed layer by layer in the order `U`, `W`, `A`, each
/// in column-major order.
pub fn init_model(config: &ModelConfig) -> ModelState {
    let mut rng = seeded(config.seed);
    let (d, m) = (config.dim, config.width);
    let layers = (0..config.n_layers)
        .map(|_| {
            let u = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let w = DMatrix::from_fn(d, m, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = DMatrix::from_fn(m, d, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
            LayerParams { u, w, a }
        })
        .collect();
    ModelState { config: config.clone(), layers, t: 0.0 }
}

impl ModelState {
    pub fn param(&self, c: ParamCoord) -> f64 {
        let l = &self.layers[c.layer];
        match c.block {
            Block::U => l.u[(c.row, c.col)],
            Block::W => l.w[(c.row, c.col)],
        }
    }

    pub fn param_mut(&mut self, c: ParamCoord) -> &mut f64 {
        let l = &mut self.layers[c.layer];
        match c.block {
            Block::U => &mut l.u[(c.row, c.col)],
            Block::W => &mut l.w[(c.row, c.col)],
        }
    }

    /// A hash of the configuration and every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let c = &self.config;
        (c.n_layers, c.width, c.dim, c.seq_len, c.seed).hash(&mut h);
        for v in [c.epsilon, c.omega, c.kappa] {
            v.to_bits().hash(&mut h);
        }
        for l in &self.layers {
            for v in l.u.iter().chain(l.w.iter()).chain(l.a.iter()) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Cached intermediates of one sample through every block.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    /// `Λ_0 .. Λ_N`, each `L x d`; `hidden[0] = X`.
    pub hidden: Vec<DMatrix<f64>>,
    /// Per block, the `L x L` attention matrix; row `ℓ` is `σ_ℓ`, zero above
    /// the diagonal.
    pub attn: Vec<DMatrix<f64>>,
    /// Per block, `L x d`; row `ℓ` is `o_ℓ`.
    pub attn_out: Vec<DMatrix<f64>>,
    /// Per block, `L x m` pre-activations `⟨o_ℓ, w_r⟩`.
    pub pre_act: Vec<DMatrix<f64>>,
    /// Per block, `L x d` token updates `μ`.
    pub mu: Vec<DMatrix<f64>>,
}

/// The forward pass over a whole sample set, indexed by the flat position
/// `p = i L + ℓ` (zero-based).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub samples: Vec<SampleTrace>,
    /// `nL x d` model outputs.
    pub outputs: DMatrix<f64>,
    pub epsilon: f64,
    pub state_checksum: u64,
    seq_len: usize,
}

impl ForwardTrace {
    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn n_layers(&self) -> usize {
        self.samples.first().map_or(0, |s| s.attn.len())
    }

    pub fn positions(&self) -> usize {
        self.n() * self.seq_len
    }

    fn split(&self, p: usize) -> (usize, usize) {
        (p / self.seq_len, p % self.seq_len)
    }

    /// `σ` of block `k` at flat position `p`, zero-padded to length `L`.
    pub fn sigma(&self, k: usize, p: usize) -> DVector<f64> {
        let (i, l) = self.split(p);
        self.samples[i].attn[k].row(l).transpose()
    }

    pub fn attn_output(&self, k: usize, p: usize) -> DVector<f64> {
        let (i, l) = self.split(p);
        self.samples[i].attn_out[k].row(l).transpose()
    }

    /// `μ_ν` at flat position `p` for `ν in 0..=N`, with `μ_0 = X_{i,ℓ}`.
    pub fn mu(&self, nu: usize, p: usize) -> DVector<f64> {
        let (i, l) = self.split(p);
        let s = &self.samples[i];
        if nu == 0 {
            s.hidden[0].row(l).transpose()
        } else {
            s.mu[nu - 1].row(l).transpose()
        }
    }

    pub fn output(&self, p: usize) -> DVector<f64> {
        self.outputs.row(p).transpose()
    }
}

fn masked_softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let l = logits.nrows();
    let mut out = DMatrix::zeros(l, l);
    for r in 0..l {
        let row: Vec<f64> = (0..l)
            .map(|c| if c <= r { logits[(r, c)] } else { logits[(r, c)] + MASK_LOGIT })
            .collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps[..=r].iter().sum();
        for c in 0..=r {
            out[(r, c)] = exps[c] / total;
        }
        // Masked weights are exactly zero; entries above the diagonal stay 0.
    }
    out
}

/// Runs one sample through every block, keeping all intermediates.
pub fn trace_sample(state: &ModelState, x: &DMatrix<f64>) -> Result<SampleTrace> {
    let cfg = &state.config;
    if x.nrows() != cfg.seq_len || x.ncols() != cfg.dim {
        return Err(Error::DimMismatch(format!(
            "model expects {}x{} inputs, got {}x{}",
            cfg.seq_len,
            cfg.dim,
            x.nrows(),
            x.ncols()
        )));
    }
    let scale = cfg.omega / (cfg.width as f64).sqrt();
    let n = cfg.n_layers;
    let mut trace = SampleTrace {
        hidden: Vec::with_capacity(n + 1),
        attn: Vec::with_capacity(n),
        attn_out: Vec::with_capacity(n),
        pre_act: Vec::with_capacity(n),
        mu: Vec::with_capacity(n),
    };
    trace.hidden.push(x.clone());
    for (k, layer) in state.layers.iter().enumerate() {
        let lam = &trace.hidden[k];
        let logits = (lam * &layer.u * lam.transpose()) * cfg.kappa;
        let sigma = masked_softmax_rows(&logits);
        let o = &sigma * lam;
        let z = &o * &layer.w;
        let mu = z.map(|v| v.max(0.0)) * &layer.a * scale;
        let next = lam + &mu;
        if !next.iter().all(|v| v.is_finite()) || !sigma.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: k + 1, sample: 0 });
        }
        trace.attn.push(sigma);
        trace.attn_out.push(o);
        trace.pre_act.push(z);
        trace.mu.push(mu);
        trace.hidden.push(next);
    }
    Ok(trace)
}

/// `F(X) = ε Λ_N` for a single input.
pub fn forward_single(state: &ModelState, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = trace_sample(state, x)?;
    Ok(t.hidden.last().expect("hidden states include the input") * state.config.epsilon)
}

pub fn forward(state: &ModelState, ds: &SampleSet) -> Result<ForwardTrace> {
    let cfg = &state.config;
    if ds.seq_len() != cfg.seq_len || ds.dim() != cfg.dim {
        return Err(Error::DimMismatch(format!(
            "model expects {}x{} samples, dataset has {}x{}",
            cfg.seq_len,
            cfg.dim,
            ds.seq_len(),
            ds.dim()
        )));
    }
    let samples: Vec<SampleTrace> = ds
        .inputs()
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            trace_sample(state, x.as_matrix()).map_err(|e| match e {
                Error::NonFiniteActivation { layer, .. } => Error::NonFiniteActivation { layer, sample: i },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let (l, d) = (cfg.seq_len, cfg.dim);
    let mut outputs = DMatrix::zeros(ds.n() * l, d);
    for (i, s) in samples.iter().enumerate() {
        outputs.rows_mut(i * l, l).copy_from(&(s.hidden[cfg.n_layers].clone() * cfg.epsilon));
    }
    Ok(ForwardTrace { samples, outputs, epsilon: cfg.epsilon, state_checksum: state.checksum(), seq_len: l })
}

/// `(1/n) ||F - Y||_F²` over the flat position matrices.
pub fn loss(trace: &ForwardTrace, ds: &SampleSet) -> f64 {
    (&trace.outputs - ds.stacked_targets()).norm_squared() / ds.n() as f64
}

/// The same loss summed sample by sample: mean of `||F(X_i) - Y_i||_F²`.
pub fn loss_samplewise(trace: &ForwardTrace, ds: &SampleSet) -> f64 {
    let l = trace.seq_len();
    let total: f64 = (0..ds.n())
        .map(|i| (trace.outputs.rows(i * l, l) - ds.target(i)).norm_squared())
        .sum();
    total / ds.n() as f64
}
