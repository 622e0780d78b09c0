//! Gradient engines for the squared loss.
//!
//! * [`grad_exact`]: reverse mode through the implemented forward pass, every
//!   cross-token and cross-layer path included.
//! * [`grad_paper`]: the layerwise analytic form, where the adjoint of each
//!   token update is `(2ε/n)(I + diag G)(F - Y)` with a diagonal correction `G`
//!   accumulated from the layer above, and `G = 0` at the top.
//! * [`grad_fd`]: central differences, the independent oracle.
//!
//! All engines treat `ReLU'(0) = 0`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::SampleSet;
use crate::error::{Error, Result};
use crate::model::{forward, Block, ForwardTrace, ModelState, ParamCoord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    #[default]
    Exact,
    Paper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub du: DMatrix<f64>,
    pub dw: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
    /// Per block, the `nL x d` adjoint of its token update `μ`.
    pub dmu: Vec<DMatrix<f64>>,
    /// Per block, the `nL x d` diagonal corrections; only the analytic engine
    /// produces them.
    pub correction: Option<Vec<DMatrix<f64>>>,
}

impl GradientSet {
    /// Squared norm over every trainable parameter.
    pub fn norm_squared(&self) -> f64 {
        self.layers.iter().map(|l| l.du.norm_squared() + l.dw.norm_squared()).sum()
    }

    pub fn layer_norms(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| (l.du.norm_squared() + l.dw.norm_squared()).sqrt())
            .collect()
    }

    pub fn get(&self, c: ParamCoord) -> f64 {
        let l = &self.layers[c.layer];
        match c.block {
            Block::U => l.du[(c.row, c.col)],
            Block::W => l.dw[(c.row, c.col)],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.du.iter().chain(l.dw.iter()).all(|v| v.is_finite()))
            && self.dmu.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// `θ ← θ - eta * grad` on the trainable blocks; `A` is untouched.
pub fn apply_step(state: &mut ModelState, grads: &GradientSet, eta: f64) {
    for (layer, g) in state.layers.iter_mut().zip(&grads.layers) {
        layer.u -= &g.du * eta;
        layer.w -= &g.dw * eta;
    }
}

fn check_trace(state: &ModelState, trace: &ForwardTrace, ds: &SampleSet) -> Result<()> {
    if trace.n() != ds.n() || trace.seq_len() != ds.seq_len() || trace.n_layers() != state.config.n_layers {
        return Err(Error::DimMismatch("trace, state and dataset disagree in shape".into()));
    }
    if ds.dim() != state.config.dim {
        return Err(Error::DimMismatch("dataset and state disagree in embedding dim".into()));
    }
    Ok(())
}

/// `(2ε/n)(F - Y)` for one sample, `L x d`.
fn output_adjoint(state: &ModelState, trace: &ForwardTrace, ds: &SampleSet, i: usize) -> DMatrix<f64> {
    let l = trace.seq_len();
    let coef = 2.0 * state.config.epsilon / ds.n() as f64;
    (trace.outputs.rows(i * l, l) - ds.target(i)) * coef
}

struct SampleGrad {
    du: Vec<DMatrix<f64>>,
    dw: Vec<DMatrix<f64>>,
    dmu: Vec<DMatrix<f64>>,
}

fn backprop_sample(state: &ModelState, trace: &ForwardTrace, ds: &SampleSet, i: usize) -> SampleGrad {
    let cfg = &state.config;
    let st = &trace.samples[i];
    let scale = cfg.omega / (cfg.width as f64).sqrt();
    let n_layers = cfg.n_layers;
    let mut du = vec![DMatrix::zeros(0, 0); n_layers];
    let mut dw = vec![DMatrix::zeros(0, 0); n_layers];
    let mut dmu = vec![DMatrix::zeros(0, 0); n_layers];

    let mut g = output_adjoint(state, trace, ds, i);
    for k in (0..n_layers).rev() {
        let layer = &state.layers[k];
        let lam = &st.hidden[k];
        let sigma = &st.attn[k];
        let o = &st.attn_out[k];
        let z = &st.pre_act[k];
        dmu[k] = g.clone();

        let mut dz = (&g * layer.a.transpose()) * scale;
        dz.zip_apply(z, |v, zz| {
            if zz <= 0.0 {
                *v = 0.0
            }
        });
        dw[k] = o.transpose() * &dz;
        let d_o = &dz * layer.w.transpose();

        let dp = &d_o * lam.transpose();
        let l = sigma.nrows();
        let mut ds_logits = DMatrix::zeros(l, l);
        for r in 0..l {
            let inner: f64 = (0..=r).map(|c| sigma[(r, c)] * dp[(r, c)]).sum();
            for c in 0..=r {
                ds_logits[(r, c)] = sigma[(r, c)] * (dp[(r, c)] - inner);
            }
        }
        du[k] = lam.transpose() * &ds_logits * lam * cfg.kappa;
        let lam_u_t = lam * layer.u.transpose();
        let lam_u = lam * &layer.u;
        let d_lam = &g
            + sigma.transpose() * &d_o
            + (&ds_logits * lam_u_t + ds_logits.transpose() * lam_u) * cfg.kappa;
        g = d_lam;
    }
    SampleGrad { du, dw, dmu }
}

/// Exact reverse-mode gradient of `loss ∘ forward`.
pub fn grad_exact(state: &ModelState, trace: &ForwardTrace, ds: &SampleSet) -> Result<GradientSet> {
    check_trace(state, trace, ds)?;
    let per_sample: Vec<SampleGrad> =
        (0..ds.n()).into_par_iter().map(|i| backprop_sample(state, trace, ds, i)).collect();
    Ok(reduce(state, trace, per_sample, None))
}

fn reduce(
    state: &ModelState,
    trace: &ForwardTrace,
    per_sample: Vec<SampleGrad>,
    correction: Option<Vec<DMatrix<f64>>>,
) -> GradientSet {
    let cfg = &state.config;
    let (d, m, l) = (cfg.dim, cfg.width, trace.seq_len());
    let mut layers: Vec<LayerGrad> = (0..cfg.n_layers)
        .map(|_| LayerGrad { du: DMatrix::zeros(d, d), dw: DMatrix::zeros(d, m) })
        .collect();
    let mut dmu = vec![DMatrix::zeros(trace.positions(), d); cfg.n_layers];
    // Fixed summation order over samples keeps the result bit-stable.
    for (i, sg) in per_sample.into_iter().enumerate() {
        for k in 0..cfg.n_layers {
            layers[k].du += &sg.du[k];
            layers[k].dw += &sg.dw[k];
            dmu[k].rows_mut(i * l, l).copy_from(&sg.dmu[k]);
        }
    }
    GradientSet { layers, dmu, correction }
}

/// `Σ_r ⟨g, a_r⟩ w_r 1{z_r > 0}` for one position of block `k`.
fn gated_readback(state: &ModelState, trace: &ForwardTrace, k: usize, i: usize, pos: usize, g: &DVector<f64>) -> DVector<f64> {
    let layer = &state.layers[k];
    let z = &trace.samples[i].pre_act[k];
    let coeffs = &layer.a * g;
    let mut v = DVector::zeros(state.config.dim);
    for r in 0..state.config.width {
        if z[(pos, r)] > 0.0 {
            v.axpy(coeffs[r], &layer.w.column(r), 1.0);
        }
    }
    v
}

/// `diag(σ) - σσᵀ` for a zero-padded attention row.
pub(crate) fn softmax_jacobian(sigma: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(sigma) - sigma * sigma.transpose()
}

/// Layerwise analytic gradient.
///
/// The correction for block `k < N-1` is read from the block that consumes its
/// output (`k + 1`): its attention row, its input `Λ_k`, its `U`, `W`, `A`, and
/// the adjoint already computed for it.
pub fn grad_paper(state: &ModelState, trace: &ForwardTrace, ds: &SampleSet) -> Result<GradientSet> {
    check_trace(state, trace, ds)?;
    let cfg = &state.config;
    let (d, l, n_layers) = (cfg.dim, trace.seq_len(), cfg.n_layers);
    let positions = trace.positions();
    let scale = cfg.omega / (cfg.width as f64).sqrt();
    let coef = 2.0 * cfg.epsilon / ds.n() as f64;
    let resid = &trace.outputs - ds.stacked_targets();

    let mut dmu = vec![DMatrix::zeros(positions, d); n_layers];
    let mut corr = vec![DMatrix::zeros(positions, d); n_layers];
    dmu[n_layers - 1] = &resid * coef;
    for k in (0..n_layers.saturating_sub(1)).rev() {
        let up = k + 1;
        for p in 0..positions {
            let (i, pos) = (p / l, p % l);
            let lam = &trace.samples[i].hidden[up];
            let sigma = trace.sigma(up, p);
            let jac = softmax_jacobian(&sigma);
            let mut half = DMatrix::<f64>::identity(l, l);
            half[(pos, pos)] = 0.5;
            let mixer = DMatrix::<f64>::identity(d, d) * sigma[pos]
                + &state.layers[up].u * lam.transpose() * half * jac * lam * cfg.kappa;
            let g_up = dmu[up].row(p).transpose();
            let v = gated_readback(state, trace, up, i, pos, &g_up);
            let gcorr = mixer * v * scale;
            let r = resid.row(p).transpose();
            let row = (&r + gcorr.component_mul(&r)) * coef;
            dmu[k].set_row(p, &row.transpose());
            corr[k].set_row(p, &gcorr.transpose());
        }
    }

    let per_sample: Vec<SampleGrad> = (0..ds.n())
        .into_par_iter()
        .map(|i| {
            let st = &trace.samples[i];
            let mut du = Vec::with_capacity(n_layers);
            let mut dw = Vec::with_capacity(n_layers);
            let mut dmu_s = Vec::with_capacity(n_layers);
            for (k, layer) in state.layers.iter().enumerate() {
                let g = dmu[k].rows(i * l, l).into_owned();
                let mut dz = (&g * layer.a.transpose()) * scale;
                dz.zip_apply(&st.pre_act[k], |v, zz| {
                    if zz <= 0.0 {
                        *v = 0.0
                    }
                });
                dw.push(st.attn_out[k].transpose() * &dz);
                let lam = &st.hidden[k];
                let mut du_k = DMatrix::zeros(d, d);
                for pos in 0..l {
                    let p = i * l + pos;
                    let v = gated_readback(state, trace, k, i, pos, &dmu[k].row(p).transpose());
                    let jac = softmax_jacobian(&trace.sigma(k, p));
                    let right = lam.transpose() * jac * lam * v;
                    du_k += lam.row(pos).transpose() * right.transpose();
                }
                du.push(du_k * (scale * cfg.kappa));
                dmu_s.push(g);
            }
            SampleGrad { du, dw, dmu: dmu_s }
        })
        .collect();
    let mut out = reduce(state, trace, per_sample, Some(corr));
    out.dmu = dmu;
    Ok(out)
}

pub fn gradient(engine: Engine, state: &ModelState, trace: &ForwardTrace, ds: &SampleSet) -> Result<GradientSet> {
    match engine {
        Engine::Exact => grad_exact(state, trace, ds),
        Engine::Paper => grad_paper(state, trace, ds),
    }
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// `ℒ(plus) - ℒ(minus)` without subtracting two nearly equal losses.
///
/// With `D = F₊ - F₋` accumulated from the per-block token updates and
/// `S = F₊ + F₋ - 2Y`, the difference is `⟨D, S⟩ / n`. When the updates are
/// small next to the residual stream (small `ω`), this keeps the digits that a
/// plain subtraction of the two losses would cancel.
fn loss_difference(plus: &ModelState, minus: &ModelState, ds: &SampleSet) -> Result<f64> {
    let (tp, tm) = (forward(plus, ds)?, forward(minus, ds)?);
    let eps = plus.config.epsilon;
    let l = ds.seq_len();
    let mut total = 0.0;
    for i in 0..ds.n() {
        let (sp, sm) = (&tp.samples[i], &tm.samples[i]);
        let mut d = &sp.mu[0] - &sm.mu[0];
        for k in 1..sp.mu.len() {
            d += &sp.mu[k] - &sm.mu[k];
        }
        let s = tp.outputs.rows(i * l, l) + tm.outputs.rows(i * l, l) - ds.target(i) * 2.0;
        total += eps * d.component_mul(&s).sum();
    }
    Ok(total / ds.n() as f64)
}

/// Central-difference derivative of the loss along each coordinate.
pub fn grad_fd(state: &ModelState, ds: &SampleSet, coords: &[ParamCoord], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::DomainError(format!("finite-difference step must be positive, got {h}")));
    }
    coords
        .par_iter()
        .map(|&c| {
            let (mut plus, mut minus) = (state.clone(), state.clone());
            let x = state.param(c);
            *plus.param_mut(c) = x + h;
            *minus.param_mut(c) = x - h;
            Ok(loss_difference(&plus, &minus, ds)? / (2.0 * h))
        })
        .collect()
}

fn activation_pattern(state: &ModelState, ds: &SampleSet) -> Result<Vec<bool>> {
    let tr = forward(state, ds)?;
    Ok(tr
        .samples
        .iter()
        .flat_map(|s| s.pre_act.iter().flat_map(|z| z.iter().map(|v| *v > 0.0)))
        .collect())
}

/// Whether moving `c` by `±radius` flips any ReLU gate.
pub fn near_kink(state: &ModelState, ds: &SampleSet, c: ParamCoord, radius: f64) -> Result<bool> {
    let base = activation_pattern(state, ds)?;
    let mut s = state.clone();
    let x = s.param(c);
    for shift in [radius, -radius] {
        *s.param_mut(c) = x + shift;
        if activation_pattern(&s, ds)? != base {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Relative discrepancy `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = a.norm().max(b.norm());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).norm() / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockDiscrepancy {
    pub layer: usize,
    pub block: &'static str,
    pub norm_exact: f64,
    pub norm_paper: f64,
    pub rel_discrepancy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub records: Vec<BlockDiscrepancy>,
}

impl DivergenceReport {
    pub fn max_discrepancy(&self, block: &str) -> f64 {
        self.records
            .iter()
            .filter(|r| r.block == block)
            .map(|r| r.rel_discrepancy)
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            let _ = writeln!(
                s,
                "layer={} block={} norm_exact={:.6e} norm_paper={:.6e} rel_discrepancy={:.6e}",
                r.layer, r.block, r.norm_exact, r.norm_paper, r.rel_discrepancy
            );
        }
        s
    }
}

/// Per-layer relative Frobenius gap between the analytic and exact engines,
/// for the `U`, `W`, and token-update adjoint blocks. Layers are one-based.
pub fn grad_divergence_report(state: &ModelState, trace: &ForwardTrace, ds: &SampleSet) -> Result<DivergenceReport> {
    let exact = grad_exact(state, trace, ds)?;
    let paper = grad_paper(state, trace, ds)?;
    let mut records = Vec::new();
    for k in 0..state.config.n_layers {
        let pairs: [(&'static str, &DMatrix<f64>, &DMatrix<f64>); 3] = [
            ("U", &exact.layers[k].du, &paper.layers[k].du),
            ("W", &exact.layers[k].dw, &paper.layers[k].dw),
            ("dmu", &exact.dmu[k], &paper.dmu[k]),
        ];
        for (block, e, p) in pairs {
            records.push(BlockDiscrepancy {
                layer: k + 1,
                block,
                norm_exact: e.norm(),
                norm_paper: p.norm(),
                rel_discrepancy: rel_frobenius(e, p),
            });
        }
    }
    Ok(DivergenceReport { records })
}

/// All coordinates of one block, row-major.
pub fn block_coords(state: &ModelState, layer: usize, block: Block) -> Vec<ParamCoord> {
    let (rows, cols) = match block {
        Block::U => state.layers[layer].u.shape(),
        Block::W => state.layers[layer].w.shape(),
    };
    (0..rows)
        .flat_map(|row| (0..cols).map(move |col| ParamCoord { layer, block, row, col }))
        .collect()
}

/// One coordinate of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdRecord {
    pub coord: ParamCoord,
    pub analytic: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
    pub near_kink: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdSettings {
    /// Coordinates sampled per `(layer, block)`; smaller blocks are used whole.
    pub per_block: usize,
    pub h: f64,
    pub kink_radius: f64,
    pub seed: u64,
    /// Relative-error denominators are floored at this fraction of the block's
    /// largest finite-difference magnitude.
    pub floor_fraction: f64,
}

impl Default for FdSettings {
    fn default() -> Self {
        Self { per_block: 64, h: 1e-5, kink_radius: 1e-4, seed: 0, floor_fraction: 1e-6 }
    }
}

/// Compares `analytic` with central differences on sampled coordinates of every block.
pub fn fd_battery(state: &ModelState, ds: &SampleSet, analytic: &GradientSet, s: &FdSettings) -> Result<Vec<FdRecord>> {
    let mut rng = crate::rng::seeded(s.seed);
    let mut out = Vec::new();
    for layer in 0..state.config.n_layers {
        for block in [Block::U, Block::W] {
            let all = block_coords(state, layer, block);
            let take = s.per_block.min(all.len());
            let mut idx = rand::seq::index::sample(&mut rng, all.len(), take).into_vec();
            idx.sort_unstable();
            let coords: Vec<ParamCoord> = idx.into_iter().map(|i| all[i]).collect();
            let fd = grad_fd(state, ds, &coords, s.h)?;
            let kinks = coords
                .par_iter()
                .map(|&c| near_kink(state, ds, c, s.kink_radius))
                .collect::<Result<Vec<_>>>()?;
            let floor = s.floor_fraction * fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for ((c, f), k) in coords.into_iter().zip(fd).zip(kinks) {
                let a = analytic.get(c);
                out.push(FdRecord { coord: c, analytic: a, finite_difference: f, rel_error: relative_error(a, f, floor), near_kink: k });
            }
        }
    }
    Ok(out)
}

/// Largest relative error over coordinates away from ReLU kinks.
pub fn fd_max_error(records: &[FdRecord]) -> f64 {
    records.iter().filter(|r| !r.near_kink).map(|r| r.rel_error).fold(0.0, f64::max)
}
