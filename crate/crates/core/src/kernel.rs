//! Layerwise tangent kernels.
//!
//! For block `k` and flat position `p`:
//!
//! ```text
//! β_p = (ω/√m) o_p ⊗ 1[Wᵀ o_p > 0]                         ∈ R^{md}
//! γ_p = (ωκ/√m) (Λ_ℓ ⊗ Λ)ᵀ (diag σ_p - σ_p σ_pᵀ) Λ Σ_r w_r 1[o_pᵀ w_r > 0]  ∈ R^{d²}
//! H_pq  = ⟨β_p, β_q⟩ + ⟨γ_p, γ_q⟩,   H'_pq = ⟨β_p, β_q⟩
//! ```
//!
//! Features are stored factored (attention output plus a bitset of active
//! units for β; the two Kronecker factors for γ), so Gram entries cost
//! `O(d + m/64)` instead of `O(md)`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::data_synth::SampleSet;
use crate::error::{Error, Result};
use crate::grad::{apply_step, softmax_jacobian, GradientSet};
use crate::linalg::min_eigenpair;
use crate::model::{forward, loss, ForwardTrace, ModelState};

/// Largest `nL` for which kernels are assembled exactly.
pub const MAX_KERNEL_SIZE: usize = 512;

/// Features of one block at every flat position.
#[derive(Debug, Clone)]
pub struct LayerFeatures {
    beta_scale: f64,
    gamma_scale: f64,
    width: usize,
    /// `nL x d` attention outputs.
    attn_out: DMatrix<f64>,
    /// Active-unit bitsets, `words` u64 per position.
    active: Vec<u64>,
    words: usize,
    /// `nL x d`: the token row `Λ_ℓ` (left Kronecker factor of γ).
    token: DMatrix<f64>,
    /// `nL x d`: `Λᵀ J Λ Σ_r w_r 1[..]` (right Kronecker factor of γ).
    mixed: DMatrix<f64>,
}

impl LayerFeatures {
    pub fn positions(&self) -> usize {
        self.attn_out.nrows()
    }

    fn mask(&self, p: usize) -> &[u64] {
        &self.active[p * self.words..(p + 1) * self.words]
    }

    pub fn active_count(&self, p: usize) -> usize {
        self.mask(p).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_active(&self, p: usize, r: usize) -> bool {
        self.mask(p)[r / 64] >> (r % 64) & 1 == 1
    }

    /// Materialized `β_p`, laid out as `o ⊗ 1` (index `k m + r`).
    pub fn beta(&self, p: usize) -> DVector<f64> {
        let d = self.attn_out.ncols();
        let m = self.width;
        DVector::from_fn(d * m, |idx, _| {
            let (k, r) = (idx / m, idx % m);
            if self.is_active(p, r) {
                self.beta_scale * self.attn_out[(p, k)]
            } else {
                0.0
            }
        })
    }

    /// Materialized `γ_p`, laid out as `Λ_ℓ ⊗ v` (index `j d + k`).
    pub fn gamma(&self, p: usize) -> DVector<f64> {
        let d = self.token.ncols();
        DVector::from_fn(d * d, |idx, _| {
            self.gamma_scale * self.token[(p, idx / d)] * self.mixed[(p, idx % d)]
        })
    }

    pub fn beta_dot(&self, p: usize, q: usize) -> f64 {
        let shared: u32 = self.mask(p).iter().zip(self.mask(q)).map(|(a, b)| (a & b).count_ones()).sum();
        let o_dot = self.attn_out.row(p).dot(&self.attn_out.row(q));
        self.beta_scale * self.beta_scale * o_dot * shared as f64
    }

    pub fn gamma_dot(&self, p: usize, q: usize) -> f64 {
        let t = self.token.row(p).dot(&self.token.row(q));
        let v = self.mixed.row(p).dot(&self.mixed.row(q));
        self.gamma_scale * self.gamma_scale * t * v
    }
}

#[derive(Debug, Clone)]
pub struct FeatureVectors {
    pub layers: Vec<LayerFeatures>,
    pub time: f64,
}

pub fn features(state: &ModelState, trace: &ForwardTrace) -> Result<FeatureVectors> {
    let cfg = &state.config;
    if trace.n_layers() != cfg.n_layers || trace.state_checksum != state.checksum() {
        return Err(Error::DimMismatch("trace was not produced by this state".into()));
    }
    let (d, m, l) = (cfg.dim, cfg.width, trace.seq_len());
    let positions = trace.positions();
    let words = m.div_ceil(64);
    let beta_scale = cfg.omega / (m as f64).sqrt();
    let layers = (0..cfg.n_layers)
        .map(|k| {
            let w = &state.layers[k].w;
            let mut attn_out = DMatrix::zeros(positions, d);
            let mut token = DMatrix::zeros(positions, d);
            let mut mixed = DMatrix::zeros(positions, d);
            let mut active = vec![0u64; positions * words];
            for p in 0..positions {
                let (i, pos) = (p / l, p % l);
                let st = &trace.samples[i];
                let lam = &st.hidden[k];
                attn_out.set_row(p, &st.attn_out[k].row(pos));
                token.set_row(p, &lam.row(pos));
                let mut wsum = DVector::zeros(d);
                for r in 0..m {
                    if st.pre_act[k][(pos, r)] > 0.0 {
                        active[p * words + r / 64] |= 1 << (r % 64);
                        wsum += w.column(r);
                    }
                }
                let jac = softmax_jacobian(&trace.sigma(k, p));
                let v = lam.transpose() * jac * lam * wsum;
                mixed.set_row(p, &v.transpose());
            }
            LayerFeatures {
                beta_scale,
                gamma_scale: beta_scale * cfg.kappa,
                width: m,
                attn_out,
                active,
                words,
                token,
                mixed,
            }
        })
        .collect();
    Ok(FeatureVectors { layers, time: state.t })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `H`: both the `W` and `U` kernels.
    Full,
    /// `H'`: the `W` kernel only.
    WOnly,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Full => "full",
            KernelKind::WOnly => "w_only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub h: DMatrix<f64>,
    pub kind: KernelKind,
    /// Zero-based block index.
    pub layer: usize,
    pub time: f64,
}

/// Exact Gram assembly: the upper triangle is computed and mirrored.
pub fn assemble_kernel(fv: &FeatureVectors, layer: usize, kind: KernelKind) -> Result<KernelMatrix> {
    let lf = fv
        .layers
        .get(layer)
        .ok_or_else(|| Error::LayerMismatch(format!("no features for block {layer}")))?;
    let n = lf.positions();
    if n > MAX_KERNEL_SIZE {
        return Err(Error::KernelTooLarge(n));
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|p| {
            (p..n)
                .map(|q| {
                    let b = lf.beta_dot(p, q);
                    match kind {
                        KernelKind::Full => b + lf.gamma_dot(p, q),
                        KernelKind::WOnly => b,
                    }
                })
                .collect()
        })
        .collect();
    let mut h = DMatrix::zeros(n, n);
    for (p, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            h[(p, p + off)] = v;
            h[(p + off, p)] = v;
        }
    }
    Ok(KernelMatrix { h, kind, layer, time: fv.time })
}

pub fn lambda_min(k: &KernelMatrix) -> Result<f64> {
    Ok(min_eigenpair(&k.h)?.0)
}

/// Three estimates of `dℒ/dt` under gradient flow, and their pairwise gaps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DynamicsReport {
    /// `-Σ_ν vec(dℒ/dμ_ν)ᵀ (H_ν ⊗ I_d) vec(dℒ/dμ_ν)`.
    pub kernel_form: f64,
    /// `-Σ_ν (||dℒ/dW_ν||² + ||dℒ/dU_ν||²)`.
    pub exact_sum: f64,
    /// `(ℒ(θ - eta g) - ℒ(θ)) / eta`.
    pub measured: f64,
    pub gap_kernel_exact: f64,
    pub gap_exact_measured: f64,
    pub gap_kernel_measured: f64,
}

fn rel_gap(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Quadratic form `Σ_pq H_pq ⟨g_p, g_q⟩` for one block.
pub fn kernel_quadratic_form(k: &KernelMatrix, dmu: &DMatrix<f64>) -> f64 {
    let gram = dmu * dmu.transpose();
    k.h.component_mul(&gram).sum()
}

pub fn dynamics_check(
    state: &ModelState,
    trace: &ForwardTrace,
    ds: &SampleSet,
    grads: &GradientSet,
    eta: f64,
) -> Result<DynamicsReport> {
    if !(eta > 0.0) {
        return Err(Error::DomainError(format!("eta must be positive, got {eta}")));
    }
    let fv = features(state, trace)?;
    let mut quad = 0.0;
    for k in 0..state.config.n_layers {
        let h = assemble_kernel(&fv, k, KernelKind::Full)?;
        quad += kernel_quadratic_form(&h, &grads.dmu[k]);
    }
    let exact_sum = grads.norm_squared();
    let base = loss(trace, ds);
    let mut stepped = state.clone();
    apply_step(&mut stepped, grads, eta);
    let after = loss(&forward(&stepped, ds)?, ds);
    let measured = (after - base) / eta;
    let (kernel_form, exact_sum) = (-quad, -exact_sum);
    Ok(DynamicsReport {
        kernel_form,
        exact_sum,
        measured,
        gap_kernel_exact: rel_gap(kernel_form, exact_sum),
        gap_exact_measured: rel_gap(exact_sum, measured),
        gap_kernel_measured: rel_gap(kernel_form, measured),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelAudit {
    pub layer: usize,
    pub kind: KernelKind,
    pub time: f64,
    pub lambda_min: f64,
    pub lambda_min_initial: f64,
    /// `||H(t) - H(0)||_F`.
    pub frob_drift: f64,
    pub psd_ok: bool,
    /// `λ_min(H(t)) >= λ_min(H(0)) / 2`.
    pub half_event: bool,
    /// `λ_min(H(t)) >= λ_min(H(0)) - ||H(t) - H(0)||_F - 1e-8`.
    pub weyl_ok: bool,
}

/// Tolerance for calling a numerically assembled Gram matrix PSD.
pub const PSD_TOL: f64 = 1e-10;

pub fn perturbation_audit(h0: &KernelMatrix, ht: &KernelMatrix) -> Result<KernelAudit> {
    if h0.layer != ht.layer || h0.kind != ht.kind || h0.h.shape() != ht.h.shape() {
        return Err(Error::LayerMismatch(format!(
            "cannot compare block {} ({:?}) with block {} ({:?})",
            h0.layer, h0.kind, ht.layer, ht.kind
        )));
    }
    let l0 = lambda_min(h0)?;
    let lt = lambda_min(ht)?;
    let drift = (&ht.h - &h0.h).norm();
    Ok(KernelAudit {
        layer: ht.layer,
        kind: ht.kind,
        time: ht.time,
        lambda_min: lt,
        lambda_min_initial: l0,
        frob_drift: drift,
        psd_ok: lt >= -PSD_TOL,
        half_event: lt >= l0 / 2.0,
        weyl_ok: lt >= l0 - drift - 1e-8,
    })
}

/// Kernels for every block of `state` on `ds`.
pub fn kernels(state: &ModelState, ds: &SampleSet, kind: KernelKind) -> Result<Vec<KernelMatrix>> {
    let trace = forward(state, ds)?;
    let fv = features(state, &trace)?;
    (0..state.config.n_layers).map(|k| assemble_kernel(&fv, k, kind)).collect()
}
