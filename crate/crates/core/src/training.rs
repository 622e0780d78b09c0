//! Explicit-Euler gradient flow with uniform mini-batches.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::data_synth::{generate_dataset, NoiseModel, SampleSet, TeacherSpec};
use crate::error::{Error, Result};
use crate::grad::{apply_step, gradient, Engine};
use crate::kernel::{kernels, perturbation_audit, KernelAudit, KernelKind, KernelMatrix};
use crate::linalg::max_eigenvalue;
use crate::model::{forward, forward_single, init_model, loss, ModelState};
use crate::rng::seeded;

/// Training blows up once the loss exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    /// Total flow time.
    pub horizon: f64,
    #[serde(default = "default_fraction")]
    pub batch_fraction: f64,
    #[serde(default)]
    pub engine: Engine,
    #[serde(default = "default_probe_every")]
    pub probe_every: usize,
    #[serde(default)]
    pub batch_seed: u64,
    /// Kernel to audit against its initial value at every probe, if any.
    #[serde(default)]
    pub audit_kernel: Option<KernelKind>,
}

fn default_fraction() -> f64 {
    1.0
}

fn default_probe_every() -> usize {
    10
}

impl TrainConfig {
    pub fn new(eta: f64, horizon: f64) -> Self {
        Self {
            eta,
            horizon,
            batch_fraction: 1.0,
            engine: Engine::Exact,
            probe_every: 10,
            batch_seed: 0,
            audit_kernel: None,
        }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.eta).round() as usize
    }

    pub fn batch_size(&self, n: usize) -> usize {
        ((self.batch_fraction * n as f64).ceil() as usize).clamp(1, n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be non-negative, got {}", self.horizon)));
        }
        if self.horizon > 0.0 && self.eta > self.horizon {
            return Err(Error::Config("eta exceeds the horizon".into()));
        }
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(Error::Config(format!("batch_fraction must lie in (0, 1], got {}", self.batch_fraction)));
        }
        if self.probe_every == 0 {
            return Err(Error::Config("probe_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub step: usize,
    pub t: f64,
    pub loss: f64,
    /// Per block `sqrt(||dW||² + ||dU||²)` on the full set.
    pub grad_norms: Vec<f64>,
    /// Per block `max_r ||w_r(t) - w_r(0)||`.
    pub w_radius: Vec<f64>,
    /// Per block `||U(t) - U(0)||_F`.
    pub u_radius: Vec<f64>,
    pub audits: Vec<KernelAudit>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub epsilon: f64,
    pub probes: Vec<Probe>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> Option<f64> {
        self.probes.first().map(|p| p.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.probes.last().map(|p| p.loss)
    }

    /// Largest weight-column drift over all probes and blocks.
    pub fn max_w_radius(&self) -> f64 {
        self.probes.iter().flat_map(|p| p.w_radius.iter().copied()).fold(0.0, f64::max)
    }

    pub fn max_u_radius(&self) -> f64 {
        self.probes.iter().flat_map(|p| p.u_radius.iter().copied()).fold(0.0, f64::max)
    }
}

fn radii(init: &ModelState, now: &ModelState) -> (Vec<f64>, Vec<f64>) {
    init.layers
        .iter()
        .zip(&now.layers)
        .map(|(a, b)| {
            let dw = &b.w - &a.w;
            let w = dw.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
            (w, (&b.u - &a.u).norm())
        })
        .unzip()
}

struct Prober<'a> {
    init: ModelState,
    ds: &'a SampleSet,
    cfg: &'a TrainConfig,
    h0: Option<Vec<KernelMatrix>>,
}

impl Prober<'_> {
    fn probe(&self, state: &ModelState, step: usize) -> Result<Probe> {
        let trace = forward(state, self.ds)?;
        let l = loss(&trace, self.ds);
        let g = gradient(self.cfg.engine, state, &trace, self.ds)?;
        let (w_radius, u_radius) = radii(&self.init, state);
        let mut audits = Vec::new();
        if let (Some(kind), Some(h0)) = (self.cfg.audit_kernel, &self.h0) {
            for (k0, kt) in h0.iter().zip(kernels(state, self.ds, kind)?) {
                audits.push(perturbation_audit(k0, &kt)?);
            }
        }
        Ok(Probe { step, t: state.t, loss: l, grad_norms: g.layer_norms(), w_radius, u_radius, audits })
    }
}

/// Runs the flow, appending probes to `log` as it goes so a failed run keeps
/// everything recorded before the failure.
pub fn train_into(state: &ModelState, ds: &SampleSet, cfg: &TrainConfig, log: &mut TrainLog) -> Result<ModelState> {
    cfg.validate()?;
    state.config.validate()?;
    if ds.seq_len() != state.config.seq_len || ds.dim() != state.config.dim {
        return Err(Error::DimMismatch("dataset shape does not match the model".into()));
    }
    let h0 = match cfg.audit_kernel {
        Some(kind) => Some(kernels(state, ds, kind)?),
        None => None,
    };
    let prober = Prober { init: state.clone(), ds, cfg, h0 };
    log.epsilon = state.config.epsilon;
    let first = prober.probe(state, 0)?;
    let initial = first.loss;
    log.probes.push(first);

    let steps = cfg.steps();
    let b = cfg.batch_size(ds.n());
    let mut rng = seeded(cfg.batch_seed);
    let mut cur = state.clone();
    for step in 1..=steps {
        let batch = if b == ds.n() {
            None
        } else {
            let mut idx = sample_indices(&mut rng, ds.n(), b).into_vec();
            idx.sort_unstable();
            Some(ds.subset(&idx))
        };
        let batch_ds = batch.as_ref().unwrap_or(ds);
        let trace = match forward(&cur, batch_ds) {
            Ok(t) => t,
            Err(Error::NonFiniteActivation { .. }) => {
                return Err(Error::DivergenceDetected { t: cur.t, loss: f64::INFINITY, initial })
            }
            Err(e) => return Err(e),
        };
        let batch_loss = loss(&trace, batch_ds);
        if !batch_loss.is_finite() || batch_loss > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::DivergenceDetected { t: cur.t, loss: batch_loss, initial });
        }
        let g = gradient(cfg.engine, &cur, &trace, batch_ds)?;
        apply_step(&mut cur, &g, cfg.eta);
        cur.t = state.t + step as f64 * cfg.eta;
        if step % cfg.probe_every == 0 || step == steps {
            let p = prober.probe(&cur, step)?;
            let bad = !p.loss.is_finite() || p.loss > DIVERGENCE_FACTOR * initial.max(f64::MIN_POSITIVE);
            let (t, l) = (p.t, p.loss);
            log.probes.push(p);
            if bad {
                return Err(Error::DivergenceDetected { t, loss: l, initial });
            }
        }
    }
    Ok(cur)
}

pub fn train(state: &ModelState, ds: &SampleSet, cfg: &TrainConfig) -> Result<(ModelState, TrainLog)> {
    let mut log = TrainLog { epsilon: state.config.epsilon, probes: Vec::new() };
    let out = train_into(state, ds, cfg, &mut log)?;
    Ok((out, log))
}

/// Retries with `eta / 2` (same horizon) after each divergence, up to `max_halvings` times.
pub fn train_with_halving(
    state: &ModelState,
    ds: &SampleSet,
    cfg: &TrainConfig,
    max_halvings: usize,
) -> Result<(ModelState, TrainLog, TrainConfig)> {
    let mut cfg = cfg.clone();
    let mut tries = 0;
    loop {
        match train(state, ds, &cfg) {
            Ok((s, log)) => return Ok((s, log, cfg)),
            Err(Error::DivergenceDetected { .. }) if tries < max_halvings => {
                cfg.eta /= 2.0;
                tries += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Step size at half the Euler stability limit of the linearized flow,
/// `0.5 n / (ε² λ_max(Σ_ν H_ν))`.
pub fn suggest_eta(state: &ModelState, ds: &SampleSet) -> Result<f64> {
    let hs = kernels(state, ds, KernelKind::Full)?;
    let total = hs.iter().skip(1).fold(hs[0].h.clone(), |acc, k| acc + &k.h);
    let lmax = max_eigenvalue(&total)?;
    let eps2 = state.config.epsilon.powi(2);
    if !(lmax > 0.0) || eps2 == 0.0 {
        return Err(Error::DomainError("kernel or output scale is zero; no stable step exists".into()));
    }
    Ok(0.5 * ds.n() as f64 / (eps2 * lmax))
}

/// Rate implied by the initial kernels: `4 Σ_ν λ_min(H_ν(0)) / n`.
///
/// A loss that decays as `exp(-α ε² t)` has this `α` when the
/// kernels stay at their initial values and every block sees the output residual.
pub fn predicted_rate(state: &ModelState, ds: &SampleSet) -> Result<f64> {
    let mut total = 0.0;
    for k in kernels(state, ds, KernelKind::Full)? {
        total += crate::kernel::lambda_min(&k)?;
    }
    Ok(4.0 * total / ds.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceFit {
    /// Decay rate normalized by `ε²`.
    pub alpha_hat: f64,
    pub r2: f64,
    pub probes_used: usize,
}

/// Least-squares line through `(t, ln ℒ(t))` for probes with `t` in `window`.
pub fn fit_convergence(log: &TrainLog, window: Option<(f64, f64)>) -> Result<ConvergenceFit> {
    let (lo, hi) = window.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let pts: Vec<(f64, f64)> = log
        .probes
        .iter()
        .filter(|p| p.t >= lo && p.t <= hi && p.loss > 0.0)
        .map(|p| (p.t, p.loss.ln()))
        .collect();
    if pts.len() < 5 {
        return Err(Error::InsufficientProbes { needed: 5, got: pts.len() });
    }
    let eps2 = log.epsilon * log.epsilon;
    if eps2 == 0.0 {
        return Err(Error::DomainError("cannot normalize a rate by ε = 0".into()));
    }
    let (slope, r2) = line_fit(&pts);
    Ok(ConvergenceFit { alpha_hat: -slope / eps2, r2, probes_used: pts.len() })
}

/// Slope and coefficient of determination of an ordinary least-squares line.
/// A flat response counts as a perfect fit.
pub(crate) fn line_fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let resid: f64 = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    let r2 = if syy <= 1e-300 { 1.0 } else { 1.0 - resid / syy };
    (slope, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskEstimate {
    pub expected_risk: f64,
    pub excess_risk: f64,
    /// Monte-Carlo estimate of the risk of the teacher itself.
    pub noise_floor: f64,
    pub n_eval: usize,
    /// Standard error of `excess_risk` (paired over draws).
    pub stderr: f64,
    pub risk_stderr: f64,
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Monte-Carlo risk on `n_eval` fresh draws.
///
/// The teacher is scored on the same draws, so the excess risk is a paired
/// difference and the noise floor cancels draw by draw.
pub fn estimate_risk(
    state: &ModelState,
    teacher: &TeacherSpec,
    noise: &NoiseModel,
    n_eval: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    let (l, d) = (teacher.architecture.seq_len, teacher.architecture.dim);
    let fresh = generate_dataset(teacher, noise, n_eval, l, d, seed)?;
    let f_star = init_model(&teacher.architecture.clone().with_seed(teacher.seed));
    let mut risk = Vec::with_capacity(n_eval);
    let mut excess = Vec::with_capacity(n_eval);
    let mut floor = Vec::with_capacity(n_eval);
    for i in 0..n_eval {
        let x = fresh.input(i).as_matrix();
        let y: &DMatrix<f64> = fresh.target(i);
        let e = (forward_single(state, x)? - y).norm_squared();
        let f = (forward_single(&f_star, x)? - y).norm_squared();
        risk.push(e);
        floor.push(f);
        excess.push(e - f);
    }
    let (expected_risk, risk_stderr) = mean_and_stderr(&risk);
    let (excess_risk, stderr) = mean_and_stderr(&excess);
    let (noise_floor, _) = mean_and_stderr(&floor);
    Ok(RiskEstimate { expected_risk, excess_risk, noise_floor, n_eval, stderr, risk_stderr })
}
