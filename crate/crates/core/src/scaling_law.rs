//! Closed-form scaling algebra and two-regime curve fitting.
//!
//! Notation: `M` model size, `Nd` dataset size, `T` training time,
//! `C = M·T·Nd` compute, `ξ` noise level. Constants hidden inside order
//! statements are explicit parameters that default to 1.

use std::f64::consts::E;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::line_fit;

pub fn model_size(n_layers: u64, width: u64, dim: u64) -> u64 {
    n_layers * (width * dim + dim * dim)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetTriple {
    pub model_size: f64,
    pub data_size: f64,
    pub time: f64,
}

impl BudgetTriple {
    pub fn new(model_size: f64, data_size: f64, time: f64) -> Result<Self> {
        if !(model_size > 0.0 && data_size > 0.0 && time >= 0.0) {
            return Err(Error::DomainError("budget components must be positive".into()));
        }
        Ok(Self { model_size, data_size, time })
    }

    pub fn compute(&self) -> f64 {
        self.model_size * self.time * self.data_size
    }
}

/// Principal branch of the Lambert W function.
pub fn lambert_w0(x: f64) -> Result<f64> {
    let branch = -1.0 / E;
    if x.is_nan() || x < branch {
        return Err(Error::DomainError(format!("W0 is undefined at {x}")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == f64::INFINITY {
        return Ok(f64::INFINITY);
    }
    let mut w = if x < -0.3 {
        // Series about the branch point.
        let p = (2.0 * (E * x + 1.0)).max(0.0).sqrt();
        -1.0 + p - p * p / 3.0
    } else if x < 3.0 {
        (1.0 + x).ln().max(-0.5) * 0.9
    } else {
        let l1 = x.ln();
        let l2 = l1.ln();
        l1 - l2 + l2 / l1
    };
    for _ in 0..100 {
        let ew = w.exp();
        let f = w * ew - x;
        let wp1 = w + 1.0;
        if wp1.abs() < 1e-300 {
            break;
        }
        let denom = ew * wp1 - (w + 2.0) * f / (2.0 * wp1);
        let step = f / denom;
        w -= step;
        if step.abs() <= 1e-16 * (1.0 + w.abs()) {
            break;
        }
    }
    Ok(w)
}

/// Compute above which the data-limited regime applies:
/// `Nd⁶ ln(Nd L d / ξ²) / ξ²`.
pub fn stage_threshold(data_size: f64, seq_len: f64, dim: f64, xi: f64) -> Result<f64> {
    if !(xi > 0.0) {
        return Err(Error::DomainError("ξ must be positive".into()));
    }
    let arg = data_size * seq_len * dim / (xi * xi);
    if !(arg > 1.0) {
        return Err(Error::DomainError(format!("log argument {arg} must exceed 1")));
    }
    Ok(data_size.powi(6) * arg.ln() / (xi * xi))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "I")]
    ComputeStarved,
    #[serde(rename = "II")]
    DataLimited,
}

impl Stage {
    pub fn label(self) -> &'static str {
        match self {
            Stage::ComputeStarved => "I",
            Stage::DataLimited => "II",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageParams {
    pub xi: f64,
    pub seq_len: f64,
    pub dim: f64,
    /// Convergence rate.
    pub alpha: f64,
    /// Initial loss.
    pub loss0: f64,
    /// Leading constant of the compute-starved bound.
    pub c_const: f64,
}

impl StageParams {
    pub fn new(xi: f64, seq_len: f64, dim: f64) -> Self {
        Self { xi, seq_len, dim, alpha: 1.0, loss0: 1.0, c_const: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageBound {
    pub stage: Stage,
    pub threshold: f64,
    pub bound: f64,
    /// Compute-optimal dataset size at this budget's compute.
    pub optimal_data_size: f64,
    pub params: StageParams,
}

pub fn stage_one_bound(compute: f64, data_size: f64, p: &StageParams) -> f64 {
    p.c_const * (-p.alpha * p.xi * p.xi * compute / data_size.powi(6)).exp() * p.loss0
}

/// `ξ^{5/3} (C / W(C/ξ¹⁰))^{-1/6}`.
pub fn stage_two_bound(compute: f64, xi: f64) -> Result<f64> {
    if !(compute > 0.0 && xi > 0.0) {
        return Err(Error::DomainError("stage II needs positive compute and ξ".into()));
    }
    let w = lambert_w0(compute / xi.powi(10))?;
    Ok(xi.powf(5.0 / 3.0) * (compute / w).powf(-1.0 / 6.0))
}

/// `(C ξ² / W(C/ξ¹⁰))^{1/6}`.
pub fn optimal_data_size(compute: f64, xi: f64) -> Result<f64> {
    if !(compute > 0.0 && xi > 0.0) {
        return Err(Error::DomainError("optimal size needs positive compute and ξ".into()));
    }
    let w = lambert_w0(compute / xi.powi(10))?;
    Ok((compute * xi * xi / w).powf(1.0 / 6.0))
}

pub fn stage_bounds(b: &BudgetTriple, p: &StageParams) -> Result<StageBound> {
    let c = b.compute();
    let threshold = stage_threshold(b.data_size, p.seq_len, p.dim, p.xi)?;
    let (stage, bound) = if c > threshold {
        (Stage::DataLimited, stage_two_bound(c, p.xi)?)
    } else {
        (Stage::ComputeStarved, stage_one_bound(c, b.data_size, p))
    };
    let optimal_data_size = if c > 0.0 { optimal_data_size(c, p.xi)? } else { 0.0 };
    Ok(StageBound { stage, threshold, bound, optimal_data_size, params: *p })
}

/// `(4/M + ξ)/M + L d ξ / Nd`.
pub fn generalization_bound(model_size: f64, data_size: f64, seq_len: f64, dim: f64, xi: f64) -> f64 {
    (4.0 / model_size + xi) / model_size + seq_len * dim * xi / data_size
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum SingleLaw {
    /// Swept variable: training time.
    Time { epsilon: f64, xi: f64, data_size: f64, floor_const: f64 },
    /// Swept variable: dataset size.
    Data { xi: f64, floor_const: f64 },
    /// Swept variable: model size; valid while `M < Nd^{3/(2ζ)}`.
    Model { xi: f64, zeta: f64, data_size: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LawPoint {
    pub x: f64,
    pub bound: f64,
    pub valid: bool,
}

pub fn model_law_limit(data_size: f64, zeta: f64) -> f64 {
    data_size.powf(3.0 / (2.0 * zeta))
}

pub fn single_law(law: &SingleLaw, grid: &[f64]) -> Result<Vec<LawPoint>> {
    if let SingleLaw::Model { zeta, .. } = law {
        if !(*zeta > 0.0 && *zeta < 1.0 / 3.0) {
            return Err(Error::DomainError(format!("ζ = {zeta} outside (0, 1/3)")));
        }
    }
    Ok(grid
        .iter()
        .map(|&x| match *law {
            SingleLaw::Time { epsilon, xi, data_size, floor_const } => LawPoint {
                x,
                bound: (-(epsilon * xi).powi(2) * x / data_size.powi(2)).exp() + floor_const * xi * xi / data_size,
                valid: true,
            },
            SingleLaw::Data { xi, floor_const } => LawPoint { x, bound: floor_const * xi * xi / x, valid: true },
            SingleLaw::Model { xi, zeta, data_size } => {
                LawPoint { x, bound: xi * xi * x.powf(-zeta), valid: x < model_law_limit(data_size, zeta) }
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitResult {
    /// Decay rate of the exponential segment, `risk ∝ exp(-rate C)`.
    pub exp_rate: Option<f64>,
    /// Exponent of the power-law segment, `risk ∝ C^exp`.
    pub power_exp: Option<f64>,
    /// Transition compute; the first point's compute when the whole curve is a power law.
    pub knee_c: Option<f64>,
    pub r2_exp: Option<f64>,
    pub r2_power: Option<f64>,
    /// Number of points assigned to the exponential segment.
    pub split: usize,
    pub sse: f64,
}

const MIN_SEGMENT: usize = 3;

fn sse_of(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let (slope, r2) = line_fit(pts);
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sse = pts.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    (slope, r2, sse)
}

/// Exponential-then-power segmented fit, residuals measured in `ln risk`.
pub fn fit_two_stage(curve: &[(f64, f64)]) -> Result<FitResult> {
    if curve.len() < 8 {
        return Err(Error::InsufficientSpan(format!("{} points, need at least 8", curve.len())));
    }
    if curve.iter().any(|&(c, r)| !(c > 0.0 && r > 0.0)) {
        return Err(Error::DomainError("compute and risk must be positive".into()));
    }
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let span = pts.last().unwrap().0 / pts[0].0;
    if span < 100.0 {
        return Err(Error::InsufficientSpan(format!("compute spans a factor {span:.3}, need 100")));
    }
    let n = pts.len();
    let lin: Vec<(f64, f64)> = pts.iter().map(|&(c, r)| (c, r.ln())).collect();
    let log: Vec<(f64, f64)> = pts.iter().map(|&(c, r)| (c.ln(), r.ln())).collect();
    let mut best: Option<FitResult> = None;
    for k in 0..=n {
        let left_ok = k == 0 || k >= MIN_SEGMENT;
        let right_ok = n - k == 0 || n - k >= MIN_SEGMENT;
        if !(left_ok && right_ok) {
            continue;
        }
        let left = (k > 0).then(|| sse_of(&lin[..k]));
        let right = (k < n).then(|| sse_of(&log[k..]));
        let sse = left.map_or(0.0, |l| l.2) + right.map_or(0.0, |r| r.2);
        if best.is_some_and(|b| b.sse <= sse) {
            continue;
        }
        let knee_c = match (k, k < n) {
            (0, _) => Some(pts[0].0),
            (_, true) => Some((pts[k - 1].0 * pts[k].0).sqrt()),
            (_, false) => None,
        };
        best = Some(FitResult {
            exp_rate: left.map(|l| -l.0),
            power_exp: right.map(|r| r.0),
            knee_c,
            r2_exp: left.map(|l| l.1),
            r2_power: right.map(|r| r.1),
            split: k,
            sse,
        });
    }
    Ok(best.expect("k = 0 is always admissible"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    /// `N L m d` per point, times the number of points.
    pub leading: f64,
    /// Per-block, per-point operation counts by stage of the block.
    pub terms: Vec<(&'static str, f64)>,
    pub total: f64,
}

/// Forward-pass operation counts.
pub fn compute_cost(n_layers: usize, width: usize, dim: usize, seq_len: usize, n_points: usize) -> CostBreakdown {
    let (n, m, d, l) = (n_layers as f64, width as f64, dim as f64, seq_len as f64);
    let terms = vec![
        ("token_times_u", l * d * d),
        ("attention_logits", l * l * d),
        ("softmax", l * l),
        ("attention_apply", l * l * d),
        ("mlp_in", l * m * d),
        ("mlp_out", l * m * d),
    ];
    let scale = n * n_points as f64;
    let total = terms.iter().map(|t| t.1).sum::<f64>() * scale;
    CostBreakdown { leading: n * l * m * d * n_points as f64, terms, total }
}
