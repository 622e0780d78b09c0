//! Infinite-width kernel regression over prefix-mean token representations.
//!
//! The kernel between two representations `a`, `b` is
//! `⟨a, b⟩ · P[⟨a, w⟩ > 0 and ⟨b, w⟩ > 0]` for `w ~ N(0, I)`, the degree-0
//! arc-cosine kernel scaled by the inner product. Targets are regressed in
//! residual form, `Y/ε - X`, and predictions add the residual stream back:
//! `ε (k(x)ᵀ C + X_ℓ)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_synth::{SampleSet, TokenMatrix};
use crate::error::{Error, Result};
use crate::linalg::{min_eigenpair, spd_solve};
use crate::model::{forward_single, ModelState};

/// Initial diagonal jitter, relative to the mean diagonal entry.
pub const BASE_JITTER: f64 = 1e-10;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-6;
const SOLVE_TOL: f64 = 1e-8;

/// Mean of the first `l` rows (`l` is one-based).
pub fn prefix_mean(x: &TokenMatrix, l: usize) -> Result<DVector<f64>> {
    if l == 0 || l > x.seq_len() {
        return Err(Error::DomainError(format!("position {l} outside 1..={}", x.seq_len())));
    }
    let rows = x.as_matrix().rows(0, l);
    Ok(rows.row_sum().transpose() / l as f64)
}

/// `(π - θ) / (2π)` with `θ` the angle between `a` and `b`.
pub fn joint_positivity(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let (ua, ub) = (a / na, b / nb);
    let theta = 2.0 * (&ua - &ub).norm().atan2((&ua + &ub).norm());
    Ok((PI - theta) / (2.0 * PI))
}

/// Kernel value; a zero representation contributes nothing.
pub fn kernel_value(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    match joint_positivity(a, b) {
        Ok(p) => a.dot(b) * p,
        Err(_) => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    /// Raw Gram matrix, before jitter.
    pub k: DMatrix<f64>,
    /// Diagonal shift used for solves.
    pub jitter: f64,
    /// `λ_max / λ_min` of the jittered matrix.
    pub condition: f64,
}

impl GramMatrix {
    pub fn jittered(&self) -> DMatrix<f64> {
        let s = self.k.nrows();
        &self.k + DMatrix::identity(s, s) * self.jitter
    }
}

fn gram_of(reps: &[DVector<f64>]) -> Result<GramMatrix> {
    let s = reps.len();
    let rows: Vec<Vec<f64>> = (0..s)
        .into_par_iter()
        .map(|i| (i..s).map(|j| kernel_value(&reps[i], &reps[j])).collect())
        .collect();
    let mut k = DMatrix::zeros(s, s);
    for (i, row) in rows.into_iter().enumerate() {
        for (off, v) in row.into_iter().enumerate() {
            k[(i, i + off)] = v;
            k[(i + off, i)] = v;
        }
    }
    let jitter = BASE_JITTER * k.trace() / s as f64;
    let mut g = GramMatrix { k, jitter, condition: f64::NAN };
    g.condition = condition(&g.jittered());
    Ok(g)
}

fn condition(k: &DMatrix<f64>) -> f64 {
    match (min_eigenpair(k), crate::linalg::max_eigenvalue(k)) {
        (Ok((lo, _)), Ok(hi)) if lo > 0.0 => hi / lo,
        _ => f64::INFINITY,
    }
}

/// Gram matrix of the position-`l` prefix means of `inputs`.
pub fn gram(inputs: &[TokenMatrix], l: usize) -> Result<GramMatrix> {
    if inputs.is_empty() {
        return Err(Error::DimMismatch("gram needs at least one input".into()));
    }
    let reps = inputs.iter().map(|x| prefix_mean(x, l)).collect::<Result<Vec<_>>>()?;
    gram_of(&reps)
}

/// How training positions are grouped into regression problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// One `n x n` problem per position `ℓ`.
    #[default]
    PerPosition,
    /// A single `nL x nL` problem over every `(i, ℓ)` pair.
    Pooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtkPredictor {
    pub layout: Layout,
    pub epsilon: f64,
    pub seq_len: usize,
    /// Training representations per problem (one problem per position, or one in total).
    pub reps: Vec<Vec<DVector<f64>>>,
    pub coefficients: Vec<DMatrix<f64>>,
    pub grams: Vec<GramMatrix>,
}

fn solve_escalating(g: &mut GramMatrix, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = g.k.nrows();
    let scale = (g.k.trace() / s as f64).max(0.0);
    let rhs_norm = rhs.norm();
    let mut rel = BASE_JITTER;
    loop {
        g.jitter = rel * scale;
        let kj = g.jittered();
        if let Some(c) = spd_solve(&kj, rhs) {
            let resid = (&kj * &c - rhs).norm();
            if resid <= SOLVE_TOL * rhs_norm || rhs_norm == 0.0 {
                g.condition = condition(&kj);
                return Ok(c);
            }
            if rel * 10.0 > MAX_JITTER * (1.0 + 1e-12) {
                return Err(Error::SingularGram { jitter: g.jitter, residual: resid / rhs_norm });
            }
        } else if rel * 10.0 > MAX_JITTER * (1.0 + 1e-12) {
            return Err(Error::SingularGram { jitter: g.jitter, residual: f64::INFINITY });
        }
        rel *= 10.0;
    }
}

/// Fits the predictor on the set's own targets.
pub fn fit(train: &SampleSet, epsilon: f64) -> Result<NtkPredictor> {
    fit_targets(train.inputs(), train.targets(), epsilon, Layout::PerPosition)
}

/// Fits `Y/ε - X` for explicit targets, in the chosen layout.
pub fn fit_targets(
    inputs: &[TokenMatrix],
    targets: &[DMatrix<f64>],
    epsilon: f64,
    layout: Layout,
) -> Result<NtkPredictor> {
    if epsilon == 0.0 || !epsilon.is_finite() {
        return Err(Error::DomainError("residual targets need a nonzero ε".into()));
    }
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(Error::DimMismatch("inputs and targets must be nonempty and paired".into()));
    }
    let (l, d) = (inputs[0].seq_len(), inputs[0].dim());
    let residual = |i: usize, pos: usize| -> DVector<f64> {
        (targets[i].row(pos) / epsilon - inputs[i].as_matrix().row(pos)).transpose()
    };
    let problems: Vec<Vec<(usize, usize)>> = match layout {
        Layout::PerPosition => (0..l).map(|pos| (0..inputs.len()).map(|i| (i, pos)).collect()).collect(),
        Layout::Pooled => vec![(0..inputs.len()).flat_map(|i| (0..l).map(move |pos| (i, pos))).collect()],
    };
    let mut reps_all = Vec::new();
    let mut coefficients = Vec::new();
    let mut grams = Vec::new();
    for pts in problems {
        let reps = pts.iter().map(|&(i, pos)| prefix_mean(&inputs[i], pos + 1)).collect::<Result<Vec<_>>>()?;
        let mut rhs = DMatrix::zeros(pts.len(), d);
        for (row, &(i, pos)) in pts.iter().enumerate() {
            rhs.set_row(row, &residual(i, pos).transpose());
        }
        let mut g = gram_of(&reps)?;
        let c = solve_escalating(&mut g, &rhs)?;
        reps_all.push(reps);
        coefficients.push(c);
        grams.push(g);
    }
    Ok(NtkPredictor { layout, epsilon, seq_len: l, reps: reps_all, coefficients, grams })
}

pub fn predict(p: &NtkPredictor, x: &TokenMatrix) -> Result<DMatrix<f64>> {
    if x.seq_len() != p.seq_len || x.dim() != p.coefficients[0].ncols() {
        return Err(Error::DimMismatch("input shape differs from the training inputs".into()));
    }
    let d = x.dim();
    let mut out = DMatrix::zeros(p.seq_len, d);
    for pos in 0..p.seq_len {
        let problem = match p.layout {
            Layout::PerPosition => pos,
            Layout::Pooled => 0,
        };
        let q = prefix_mean(x, pos + 1)?;
        let cross = DVector::from_iterator(p.reps[problem].len(), p.reps[problem].iter().map(|r| kernel_value(&q, r)));
        let row = p.coefficients[problem].transpose() * cross + x.as_matrix().row(pos).transpose();
        out.set_row(pos, &(row * p.epsilon).transpose());
    }
    Ok(out)
}

/// Targets `Y - F_0(X) + ε X`: the fit then predicts the change a student
/// starting from `init` should undergo, plus its residual stream.
pub fn centred_targets(init: &ModelState, ds: &SampleSet) -> Result<Vec<DMatrix<f64>>> {
    let eps = init.config.epsilon;
    ds.inputs()
        .iter()
        .zip(ds.targets())
        .map(|(x, y)| Ok(y - forward_single(init, x.as_matrix())? + x.as_matrix() * eps))
        .collect()
}

/// Relative mismatch between a student's learned change `F_T - F_0` and the
/// predictor's kernel term `predict - ε X`, pooled over `held`.
pub fn student_discrepancy(
    trained: &ModelState,
    init: &ModelState,
    p: &NtkPredictor,
    held: &[TokenMatrix],
) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for x in held {
        let xm = x.as_matrix();
        let change = forward_single(trained, xm)? - forward_single(init, xm)?;
        let kernel_part = predict(p, x)? - xm * p.epsilon;
        num += (change - &kernel_part).norm_squared();
        den += kernel_part.norm_squared();
    }
    if den == 0.0 {
        return Err(Error::DomainError("predicted change is identically zero".into()));
    }
    Ok((num / den).sqrt())
}
