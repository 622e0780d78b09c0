//! Thin symmetric-matrix helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const EIGEN_MAX_ITER: usize = 10_000;

/// Full spectrum of a symmetric matrix, ascending, with eigenvectors as columns.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimMismatch(format!(
            "eigensolve needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let eig = a
        .clone()
        .try_symmetric_eigen(f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or(Error::NoConvergence(EIGEN_MAX_ITER))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((vals, vecs))
}

/// Smallest eigenpair. The residual `||Av - lambda v||` is checked against
/// `1e-8 ||A||_F` and reported as non-convergence when it fails.
pub fn min_eigenpair(a: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let (vals, vecs) = sym_eigen(a)?;
    if vals.is_empty() {
        return Err(Error::DimMismatch("empty matrix has no eigenvalues".into()));
    }
    let v = vecs.column(0).into_owned();
    let lambda = vals[0];
    let resid = (a * &v - &v * lambda).norm();
    if resid > 1e-8 * a.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::NoConvergence(EIGEN_MAX_ITER));
    }
    Ok((lambda, v))
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> Result<f64> {
    let (vals, _) = sym_eigen(a)?;
    vals.iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::DimMismatch("empty matrix has no eigenvalues".into()))
}

/// Solves `K C = B` for symmetric positive-definite `K`, returning `None` when
/// the Cholesky factorization fails.
pub fn spd_solve(k: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = k.clone().cholesky()?;
    Some(chol.solve(b))
}

pub fn is_symmetric(a: &DMatrix<f64>, tol: f64) -> bool {
    a.nrows() == a.ncols()
        && (0..a.nrows()).all(|i| (0..i).all(|j| (a[(i, j)] - a[(j, i)]).abs() <= tol))
}
