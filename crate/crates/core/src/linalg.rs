//! Small dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

/// Cholesky factorization that reports failure as a singular-system error.
pub fn cholesky(a: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(format!("{what}: non-finite entries")));
    }
    Cholesky::new(a).ok_or_else(|| Error::Singular(format!("{what}: not positive definite")))
}

pub fn solve_spd(a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    Ok(cholesky(a, what)?.solve(b))
}

pub fn inverse_spd(a: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    Ok(cholesky(a, what)?.inverse())
}

/// `(A + Aᵀ)/2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn is_spd(a: &DMatrix<f64>) -> bool {
    a.is_square() && a.iter().all(|v| v.is_finite()) && Cholesky::new(symmetrize(a)).is_some()
}

/// `JᵀJ` through the blocked gemm path; `tr_mul` is much slower for tall matrices.
pub fn gram(j: &DMatrix<f64>) -> DMatrix<f64> {
    let jt = j.transpose();
    &jt * j
}

/// Componentwise mean of the rows.
pub fn column_means(samples: &DMatrix<f64>) -> DVector<f64> {
    let n = samples.nrows().max(1) as f64;
    DVector::from_iterator(samples.ncols(), samples.column_iter().map(|c| c.sum() / n))
}

/// Componentwise standard deviation of the rows (`n - 1` denominator).
pub fn column_std(samples: &DMatrix<f64>) -> DVector<f64> {
    let n = samples.nrows();
    let means = column_means(samples);
    DVector::from_iterator(
        samples.ncols(),
        samples.column_iter().zip(means.iter()).map(|(c, mu)| {
            if n < 2 {
                0.0
            } else {
                (c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            }
        }),
    )
}

/// Sample covariance of the rows.
pub fn sample_covariance(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let n = samples.nrows();
    let means = column_means(samples);
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= means.transpose();
    }
    gram(&centered) / (n.max(2) - 1) as f64
}
