//! Negative log-likelihoods used by the samplers.

use nalgebra::{DMatrix, DVector};

use crate::experiments::Dataset;
use crate::forward_models::ForwardModel;
use crate::{linalg, Error, Result, SampleMatrix};

/// Sum of the `n_lkl` smallest `Γ`-weighted squared distances
/// `(m − m⁽ⁱ⁾)ᵀ Γ⁻¹ (m − m⁽ⁱ⁾)` from `m` to the reference rows.
pub fn distance_neg_loglik(m: &DVector<f64>, samples: &SampleMatrix, n_lkl: usize, gamma: &DMatrix<f64>) -> Result<f64> {
    if n_lkl == 0 || n_lkl > samples.nrows() {
        return Err(Error::InvalidArgument(format!("n_lkl must be in 1..={}, got {n_lkl}", samples.nrows())));
    }
    if samples.ncols() != m.len() {
        return Err(Error::DimensionMismatch { context: "reference samples", expected: m.len(), actual: samples.ncols() });
    }
    let chol = linalg::cholesky(gamma.clone(), "distance weighting")?;
    let mut dists: Vec<f64> = samples
        .row_iter()
        .map(|row| {
            let diff = m - row.transpose();
            diff.dot(&chol.solve(&diff))
        })
        .collect();
    dists.sort_by(f64::total_cmp);
    Ok(dists[..n_lkl].iter().sum())
}

/// `Σ_j (y⁽ʲ⁾ − G(x⁽ʲ⁾, m))ᵀ Γ⁻¹ (y⁽ʲ⁾ − G(x⁽ʲ⁾, m))` over the dataset.
pub fn standard_neg_loglik<M: ForwardModel + ?Sized>(model: &M, m: &DVector<f64>, dataset: &Dataset, gamma: &DMatrix<f64>) -> Result<f64> {
    if gamma.nrows() != model.output_dim() {
        return Err(Error::DimensionMismatch { context: "noise covariance", expected: model.output_dim(), actual: gamma.nrows() });
    }
    let chol = linalg::cholesky(gamma.clone(), "noise covariance")?;
    let mut total = 0.0;
    for j in 0..dataset.len() {
        let r = dataset.observation(j) - model.evaluate(&dataset.input(j), m)?;
        total += r.dot(&chol.solve(&r));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::map_objective;
    use crate::forward_models::SpringModel;
    use approx::assert_relative_eq;

    #[test]
    fn distance_examples() {
        let line = DMatrix::from_row_slice(3, 1, &[2.0, 0.0, 1.0]);
        let id = DMatrix::identity(1, 1);
        assert_eq!(distance_neg_loglik(&DVector::from_element(1, 0.0), &line, 2, &id).unwrap(), 1.0);
        assert_eq!(distance_neg_loglik(&DVector::from_element(1, 2.0), &line, 1, &id).unwrap(), 0.0);
        assert_eq!(distance_neg_loglik(&DVector::from_element(1, 0.0), &line, 3, &id).unwrap(), 5.0);
        let scaled = distance_neg_loglik(&DVector::from_element(1, 0.0), &line, 3, &(id * 0.01)).unwrap();
        assert_relative_eq!(scaled, 500.0, epsilon = 1e-9);
        assert!(distance_neg_loglik(&DVector::zeros(1), &line, 4, &DMatrix::identity(1, 1)).is_err());
    }

    fn spring_pair(m: &[f64]) -> Dataset {
        let model = SpringModel::default();
        let x = DVector::from_column_slice(&[0.5, 0.5]);
        let y = model.evaluate(&x, &DVector::from_column_slice(m)).unwrap();
        Dataset::new(DMatrix::from_row_slice(1, 2, x.as_slice()), DMatrix::from_row_slice(1, 2, y.as_slice())).unwrap()
    }

    #[test]
    fn perfect_fit_and_scaling() {
        let model = SpringModel::default();
        let data = spring_pair(&[0.3, 0.1]);
        let m = DVector::from_column_slice(&[0.3, 0.1]);
        assert_eq!(standard_neg_loglik(&model, &m, &data, &DMatrix::identity(2, 2)).unwrap(), 0.0);
        let off = DVector::from_column_slice(&[0.0, 0.0]);
        let base = standard_neg_loglik(&model, &off, &data, &DMatrix::identity(2, 2)).unwrap();
        let scaled = standard_neg_loglik(&model, &off, &data, &(DMatrix::identity(2, 2) * 0.25)).unwrap();
        assert_relative_eq!(scaled, base / 0.25, max_relative = 1e-12);
    }

    #[test]
    fn twice_the_map_misfit_term() {
        let model = SpringModel::default();
        let data = spring_pair(&[0.3, 0.1]);
        let m = DVector::from_column_slice(&[-0.2, 0.4]);
        let gamma = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let sigma0 = DMatrix::identity(2, 2) * 2.0;
        let m0 = DVector::from_column_slice(&[0.1, 0.0]);
        let p = map_objective(&model, &data, &m, &gamma, &sigma0, &m0).unwrap();
        let prior_term = 0.5 * (&m - &m0).norm_squared() / 2.0;
        let nll = standard_neg_loglik(&model, &m, &data, &gamma).unwrap();
        assert_relative_eq!(nll, 2.0 * (p - prior_term), max_relative = 1e-12);
    }
}
