//! Error metrics on samples and model outputs.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::forward_models::ForwardModel;
use crate::{linalg, Error, Result, SampleMatrix};

/// `‖a − ref‖ / ‖ref‖` (Euclidean, or Frobenius for matrices stored flat).
pub fn normalized_error(a: &[f64], reference: &[f64]) -> Result<f64> {
    if a.len() != reference.len() {
        return Err(Error::DimensionMismatch { context: "normalized error", expected: reference.len(), actual: a.len() });
    }
    let denom = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    let num = a.iter().zip(reference).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    Ok(num / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    /// `|μ̂ − μ_ref| / |μ_ref|` per dimension; `None` where `μ_ref = 0`.
    pub e_mu: Vec<Option<f64>>,
    /// `|σ̂ − σ_ref| / |σ_ref|` per dimension; `None` where `σ_ref = 0`.
    pub e_sigma: Vec<Option<f64>>,
    pub n_samples: usize,
    pub n_reference: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub residuals: BTreeMap<String, f64>,
}

impl MomentReport {
    pub fn mu(&self, i: usize) -> f64 {
        self.e_mu[i].unwrap_or(f64::NAN)
    }

    pub fn sigma(&self, i: usize) -> f64 {
        self.e_sigma[i].unwrap_or(f64::NAN)
    }
}

fn relative(a: f64, reference: f64) -> Option<f64> {
    (reference != 0.0).then(|| (a - reference).abs() / reference.abs())
}

/// Relative errors of the per-column sample mean and standard deviation.
pub fn moment_errors(samples: &DMatrix<f64>, reference: &DMatrix<f64>) -> Result<MomentReport> {
    if samples.ncols() != reference.ncols() {
        return Err(Error::DimensionMismatch { context: "moment columns", expected: reference.ncols(), actual: samples.ncols() });
    }
    if samples.nrows() < 2 || reference.nrows() < 2 {
        return Err(Error::InvalidArgument("moments need at least two rows".into()));
    }
    let (mu, mu_ref) = (linalg::column_means(samples), linalg::column_means(reference));
    let (sd, sd_ref) = (linalg::column_std(samples), linalg::column_std(reference));
    Ok(MomentReport {
        e_mu: (0..mu.len()).map(|i| relative(mu[i], mu_ref[i])).collect(),
        e_sigma: (0..sd.len()).map(|i| relative(sd[i], sd_ref[i])).collect(),
        n_samples: samples.nrows(),
        n_reference: reference.nrows(),
        residuals: BTreeMap::new(),
    })
}

/// `G(x, m)` for a fixed input and every latent row.
pub fn outputs_at<M: ForwardModel + ?Sized>(model: &M, x: &DVector<f64>, latent: &SampleMatrix) -> Result<DMatrix<f64>> {
    let rows: Vec<DVector<f64>> = (0..latent.nrows())
        .into_par_iter()
        .map(|i| model.evaluate(x, &latent.row(i).transpose()))
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(latent.nrows(), model.output_dim());
    for (i, r) in rows.iter().enumerate() {
        out.set_row(i, &r.transpose());
    }
    Ok(out)
}

/// Fraction of rows within Euclidean distance `radius` of `center`.
pub fn concentration(samples: &SampleMatrix, center: &DVector<f64>, radius: f64) -> f64 {
    if samples.nrows() == 0 {
        return 0.0;
    }
    let inside = samples.row_iter().filter(|r| (r.transpose() - center).norm() <= radius).count();
    inside as f64 / samples.nrows() as f64
}
