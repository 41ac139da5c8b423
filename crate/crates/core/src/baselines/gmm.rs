//! Weighted multivariate normal mixtures.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{linalg, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone)]
struct Component {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `log w − ½ log det(2πΣ)`.
    log_scale: f64,
}

#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    components: Vec<Component>,
}

/// Plain-data form of a mixture, used for JSON reports and configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl GaussianMixture {
    /// Weights are normalized; covariances must be symmetric positive definite.
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidArgument("mixture needs at least one component".into()));
        }
        if means.len() != weights.len() || covariances.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "mixture has {} weights, {} means and {} covariances",
                weights.len(),
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidArgument("mixture weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidArgument("mixture weights sum to zero".into()));
        }
        let d = means[0].len();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut components = Vec::with_capacity(weights.len());
        for (k, (mean, covariance)) in means.into_iter().zip(covariances).enumerate() {
            if mean.len() != d || covariance.shape() != (d, d) {
                return Err(Error::DimensionMismatch { context: "mixture component", expected: d, actual: mean.len() });
            }
            if (&covariance - covariance.transpose()).amax() > 1e-12 * covariance.amax().max(1.0) {
                return Err(Error::InvalidArgument(format!("covariance {k} is not symmetric")));
            }
            let chol = linalg::cholesky(covariance.clone(), "mixture covariance")?;
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
            let log_scale = weights[k].ln() - 0.5 * (d as f64 * LN_2PI + log_det);
            components.push(Component { mean, covariance, chol, log_scale });
        }
        Ok(Self { weights, components })
    }

    /// Equal weights.
    pub fn uniform(means: Vec<DVector<f64>>, covariances: Vec<DMatrix<f64>>) -> Result<Self> {
        Self::new(vec![1.0; means.len()], means, covariances)
    }

    pub fn from_record(record: &MixtureRecord) -> Result<Self> {
        let means = record.means.iter().map(|m| DVector::from_column_slice(m)).collect();
        let covariances = record
            .covariances
            .iter()
            .map(|rows| {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::InvalidArgument("covariance rows must be square".into()));
                }
                Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(record.weights.clone(), means, covariances)
    }

    pub fn to_record(&self) -> MixtureRecord {
        MixtureRecord {
            weights: self.weights.clone(),
            means: self.components.iter().map(|c| c.mean.iter().copied().collect()).collect(),
            covariances: self
                .components
                .iter()
                .map(|c| c.covariance.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &DVector<f64> {
        &self.components[k].mean
    }

    pub fn covariance(&self, k: usize) -> &DMatrix<f64> {
        &self.components[k].covariance
    }

    /// Per-component `log w_k + log N(m; μ_k, Σ_k)` and `Σ_k⁻¹(m − μ_k)`.
    fn component_terms(&self, m: &DVector<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
        self.components
            .iter()
            .map(|c| {
                let diff = m - &c.mean;
                let precision_diff = c.chol.solve(&diff);
                (c.log_scale - 0.5 * diff.dot(&precision_diff), precision_diff)
            })
            .unzip()
    }

    pub fn logpdf(&self, m: &DVector<f64>) -> f64 {
        let (logs, _) = self.component_terms(m);
        log_sum_exp(&logs)
    }

    /// Log-density and its gradient `−Σ_k r_k Σ_k⁻¹(m − μ_k)` with
    /// responsibilities `r_k` computed in log space.
    pub fn logpdf_and_grad(&self, m: &DVector<f64>) -> (f64, DVector<f64>) {
        let (logs, precision_diffs) = self.component_terms(m);
        let total = log_sum_exp(&logs);
        let mut grad = DVector::zeros(m.len());
        for (log_k, pd) in logs.iter().zip(&precision_diffs) {
            let r = (log_k - total).exp();
            if r > 0.0 {
                grad.axpy(-r, pd, 1.0);
            }
        }
        (total, grad)
    }

    pub fn sample_component<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> DVector<f64> {
        let c = &self.components[k];
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &c.mean + c.chol.l_dirty().lower_triangle() * z
    }

    /// `n` i.i.d. draws, one row each.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(n, self.dim());
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.n_components() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            out.set_row(i, &self.sample_component(k, rng).transpose());
        }
        out
    }

    /// `n` draws with component counts fixed at `n·w_k` (largest remainder
    /// rounding), returned in shuffled order.
    pub fn sample_stratified<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DMatrix<f64> {
        let counts = stratified_counts(&self.weights, n);
        let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
        labels.shuffle(rng);
        let mut out = DMatrix::zeros(n, self.dim());
        for (i, &k) in labels.iter().enumerate() {
            out.set_row(i, &self.sample_component(k, rng).transpose());
        }
        out
    }
}

/// Largest-remainder allocation of `n` items to the given proportions.
pub fn stratified_counts(weights: &[f64], n: usize) -> Vec<usize> {
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[k] += 1;
        missing -= 1;
    }
    counts
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bimodal() -> GaussianMixture {
        GaussianMixture::uniform(
            vec![DVector::from_column_slice(&[2.0, 2.0]), DVector::from_column_slice(&[-2.0, -2.0])],
            vec![
                DMatrix::from_row_slice(2, 2, &[0.51, 0.49, 0.49, 0.51]),
                DMatrix::from_row_slice(2, 2, &[0.51, -0.49, -0.49, 0.51]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_component_matches_normal_density() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let mean = DVector::from_column_slice(&[1.0, -1.0]);
        let g = GaussianMixture::uniform(vec![mean.clone()], vec![cov.clone()]).unwrap();
        let m = DVector::from_column_slice(&[0.2, 0.4]);
        let diff = &m - &mean;
        let quad = diff.dot(&(cov.clone().try_inverse().unwrap() * &diff));
        let expected = -0.5 * quad - 0.5 * (2.0 * LN_2PI + cov.determinant().ln());
        assert_relative_eq!(g.logpdf(&m), expected, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let g = bimodal();
        for point in [[0.3, -0.7], [1.5, 2.5], [-2.2, -1.6], [4.0, -3.0]] {
            let m = DVector::from_column_slice(&point);
            let (_, grad) = g.logpdf_and_grad(&m);
            let h = 1e-6;
            for i in 0..2 {
                let mut p = m.clone();
                let mut q = m.clone();
                p[i] += h;
                q[i] -= h;
                let fd = (g.logpdf(&p) - g.logpdf(&q)) / (2.0 * h);
                assert!((fd - grad[i]).abs() <= 1e-7 * fd.abs().max(1.0), "{point:?} {i}: {fd} vs {}", grad[i]);
            }
        }
    }

    #[test]
    fn symmetric_midpoint_has_zero_gradient() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.51, 0.49, 0.49, 0.51]);
        let mirrored = GaussianMixture::uniform(
            vec![DVector::from_column_slice(&[2.0, 2.0]), DVector::from_column_slice(&[-2.0, -2.0])],
            vec![cov.clone(), cov],
        )
        .unwrap();
        let (_, grad) = mirrored.logpdf_and_grad(&DVector::zeros(2));
        assert!(grad.amax() <= 1e-12, "{grad}");
    }

    #[test]
    fn bimodal_truth_midpoint_is_pulled_by_the_wide_mode() {
        // the modes have opposite correlation, so the origin lies on the long
        // axis of the upper mode and far out on the short axis of the lower one
        let (_, grad) = bimodal().logpdf_and_grad(&DVector::zeros(2));
        assert!((grad - DVector::from_element(2, 2.0)).amax() <= 1e-9);
    }

    #[test]
    fn far_tail_is_finite() {
        let (value, grad) = bimodal().logpdf_and_grad(&DVector::from_column_slice(&[80.0, -75.0]));
        assert!(value.is_finite() && grad.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bimodal_sample_mean_is_centered() {
        let mut rng = crate::rng::seeded(12);
        let s = bimodal().sample(100_000, &mut rng);
        let mean = linalg::column_means(&s);
        assert!(mean.amax() <= 0.02, "{mean}");
    }

    #[test]
    fn stratified_counts_follow_weights() {
        assert_eq!(stratified_counts(&[0.5, 0.5], 200), vec![100, 100]);
        assert_eq!(stratified_counts(&[1.0 / 3.0; 3], 200), vec![67, 67, 66]);
        let c = stratified_counts(&[0.1, 0.2, 0.7], 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }

    #[test]
    fn stratified_sampling_balances_modes() {
        let mut rng = crate::rng::seeded(3);
        let s = bimodal().sample_stratified(200, &mut rng);
        let upper = s.row_iter().filter(|r| r[0] + r[1] > 0.0).count();
        assert_eq!(upper, 100);
    }

    #[test]
    fn record_round_trip_and_validation() {
        let g = bimodal();
        let back = GaussianMixture::from_record(&g.to_record()).unwrap();
        assert_eq!(back.to_record(), g.to_record());
        let bad = GaussianMixture::uniform(vec![DVector::zeros(2)], vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])]);
        assert!(bad.is_err());
    }
}
