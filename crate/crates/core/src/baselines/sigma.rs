//! Bandwidth search for the isotropic Gaussian-mixture variational density.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::GaussianMixture;
use crate::{rng, Error, Result, SampleMatrix};

#[derive(Debug, Clone)]
pub enum SigmaPrior {
    Mixture(GaussianMixture),
    /// Uniform on the box `[lo, hi]`.
    Uniform { lo: DVector<f64>, hi: DVector<f64> },
}

impl SigmaPrior {
    fn dim(&self) -> usize {
        match self {
            SigmaPrior::Mixture(g) => g.dim(),
            SigmaPrior::Uniform { lo, .. } => lo.len(),
        }
    }

    fn logpdf(&self, m: &DVector<f64>) -> f64 {
        match self {
            SigmaPrior::Mixture(g) => g.logpdf(m),
            SigmaPrior::Uniform { lo, hi } => {
                if m.iter().zip(lo.iter().zip(hi.iter())).all(|(v, (a, b))| v >= a && v <= b) {
                    -lo.iter().zip(hi.iter()).map(|(a, b)| (b - a).ln()).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaOptions {
    pub grid: Vec<f64>,
    pub n_mc: usize,
    pub seed: u64,
}

impl Default for SigmaOptions {
    fn default() -> Self {
        Self { grid: log_grid(1e-3, 1.0, 30), n_mc: 5000, seed: 0 }
    }
}

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSearch {
    pub sigma_star: f64,
    pub grid: Vec<f64>,
    /// Monte Carlo estimate of `E_q[log q − log p]` per grid point.
    pub complexity_cost: Vec<f64>,
}

/// Grid search for the `σ` minimizing `E_q[log q − log p]` where `q` is the
/// equal-weight mixture of `N(center_i, σI)`. Every grid point reuses the
/// same component assignments and standard normal draws.
pub fn optimize_sigma(centers: &SampleMatrix, prior: &SigmaPrior, opts: &SigmaOptions) -> Result<SigmaSearch> {
    let (n, d) = centers.shape();
    if n == 0 {
        return Err(Error::InvalidArgument("no mixture centers".into()));
    }
    if prior.dim() != d {
        return Err(Error::DimensionMismatch { context: "sigma prior", expected: d, actual: prior.dim() });
    }
    if opts.grid.is_empty() || opts.grid.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::config("sigma.grid", "grid values must be positive"));
    }
    if opts.n_mc == 0 {
        return Err(Error::config("sigma.n_mc", "need at least one Monte Carlo sample"));
    }
    let mut rng = rng::seeded(opts.seed);
    let counts = super::gmm::stratified_counts(&vec![1.0 / n as f64; n], opts.n_mc);
    let assignment: Vec<usize> = counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
    let noise = DMatrix::from_fn(opts.n_mc, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let means: Vec<DVector<f64>> = centers.row_iter().map(|r| r.transpose()).collect();
    let mut costs = Vec::with_capacity(opts.grid.len());
    for &sigma in &opts.grid {
        let q = GaussianMixture::uniform(means.clone(), vec![DMatrix::identity(d, d) * sigma; n])?;
        let sd = sigma.sqrt();
        let mut total = 0.0;
        for (s, &k) in assignment.iter().enumerate() {
            let m = &means[k] + noise.row(s).transpose() * sd;
            total += q.logpdf(&m) - prior.logpdf(&m);
        }
        costs.push(total / opts.n_mc as f64);
    }
    let best = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok(SigmaSearch { sigma_star: opts.grid[best], grid: opts.grid.clone(), complexity_cost: costs })
}
