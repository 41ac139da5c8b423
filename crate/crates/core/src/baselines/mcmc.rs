//! Random-walk Metropolis-Hastings and Hamiltonian Monte Carlo.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{linalg, rng, Error, Result, SampleMatrix};

/// Trajectories whose total-energy change exceeds this are counted as divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sampler", rename_all = "snake_case")]
pub enum SamplerSettings {
    MetropolisHastings { proposal_cov: DMatrix<f64> },
    Hamiltonian { step_size: f64, leapfrog_steps: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Chain state after each step, one row per step.
    pub samples: SampleMatrix,
    pub accept_count: usize,
    pub proposals: usize,
    pub divergences: usize,
    pub settings: SamplerSettings,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMetadata {
    pub n_steps: usize,
    pub accept_count: usize,
    pub reject_count: usize,
    pub acceptance_rate: f64,
    pub divergences: usize,
    pub seed: u64,
    pub settings: SamplerSettings,
}

impl ChainState {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accept_count as f64 / self.proposals as f64
        }
    }

    pub fn metadata(&self) -> ChainMetadata {
        ChainMetadata {
            n_steps: self.proposals,
            accept_count: self.accept_count,
            reject_count: self.proposals - self.accept_count,
            acceptance_rate: self.acceptance_rate(),
            divergences: self.divergences,
            seed: self.seed,
            settings: self.settings.clone(),
        }
    }

    /// Header `m1,…,md`, one row per step.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        crate::experiments::io::write_matrix_csv(w, &self.samples, "m")
    }
}

/// Metropolis acceptance test for a log ratio and a uniform draw `u ∈ [0,1)`.
pub fn metropolis_accept(log_ratio: f64, u: f64) -> bool {
    log_ratio >= 0.0 || u.ln() < log_ratio
}

/// Random-walk Metropolis-Hastings with Gaussian proposals `N(m, proposal_cov)`.
/// `log_target` may return `-∞` to reject a point outright.
pub fn mh_sample<F>(
    mut log_target: F,
    m_init: &DVector<f64>,
    proposal_cov: &DMatrix<f64>,
    n_steps: usize,
    seed: u64,
) -> Result<ChainState>
where
    F: FnMut(&DVector<f64>) -> f64,
{
    let d = m_init.len();
    if proposal_cov.nrows() != d {
        return Err(Error::DimensionMismatch { context: "proposal covariance", expected: d, actual: proposal_cov.nrows() });
    }
    let l = linalg::cholesky(proposal_cov.clone(), "proposal covariance")?.l();
    let mut rng = rng::seeded(seed);
    let mut m = m_init.clone();
    let mut lp = log_target(&m);
    let mut samples = DMatrix::zeros(n_steps, d);
    let mut accept_count = 0;
    for step in 0..n_steps {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let proposal = &m + &l * z;
        let lp_new = log_target(&proposal);
        let u: f64 = rng.random();
        if lp_new.is_finite() && (!lp.is_finite() || metropolis_accept(lp_new - lp, u)) {
            m = proposal;
            lp = lp_new;
            accept_count += 1;
        }
        samples.set_row(step, &m.transpose());
    }
    Ok(ChainState {
        samples,
        accept_count,
        proposals: n_steps,
        divergences: 0,
        settings: SamplerSettings::MetropolisHastings { proposal_cov: proposal_cov.clone() },
        seed,
    })
}

/// `L` leapfrog steps of size `ε` for `H(m, p) = −log π(m) + ½‖p‖²`.
/// Returns the final position and momentum, or `None` if the gradient
/// callback fails along the way.
pub fn leapfrog<G>(grad_log_target: &mut G, m: &DVector<f64>, p: &DVector<f64>, step_size: f64, steps: usize) -> Option<(DVector<f64>, DVector<f64>)>
where
    G: FnMut(&DVector<f64>) -> Option<DVector<f64>>,
{
    let mut m = m.clone();
    let mut p = p + grad_log_target(&m)? * (0.5 * step_size);
    for k in 0..steps {
        m += &p * step_size;
        let g = grad_log_target(&m)?;
        let scale = if k + 1 == steps { 0.5 } else { 1.0 };
        p += g * (scale * step_size);
    }
    Some((m, p))
}

/// Hamiltonian Monte Carlo with unit mass matrix. `target` returns the log
/// density and its gradient, or `None` outside the support.
pub fn hmc_sample<F>(
    mut target: F,
    m_init: &DVector<f64>,
    step_size: f64,
    leapfrog_steps: usize,
    n_steps: usize,
    seed: u64,
) -> Result<ChainState>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    if !(step_size > 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {step_size}")));
    }
    if leapfrog_steps == 0 {
        return Err(Error::InvalidArgument("need at least one leapfrog step".into()));
    }
    let d = m_init.len();
    let mut rng = rng::seeded(seed);
    let mut m = m_init.clone();
    let (mut lp, _) = target(&m).ok_or_else(|| Error::InvalidArgument("initial HMC state outside the support".into()))?;
    let mut samples = DMatrix::zeros(n_steps, d);
    let mut accept_count = 0;
    let mut divergences = 0;
    for step in 0..n_steps {
        let p = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u: f64 = rng.random();
        let mut grad = |x: &DVector<f64>| target(x).map(|(_, g)| g);
        let end = leapfrog(&mut grad, &m, &p, step_size, leapfrog_steps);
        let mut moved = false;
        if let Some((m_new, p_new)) = end {
            if let Some((lp_new, _)) = target(&m_new) {
                let h_old = -lp + 0.5 * p.norm_squared();
                let h_new = -lp_new + 0.5 * p_new.norm_squared();
                let delta = h_new - h_old;
                if !delta.is_finite() || delta.abs() > DIVERGENCE_THRESHOLD {
                    divergences += 1;
                } else if metropolis_accept(-delta, u) {
                    m = m_new;
                    lp = lp_new;
                    moved = true;
                }
            } else {
                divergences += 1;
            }
        } else {
            divergences += 1;
        }
        if moved {
            accept_count += 1;
        }
        samples.set_row(step, &m.transpose());
    }
    Ok(ChainState {
        samples,
        accept_count,
        proposals: n_steps,
        divergences,
        settings: SamplerSettings::Hamiltonian { step_size, leapfrog_steps },
        seed,
    })
}
