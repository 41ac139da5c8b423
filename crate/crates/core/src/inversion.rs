//! Sample-wise inversion of a forward model by damped Gauss-Newton.
//!
//! Each observation gets its own latent vector:
//! `m ← m − β (JᵀJ + δI)⁻¹ Jᵀ R` with `R = G(x, m) − y`, where the Tikhonov
//! parameter `δ` depends on the current residual norm. For a whole dataset
//! the residual can be measured per sample or on the stacked vector of all
//! samples' residuals.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::experiments::Dataset;
use crate::forward_models::ForwardModel;
use crate::{linalg, rng, Error, Result, SampleMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TikhonovSchedule {
    pub threshold: f64,
    pub high: f64,
    pub low: f64,
}

impl Default for TikhonovSchedule {
    fn default() -> Self {
        Self { threshold: 0.01, high: 1e-5, low: 1e-6 }
    }
}

impl TikhonovSchedule {
    /// `high` when `‖R‖ ≥ threshold`, `low` otherwise.
    pub fn delta(&self, residual_norm: f64) -> f64 {
        if residual_norm >= self.threshold {
            self.high
        } else {
            self.low
        }
    }
}

/// The default schedule: `1e-5` for `‖R‖ ≥ 0.01`, else `1e-6`.
pub fn tikhonov_for(residual_norm: f64) -> f64 {
    TikhonovSchedule::default().delta(residual_norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    Zero,
    Fixed(Vec<f64>),
}

/// Plain gradient descent on `‖R‖²` run before the Gauss-Newton loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub iterations: usize,
    pub learning_rate: f64,
}

/// Which residual norm drives the stopping test and the Tikhonov schedule
/// when a dataset is inverted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualScope {
    /// `R ∈ R^{n_data·n}` stacked over all samples; every sample takes the
    /// same number of steps.
    #[default]
    Stacked,
    /// Each sample stops on its own residual.
    PerSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionOptions {
    pub learning_rate: f64,
    pub residual_tol: f64,
    pub max_iter: usize,
    pub tikhonov: TikhonovSchedule,
    pub m_init: InitPolicy,
    pub warm_start: Option<WarmStart>,
    pub scope: ResidualScope,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            residual_tol: 0.01,
            max_iter: 500,
            tikhonov: TikhonovSchedule::default(),
            m_init: InitPolicy::Zero,
            warm_start: None,
            scope: ResidualScope::Stacked,
        }
    }
}

impl InversionOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("inversion.learning_rate", "must be positive"));
        }
        if !(self.residual_tol > 0.0) {
            return Err(Error::config("inversion.residual_tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("inversion.max_iter", "must be at least 1"));
        }
        if !(self.tikhonov.high > 0.0 && self.tikhonov.low > 0.0) {
            return Err(Error::config("inversion.tikhonov", "regularization must be positive"));
        }
        Ok(())
    }

    fn initial(&self, d: usize) -> Result<DVector<f64>> {
        match &self.m_init {
            InitPolicy::Zero => Ok(DVector::zeros(d)),
            InitPolicy::Fixed(v) if v.len() == d => Ok(DVector::from_column_slice(v)),
            InitPolicy::Fixed(v) => Err(Error::DimensionMismatch { context: "initial latent vector", expected: d, actual: v.len() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub m_opt: DVector<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves `(JᵀJ + δI) Δ = JᵀR` by Cholesky.
pub fn newton_step(j: &DMatrix<f64>, r: &DVector<f64>, delta: f64) -> Result<DVector<f64>> {
    if j.nrows() != r.len() {
        return Err(Error::DimensionMismatch { context: "Newton residual", expected: j.nrows(), actual: r.len() });
    }
    let mut normal = linalg::gram(j);
    for i in 0..normal.nrows() {
        normal[(i, i)] += delta;
    }
    let rhs = j.tr_mul(r);
    linalg::solve_spd(normal, &rhs, "regularized normal equations")
}

fn starting_point<M: ForwardModel + ?Sized>(model: &M, x: &DVector<f64>, y: &DVector<f64>, opts: &InversionOptions) -> Result<DVector<f64>> {
    let mut m = opts.initial(model.latent_dim())?;
    if let Some(warm) = opts.warm_start {
        for _ in 0..warm.iterations {
            let (g, jac) = model.evaluate_with_jacobian(x, &m)?;
            m -= jac.tr_mul(&(g - y)) * (2.0 * warm.learning_rate);
        }
    }
    Ok(m)
}

/// Inverts one observation `y` at input `x`.
///
/// Convergence is checked before every update, so a starting point that
/// already meets the tolerance returns after zero iterations. Running out of
/// iterations is reported through `converged`, not as an error.
pub fn invert_sample<M: ForwardModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    y: &DVector<f64>,
    opts: &InversionOptions,
) -> Result<InversionResult> {
    if y.len() != model.output_dim() {
        return Err(Error::DimensionMismatch { context: "observation", expected: model.output_dim(), actual: y.len() });
    }
    let mut m = starting_point(model, x, y, opts)?;
    for iter in 0..opts.max_iter {
        let (g, jac) = model.evaluate_with_jacobian(x, &m)?;
        let r = g - y;
        let norm = r.norm();
        if norm <= opts.residual_tol {
            return Ok(InversionResult { m_opt: m, residual_norm: norm, iterations: iter, converged: true });
        }
        let step = newton_step(&jac, &r, opts.tikhonov.delta(norm))?;
        m -= step * opts.learning_rate;
    }
    let norm = (model.evaluate(x, &m)? - y).norm();
    Ok(InversionResult {
        converged: norm <= opts.residual_tol,
        m_opt: m,
        residual_norm: norm,
        iterations: opts.max_iter,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualQuantiles {
    pub min: f64,
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionReport {
    pub n_samples: usize,
    pub n_converged: usize,
    pub n_not_converged: usize,
    /// Samples whose model evaluation failed; their rows hold the initial guess.
    pub failed: Vec<(usize, String)>,
    pub residual_quantiles: ResidualQuantiles,
    pub mean_iterations: f64,
    pub m_init: InitPolicy,
    pub residual_tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInversion {
    pub samples: SampleMatrix,
    pub results: Vec<InversionResult>,
    pub report: InversionReport,
}

impl DatasetInversion {
    pub fn converged(&self) -> Vec<bool> {
        self.results.iter().map(|r| r.converged).collect()
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn collect(outcomes: Vec<std::result::Result<InversionResult, String>>, d: usize, opts: &InversionOptions) -> Result<DatasetInversion> {
    let init = opts.initial(d)?;
    let mut failed = Vec::new();
    let results: Vec<InversionResult> = outcomes
        .into_iter()
        .enumerate()
        .map(|(i, outcome)| {
            outcome.unwrap_or_else(|msg| {
                failed.push((i, msg));
                InversionResult { m_opt: init.clone(), residual_norm: f64::INFINITY, iterations: 0, converged: false }
            })
        })
        .collect();
    let n = results.len();
    let mut samples = DMatrix::zeros(n, d);
    for (i, r) in results.iter().enumerate() {
        samples.set_row(i, &r.m_opt.transpose());
    }
    let mut norms: Vec<f64> = results.iter().map(|r| r.residual_norm).collect();
    norms.sort_by(f64::total_cmp);
    let n_converged = results.iter().filter(|r| r.converged).count();
    let report = InversionReport {
        n_samples: n,
        n_converged,
        n_not_converged: n - n_converged,
        failed,
        residual_quantiles: ResidualQuantiles {
            min: quantile(&norms, 0.0),
            median: quantile(&norms, 0.5),
            p90: quantile(&norms, 0.9),
            max: quantile(&norms, 1.0),
        },
        mean_iterations: results.iter().map(|r| r.iterations as f64).sum::<f64>() / n.max(1) as f64,
        m_init: opts.m_init.clone(),
        residual_tol: opts.residual_tol,
    };
    Ok(DatasetInversion { samples, results, report })
}

type Outcome = std::result::Result<InversionResult, String>;

/// Runs all pairs together, stopping when the stacked residual norm meets the
/// tolerance. Pairs whose model evaluation fails leave the batch.
fn invert_stacked<M: ForwardModel + ?Sized>(model: &M, pairs: &[(DVector<f64>, DVector<f64>)], opts: &InversionOptions) -> Vec<Outcome> {
    let mut state: Vec<std::result::Result<DVector<f64>, String>> = pairs
        .par_iter()
        .map(|(x, y)| {
            if y.len() != model.output_dim() {
                return Err(Error::DimensionMismatch { context: "observation", expected: model.output_dim(), actual: y.len() }.to_string());
            }
            starting_point(model, x, y, opts).map_err(|e| e.to_string())
        })
        .collect();
    let mut iterations = 0;
    loop {
        let evals: Vec<Option<std::result::Result<(DVector<f64>, DMatrix<f64>), String>>> = state
            .par_iter()
            .zip(pairs.par_iter())
            .map(|(m, (x, y))| {
                m.as_ref().ok().map(|m| model.evaluate_with_jacobian(x, m).map(|(g, j)| (g - y, j)).map_err(|e| e.to_string()))
            })
            .collect();
        for (s, e) in state.iter_mut().zip(&evals) {
            if let Some(Err(msg)) = e {
                *s = Err(msg.clone());
            }
        }
        let norms: Vec<f64> = evals
            .iter()
            .map(|e| match e {
                Some(Ok((r, _))) => r.norm(),
                _ => f64::NAN,
            })
            .collect();
        let stacked = norms.iter().filter(|v| !v.is_nan()).map(|v| v * v).sum::<f64>().sqrt();
        if stacked <= opts.residual_tol || iterations == opts.max_iter {
            let converged = stacked <= opts.residual_tol;
            return state
                .into_iter()
                .zip(norms)
                .map(|(m, norm)| m.map(|m_opt| InversionResult { m_opt, residual_norm: norm, iterations, converged }))
                .collect();
        }
        let delta = opts.tikhonov.delta(stacked);
        let steps: Vec<Option<std::result::Result<DVector<f64>, String>>> = evals
            .par_iter()
            .map(|e| match e {
                Some(Ok((r, j))) => Some(newton_step(j, r, delta).map_err(|e| e.to_string())),
                _ => None,
            })
            .collect();
        for (m, step) in state.iter_mut().zip(steps) {
            match (m.as_mut(), step) {
                (Ok(m), Some(Ok(step))) => *m -= step * opts.learning_rate,
                (Ok(_), Some(Err(msg))) => *m = Err(msg),
                _ => {}
            }
        }
        iterations += 1;
    }
}

fn invert_pairs<M: ForwardModel + ?Sized>(model: &M, pairs: &[(DVector<f64>, DVector<f64>)], opts: &InversionOptions) -> Vec<Outcome> {
    match opts.scope {
        ResidualScope::Stacked => invert_stacked(model, pairs, opts),
        ResidualScope::PerSample => pairs
            .par_iter()
            .map(|(x, y)| invert_sample(model, x, y, opts).map_err(|e| e.to_string()))
            .collect(),
    }
}

/// Inverts every `(x, y)` pair; rows follow the dataset order.
pub fn invert_dataset<M: ForwardModel + ?Sized>(model: &M, dataset: &Dataset, opts: &InversionOptions) -> Result<DatasetInversion> {
    opts.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot invert an empty dataset".into()));
    }
    let pairs: Vec<_> = (0..dataset.len()).map(|j| (dataset.input(j), dataset.observation(j))).collect();
    collect(invert_pairs(model, &pairs, opts), model.latent_dim(), opts)
}

/// Inverts `y − η` for `n_noise` draws `η ~ δ_noise·N(0, I)` per pair.
///
/// Rows are grouped by data index: rows `j·n_noise .. (j+1)·n_noise` belong
/// to pair `j`. Noise for pair `j` comes from stream `j` of `seed`, so the
/// output does not depend on thread scheduling. Non-converged samples are
/// kept and flagged in the results.
pub fn invert_with_noise<M: ForwardModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    delta_noise: f64,
    n_noise: usize,
    opts: &InversionOptions,
    seed: u64,
) -> Result<DatasetInversion> {
    opts.validate()?;
    if !(delta_noise >= 0.0) {
        return Err(Error::InvalidArgument("noise level must be nonnegative".into()));
    }
    if n_noise == 0 || dataset.is_empty() {
        return Err(Error::InvalidArgument("need at least one pair and one noise draw".into()));
    }
    let n_out = model.output_dim();
    let pairs: Vec<Vec<(DVector<f64>, DVector<f64>)>> = (0..dataset.len())
        .map(|j| {
            let mut rng = rng::stream(seed, j as u64);
            let x = dataset.input(j);
            let y = dataset.observation(j);
            (0..n_noise)
                .map(|_| {
                    let eta = DVector::from_fn(n_out, |_, _| delta_noise * Distribution::<f64>::sample(&StandardNormal, &mut rng));
                    (x.clone(), &y - eta)
                })
                .collect()
        })
        .collect();
    let pairs: Vec<_> = pairs.into_iter().flatten().collect();
    collect(invert_pairs(model, &pairs, opts), model.latent_dim(), opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_models::{SpringModel, StiffnessMap};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn tikhonov_schedule_boundaries() {
        assert_eq!(tikhonov_for(0.02), 1e-5);
        assert_eq!(tikhonov_for(0.009), 1e-6);
        assert_eq!(tikhonov_for(0.01), 1e-5);
    }

    #[test]
    fn newton_step_examples() {
        let step = newton_step(&DMatrix::identity(2, 2), &v(&[1.0, 2.0]), 1e-6).unwrap();
        assert!((step - v(&[1.0, 2.0])).amax() <= 1e-5);
        let zero = newton_step(&DMatrix::zeros(3, 2), &v(&[1.0, -2.0, 3.0]), 1e-6).unwrap();
        assert_eq!(zero, DVector::zeros(2));
    }

    #[test]
    fn newton_step_matches_dense_oracle() {
        let mut rng = crate::rng::seeded(8);
        for _ in 0..20 {
            let j = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
            let r = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let delta = 1e-5;
            let a = j.transpose() * &j + DMatrix::identity(2, 2) * delta;
            let oracle = a.try_inverse().unwrap() * j.transpose() * &r;
            let step = newton_step(&j, &r, delta).unwrap();
            assert!((step - oracle).amax() <= 1e-10);
        }
    }

    fn exact_opts() -> InversionOptions {
        InversionOptions { residual_tol: 1e-4, ..Default::default() }
    }

    #[test]
    fn recovers_latent_for_injective_spring() {
        let model = SpringModel::new(StiffnessMap::Exp);
        let x = v(&[0.5, 0.5]);
        let truth = v(&[0.3, -0.4]);
        let y = model.evaluate(&x, &truth).unwrap();
        let res = invert_sample(&model, &x, &y, &exact_opts()).unwrap();
        assert!(res.converged);
        assert!((res.m_opt - truth).norm() <= 1e-3);
    }

    #[test]
    fn starting_at_solution_takes_no_steps() {
        let model = SpringModel::default();
        let x = v(&[0.5, 0.5]);
        let truth = v(&[0.3, -0.4]);
        let y = model.evaluate(&x, &truth).unwrap();
        let opts = InversionOptions { m_init: InitPolicy::Fixed(vec![0.3, -0.4]), ..exact_opts() };
        let res = invert_sample(&model, &x, &y, &opts).unwrap();
        assert!(res.iterations <= 1 && res.converged);
    }

    #[test]
    fn square_map_meets_residual_tolerance() {
        let model = SpringModel::new(StiffnessMap::Square);
        let x = v(&[0.5, 0.5]);
        let y = model.evaluate(&x, &v(&[1.0, 1.0])).unwrap();
        let opts = InversionOptions { m_init: InitPolicy::Fixed(vec![0.2, 0.3]), ..exact_opts() };
        let res = invert_sample(&model, &x, &y, &opts).unwrap();
        assert!(res.converged);
        assert!((model.evaluate(&x, &res.m_opt).unwrap() - y).norm() <= 1e-3);
        assert_relative_eq!(res.m_opt[0].abs(), 1.0, epsilon = 1e-2);
    }

    #[test]
    fn non_convergence_is_flagged_not_raised() {
        let model = SpringModel::default();
        let x = v(&[0.5, 0.5]);
        let y = model.evaluate(&x, &v(&[2.0, 2.0])).unwrap();
        let opts = InversionOptions { max_iter: 2, ..exact_opts() };
        let res = invert_sample(&model, &x, &y, &opts).unwrap();
        assert!(!res.converged);
        assert!(res.residual_norm > opts.residual_tol);
        assert_eq!(res.iterations, 2);
    }

    #[test]
    fn warm_start_reduces_initial_residual() {
        let model = SpringModel::default();
        let x = v(&[0.5, 0.5]);
        let y = model.evaluate(&x, &v(&[0.5, 0.5])).unwrap();
        let cold = InversionOptions { max_iter: 1, ..exact_opts() };
        let warm = InversionOptions { warm_start: Some(WarmStart { iterations: 50, learning_rate: 0.01 }), ..cold.clone() };
        let a = invert_sample(&model, &x, &y, &cold).unwrap();
        let b = invert_sample(&model, &x, &y, &warm).unwrap();
        assert!(b.residual_norm < a.residual_norm);
    }

    #[test]
    fn residual_is_mostly_monotone() {
        let model = SpringModel::default();
        let mut rng = crate::rng::seeded(17);
        let (mut decreasing, mut total) = (0usize, 0usize);
        for _ in 0..200 {
            let x = v(&[0.5 + 0.005 * rng.random_range(-1.0..1.0), 0.5 + 0.005 * rng.random_range(-1.0..1.0)]);
            let truth = v(&[rng.random_range(-1.5..2.5), rng.random_range(-1.0..2.0)]);
            let y = model.evaluate(&x, &truth).unwrap();
            let mut m = DVector::zeros(2);
            let mut prev = (model.evaluate(&x, &m).unwrap() - &y).norm();
            for _ in 0..300 {
                if prev <= 1e-3 {
                    break;
                }
                let (g, jac) = model.evaluate_with_jacobian(&x, &m).unwrap();
                m -= newton_step(&jac, &(g - &y), tikhonov_for(prev)).unwrap() * 0.1;
                let now = (model.evaluate(&x, &m).unwrap() - &y).norm();
                total += 1;
                if now <= prev {
                    decreasing += 1;
                }
                prev = now;
            }
        }
        assert!(decreasing as f64 >= 0.95 * total as f64, "{decreasing}/{total}");
    }

    fn spring_data(n: usize, seed: u64) -> Dataset {
        use crate::experiments::{generate_dataset, make_truth, TruthKind, TruthSpec};
        let truth = make_truth(&TruthSpec::new(TruthKind::Bimodal)).unwrap().unwrap();
        generate_dataset(&SpringModel::default(), &truth, n, 0.005, &mut crate::rng::seeded(seed)).unwrap()
    }

    #[test]
    fn stacked_scope_bounds_every_sample() {
        let data = spring_data(40, 1);
        let opts = InversionOptions { residual_tol: 1e-3, ..Default::default() };
        let out = invert_dataset(&SpringModel::default(), &data, &opts).unwrap();
        assert_eq!(out.report.n_converged, 40);
        let stacked = out.results.iter().map(|r| r.residual_norm.powi(2)).sum::<f64>().sqrt();
        assert!(stacked <= 1e-3);
        let iters = out.results[0].iterations;
        assert!(out.results.iter().all(|r| r.iterations == iters));
        // first-order bound ‖Δm‖ ≤ ‖J⁻¹‖₂‖R‖ with a margin for curvature
        let latent = data.latent.as_ref().unwrap();
        for (j, r) in out.results.iter().enumerate() {
            let jac = SpringModel::default().jacobian(&data.input(j), &r.m_opt).unwrap();
            let inv_norm = 1.0 / jac.singular_values().min();
            let err = (&r.m_opt - latent.row(j).transpose()).norm();
            assert!(err <= 1.1 * inv_norm * r.residual_norm, "row {j}: {err} vs {}", inv_norm * r.residual_norm);
        }
    }

    #[test]
    fn per_sample_scope_flags_each_row() {
        let data = spring_data(20, 2);
        let opts = InversionOptions { residual_tol: 1e-3, scope: ResidualScope::PerSample, ..Default::default() };
        let out = invert_dataset(&SpringModel::default(), &data, &opts).unwrap();
        for r in &out.results {
            assert!(r.converged && r.residual_norm <= 1e-3);
        }
        let short = InversionOptions { max_iter: 3, ..opts };
        let out = invert_dataset(&SpringModel::default(), &data, &short).unwrap();
        for r in &out.results {
            assert_eq!(r.converged, r.residual_norm <= 1e-3);
        }
    }

    #[test]
    fn zero_noise_matches_plain_inversion() {
        let data = spring_data(10, 3);
        for scope in [ResidualScope::Stacked, ResidualScope::PerSample] {
            let opts = InversionOptions { scope, ..Default::default() };
            let plain = invert_dataset(&SpringModel::default(), &data, &opts).unwrap();
            let noisy = invert_with_noise(&SpringModel::default(), &data, 0.0, 1, &opts, 9).unwrap();
            assert_eq!(plain, noisy);
        }
    }

    #[test]
    fn noise_widens_the_recovered_cloud() {
        let data = spring_data(10, 4);
        let opts = InversionOptions { scope: ResidualScope::PerSample, ..Default::default() };
        let spread = |delta: f64| {
            let out = invert_with_noise(&SpringModel::default(), &data, delta, 20, &opts, 5).unwrap();
            assert_eq!(out.samples.nrows(), 200);
            (0..10)
                .map(|j| linalg::column_std(&out.samples.rows(j * 20, 20).into_owned()).norm_squared())
                .sum::<f64>()
        };
        let (a, b, c) = (spread(1e-3), spread(1e-2), spread(1e-1));
        assert!(a < b && b < c, "{a} {b} {c}");
    }

    #[test]
    fn noisy_inversion_is_deterministic() {
        let data = spring_data(6, 6);
        let opts = InversionOptions::default();
        let a = invert_with_noise(&SpringModel::default(), &data, 0.01, 4, &opts, 11).unwrap();
        let b = invert_with_noise(&SpringModel::default(), &data, 0.01, 4, &opts, 11).unwrap();
        assert_eq!(a.samples, b.samples);
    }
}
