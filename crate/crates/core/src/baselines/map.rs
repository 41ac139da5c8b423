//! MAP estimation with a BFGS Laplace covariance, and the mixture of MAP
//! estimates from several starting points.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::GaussianMixture;
use crate::experiments::Dataset;
use crate::forward_models::{map_scalar_gradient, ForwardModel};
use crate::{linalg, Error, Result};

/// `P(m) = ½ Σ_j ‖y⁽ʲ⁾ − G(x⁽ʲ⁾, m)‖²_Γ + ½ ‖m − m0‖²_Σ0` with `‖a‖²_A = aᵀA⁻¹a`.
pub fn map_objective<M: ForwardModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    m: &DVector<f64>,
    gamma: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    m0: &DVector<f64>,
) -> Result<f64> {
    let gamma_chol = linalg::cholesky(gamma.clone(), "noise covariance")?;
    let prior_chol = linalg::cholesky(sigma0.clone(), "prior covariance")?;
    let dev = m - m0;
    let mut total = 0.5 * dev.dot(&prior_chol.solve(&dev));
    for j in 0..dataset.len() {
        let r = dataset.observation(j) - model.evaluate(&dataset.input(j), m)?;
        total += 0.5 * r.dot(&gamma_chol.solve(&r));
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop when `‖∇f‖ ≤ grad_tol · max(1, |f|)`.
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iter: 200, grad_tol: 1e-9, armijo: 1e-4, backtrack: 0.5, max_backtracks: 60 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient: DVector<f64>,
    /// Final inverse-Hessian approximation.
    pub inv_hessian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Quasi-Newton minimization with the dense inverse-Hessian BFGS update and
/// backtracking Armijo line search. The initial approximation is the
/// identity, rescaled by `sᵀy / yᵀy` after the first step.
pub fn bfgs<F, G>(f: F, grad: G, x0: &DVector<f64>, opts: &BfgsOptions) -> Result<BfgsResult>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
    G: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x)?;
    let mut g = grad(&x)?;
    let mut h = DMatrix::identity(n, n);
    let mut first = true;
    for iter in 0..opts.max_iter {
        if g.norm() <= opts.grad_tol * fx.abs().max(1.0) {
            return Ok(BfgsResult { x, value: fx, gradient: g, inv_hessian: h, iterations: iter, converged: true });
        }
        let mut p = -(&h * &g);
        let mut slope = g.dot(&p);
        if slope >= 0.0 {
            // not a descent direction: restart from steepest descent
            h = DMatrix::identity(n, n);
            p = -g.clone();
            slope = g.dot(&p);
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let trial = &x + &p * t;
            if let Ok(ft) = f(&trial) {
                if ft.is_finite() && ft <= fx + opts.armijo * t * slope {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            t *= opts.backtrack;
        }
        let Some((x_new, f_new)) = accepted else {
            return Ok(BfgsResult { x, value: fx, gradient: g, inv_hessian: h, iterations: iter, converged: false });
        };
        let g_new = grad(&x_new)?;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first {
                h *= sy / y.dot(&y);
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρsyᵀ) H (I − ρysᵀ) + ρssᵀ, expanded
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let stalled = (fx - f_new).abs() <= 1e-15 * fx.abs().max(1.0) && s.norm() <= 1e-14 * x.norm().max(1.0);
        x = x_new;
        fx = f_new;
        g = g_new;
        if stalled {
            return Ok(BfgsResult { x, value: fx, gradient: g, inv_hessian: h, iterations: iter + 1, converged: false });
        }
    }
    let converged = g.norm() <= opts.grad_tol * fx.abs().max(1.0);
    Ok(BfgsResult { x, value: fx, gradient: g, inv_hessian: h, iterations: opts.max_iter, converged })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEstimate {
    pub m_map: DVector<f64>,
    /// Laplace covariance: the symmetrized final BFGS inverse Hessian, or the
    /// prior covariance when that is not positive definite.
    pub sigma1: DMatrix<f64>,
    pub used_prior_fallback: bool,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn map_estimate<M: ForwardModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    start: &DVector<f64>,
    gamma: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    m0: &DVector<f64>,
    opts: &BfgsOptions,
) -> Result<MapEstimate> {
    let result = bfgs(
        |m| map_objective(model, dataset, m, gamma, sigma0, m0),
        |m| map_scalar_gradient(model, dataset, m, gamma, sigma0, m0),
        start,
        opts,
    )?;
    let candidate = linalg::symmetrize(&result.inv_hessian);
    let (sigma1, used_prior_fallback) = if linalg::is_spd(&candidate) {
        (candidate, false)
    } else {
        log::warn!("final BFGS inverse Hessian is not positive definite; using the prior covariance");
        (sigma0.clone(), true)
    };
    Ok(MapEstimate {
        m_map: result.x,
        sigma1,
        used_prior_fallback,
        converged: result.converged,
        iterations: result.iterations,
        objective: result.value,
    })
}

/// Deterministic starts covering a Gaussian prior `N(m0, Σ0)`: the mean,
/// then for radius `r = 1, 2, …` the points `±r` along each axis and the
/// diagonal points `r·s·(e_i ± e_{i+1})` (at most `2d` per radius), all mapped
/// through the Cholesky factor of `Σ0`, truncated to `n`.
pub fn gaussian_coverage_starts(m0: &DVector<f64>, sigma0: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let d = m0.len();
    let l = linalg::cholesky(sigma0.clone(), "prior covariance")?.l();
    let mut unit: Vec<DVector<f64>> = vec![DVector::zeros(d)];
    let mut radius = 1.0;
    while unit.len() < n {
        for i in 0..d {
            for s in [1.0, -1.0] {
                let mut e = DVector::zeros(d);
                e[i] = s * radius;
                unit.push(e);
            }
        }
        let mut diagonals: Vec<DVector<f64>> = Vec::new();
        if d > 1 {
            'outer: for i in 0..d {
                let k = (i + 1) % d;
                for t in [1.0, -1.0] {
                    for s in [1.0, -1.0] {
                        let mut e = DVector::zeros(d);
                        e[i] += s * radius;
                        e[k] += s * t * radius;
                        if !diagonals.contains(&e) {
                            diagonals.push(e);
                        }
                        if diagonals.len() == 2 * d {
                            break 'outer;
                        }
                    }
                }
            }
        }
        unit.extend(diagonals);
        radius += 1.0;
    }
    unit.truncate(n);
    let mut out = DMatrix::zeros(n, d);
    for (i, z) in unit.iter().enumerate() {
        out.set_row(i, &(m0 + &l * z).transpose());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MapMixture {
    pub mixture: GaussianMixture,
    pub estimates: Vec<MapEstimate>,
    /// Starts whose optimization failed, with the error message.
    pub dropped: Vec<(usize, String)>,
}

/// Equal-weight mixture of the Laplace approximations found from each start.
///
/// With `m0 = None` every start is also the prior mean of its own objective.
pub fn map_posterior_mixture<M: ForwardModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    starts: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    m0: Option<&DVector<f64>>,
    opts: &BfgsOptions,
) -> Result<MapMixture> {
    if starts.nrows() == 0 {
        return Err(Error::InvalidArgument("need at least one MAP start".into()));
    }
    let outcomes: Vec<Result<MapEstimate>> = (0..starts.nrows())
        .into_par_iter()
        .map(|i| {
            let start = starts.row(i).transpose();
            map_estimate(model, dataset, &start, gamma, sigma0, m0.unwrap_or(&start), opts)
        })
        .collect();
    let mut estimates = Vec::new();
    let mut dropped = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(e) => estimates.push(e),
            Err(e) => dropped.push((i, e.to_string())),
        }
    }
    if estimates.is_empty() {
        return Err(Error::InvalidArgument(format!("every MAP start failed: {}", dropped[0].1)));
    }
    let mixture = GaussianMixture::uniform(
        estimates.iter().map(|e| e.m_map.clone()).collect(),
        estimates.iter().map(|e| e.sigma1.clone()).collect(),
    )?;
    Ok(MapMixture { mixture, estimates, dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_models::{map_scalar_gradient_direct, SpringModel};
    use approx::assert_relative_eq;
    use rand::Rng;

    /// `G(x, m) = A m`.
    struct Linear(DMatrix<f64>);

    impl ForwardModel for Linear {
        fn input_dim(&self) -> usize {
            1
        }
        fn latent_dim(&self) -> usize {
            self.0.ncols()
        }
        fn output_dim(&self) -> usize {
            self.0.nrows()
        }
        fn evaluate(&self, _: &DVector<f64>, m: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(&self.0 * m)
        }
        fn jacobian(&self, _: &DVector<f64>, _: &DVector<f64>) -> Result<DMatrix<f64>> {
            Ok(self.0.clone())
        }
    }

    fn linear_problem() -> (Linear, Dataset, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 2.0, 0.7, 0.1]);
        let ys = DMatrix::from_row_slice(4, 3, &[1.0, 0.2, -0.5, 0.8, 0.1, -0.2, 1.3, 0.4, -0.1, 0.9, 0.0, -0.4]);
        let data = Dataset::new(DMatrix::zeros(4, 1), ys).unwrap();
        let gamma = DMatrix::from_row_slice(3, 3, &[0.5, 0.1, 0.0, 0.1, 0.4, 0.05, 0.0, 0.05, 0.3]);
        let sigma0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let m0 = DVector::from_column_slice(&[0.2, -0.1]);
        (Linear(a), data, gamma, sigma0, m0)
    }

    #[test]
    fn linear_gaussian_map_matches_closed_form() {
        let (model, data, gamma, sigma0, m0) = linear_problem();
        let gi = gamma.clone().try_inverse().unwrap();
        let si = sigma0.clone().try_inverse().unwrap();
        let a = &model.0;
        let precision = a.transpose() * &gi * a * data.len() as f64 + &si;
        let mut rhs = &si * &m0;
        for j in 0..data.len() {
            rhs += a.transpose() * &gi * data.observation(j);
        }
        let exact = precision.clone().try_inverse().unwrap() * rhs;
        let est = map_estimate(&model, &data, &DVector::zeros(2), &gamma, &sigma0, &m0, &BfgsOptions::default()).unwrap();
        assert!((&est.m_map - &exact).amax() <= 1e-6, "{} vs {}", est.m_map, exact);
        assert!(linalg::is_spd(&est.sigma1));
        assert!(!est.used_prior_fallback);
    }

    #[test]
    fn weak_data_returns_prior_mean() {
        let (model, data, _, sigma0, m0) = linear_problem();
        let huge = DMatrix::identity(3, 3) * 1e12;
        let est = map_estimate(&model, &data, &DVector::from_column_slice(&[3.0, 3.0]), &huge, &sigma0, &m0, &BfgsOptions::default())
            .unwrap();
        assert!((est.m_map - m0).amax() <= 1e-5);
    }

    #[test]
    fn objective_examples() {
        let (model, _, _, _, _) = linear_problem();
        let m0 = DVector::from_column_slice(&[0.3, 0.6]);
        let y = &model.0 * &m0;
        let data = Dataset::new(DMatrix::zeros(1, 1), DMatrix::from_row_slice(1, 3, y.as_slice())).unwrap();
        let id3 = DMatrix::identity(3, 3);
        let id2 = DMatrix::identity(2, 2);
        assert_eq!(map_objective(&model, &data, &m0, &id3, &id2, &m0).unwrap(), 0.0);
        let m = DVector::from_column_slice(&[1.0, -1.0]);
        let r = &y - &model.0 * &m;
        let p = &m - &m0;
        assert_relative_eq!(
            map_objective(&model, &data, &m, &id3, &id2, &m0).unwrap(),
            0.5 * (r.norm_squared() + p.norm_squared()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn spring_gradient_matches_finite_differences() {
        let model = SpringModel::default();
        let mut rng = crate::rng::seeded(4);
        let inputs = DMatrix::from_fn(5, 2, |_, _| 0.5 + 0.005 * rng.random_range(-1.0..1.0));
        let latent = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let ys = crate::experiments::observe(&model, &inputs, &latent).unwrap();
        let data = Dataset::new(inputs, ys).unwrap();
        let gamma = DMatrix::identity(2, 2) * 0.01;
        let sigma0 = DMatrix::identity(2, 2);
        let m0 = DVector::zeros(2);
        let m = DVector::from_column_slice(&[0.4, -0.3]);
        let grad = map_scalar_gradient(&model, &data, &m, &gamma, &sigma0, &m0).unwrap();
        let direct = map_scalar_gradient_direct(&model, &data, &m, &gamma, &sigma0, &m0).unwrap();
        assert!((&grad - direct).amax() <= 1e-10 * grad.amax());
        let h = 1e-6;
        for i in 0..2 {
            let mut p = m.clone();
            let mut q = m.clone();
            p[i] += h;
            q[i] -= h;
            let fd = (map_objective(&model, &data, &p, &gamma, &sigma0, &m0).unwrap()
                - map_objective(&model, &data, &q, &gamma, &sigma0, &m0).unwrap())
                / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-5 * fd.abs(), "{fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn perfect_fit_gradient_is_prior_term() {
        let model = SpringModel::default();
        let m = DVector::from_column_slice(&[0.2, 0.1]);
        let x = DVector::from_column_slice(&[0.5, 0.5]);
        let y = model.evaluate(&x, &m).unwrap();
        let data = Dataset::new(DMatrix::from_row_slice(1, 2, x.as_slice()), DMatrix::from_row_slice(1, 2, y.as_slice())).unwrap();
        let sigma0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let m0 = DVector::from_column_slice(&[-0.3, 0.4]);
        let grad = map_scalar_gradient(&model, &data, &m, &DMatrix::identity(2, 2), &sigma0, &m0).unwrap();
        let expected = sigma0.try_inverse().unwrap() * (&m - &m0);
        assert!((grad - expected).amax() <= 1e-12);
    }

    #[test]
    fn coverage_starts_layout() {
        let starts = gaussian_coverage_starts(&DVector::zeros(2), &DMatrix::identity(2, 2), 17).unwrap();
        assert_eq!(starts.nrows(), 17);
        assert_eq!(starts.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        let radius1 = (1..9).filter(|&i| starts.row(i).amax() == 1.0).count();
        assert_eq!(radius1, 8);
        assert!((9..17).all(|i| starts.row(i).amax() == 2.0));
        let mut rows: Vec<Vec<i64>> = starts.row_iter().map(|r| r.iter().map(|v| *v as i64).collect()).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 17);
        assert_eq!(gaussian_coverage_starts(&DVector::zeros(2), &DMatrix::identity(2, 2), 1).unwrap().nrows(), 1);
    }

    #[test]
    fn single_start_mixture_is_laplace_posterior() {
        let (model, data, gamma, sigma0, m0) = linear_problem();
        let starts = DMatrix::zeros(1, 2);
        let mix = map_posterior_mixture(&model, &data, &starts, &gamma, &sigma0, Some(&m0), &BfgsOptions::default()).unwrap();
        assert_eq!(mix.mixture.n_components(), 1);
        assert_eq!(mix.mixture.mean(0), &mix.estimates[0].m_map);
    }

    #[test]
    fn bfgs_minimizes_rosenbrock() {
        let f = |x: &DVector<f64>| Ok((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2));
        let g = |x: &DVector<f64>| {
            Ok(DVector::from_column_slice(&[
                -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]),
                200.0 * (x[1] - x[0] * x[0]),
            ]))
        };
        let res = bfgs(f, g, &DVector::from_column_slice(&[-1.2, 1.0]), &BfgsOptions { max_iter: 500, ..Default::default() }).unwrap();
        assert!((res.x - DVector::from_element(2, 1.0)).amax() <= 1e-5);
    }
}
