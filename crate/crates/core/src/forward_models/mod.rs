//! Forward models `y = G(x, m)` and their sensitivities.
//!
//! A model maps an input `x` (design or load parameters, length `l`) and a
//! latent vector `m` (length `d`) to an observation `y` (length `n`).

mod fem;
mod mesh;
mod spring;

pub use fem::{FemModel, FemProblem};
pub use mesh::{Circle, Mesh};
pub use spring::{SpringModel, StiffnessMap};

use nalgebra::{DMatrix, DVector};

use crate::experiments::Dataset;
use crate::{linalg, Error, Result};

pub trait ForwardModel: Send + Sync {
    /// Length of the input `x`.
    fn input_dim(&self) -> usize;
    /// Length of the latent vector `m`.
    fn latent_dim(&self) -> usize;
    /// Length of the observation `y`.
    fn output_dim(&self) -> usize;

    fn evaluate(&self, x: &DVector<f64>, m: &DVector<f64>) -> Result<DVector<f64>>;

    /// `∂G/∂m`, an `n × d` matrix.
    fn jacobian(&self, x: &DVector<f64>, m: &DVector<f64>) -> Result<DMatrix<f64>>;

    fn evaluate_with_jacobian(
        &self,
        x: &DVector<f64>,
        m: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.evaluate(x, m)?, self.jacobian(x, m)?))
    }

    /// `(∂G/∂m)ᵀ w`. Models backed by a linear solve override this with an
    /// adjoint solve instead of forming the full Jacobian.
    fn jacobian_transpose_product(
        &self,
        x: &DVector<f64>,
        m: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(self.jacobian(x, m)?.transpose() * w)
    }
}

impl<T: ForwardModel + ?Sized> ForwardModel for &T {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn latent_dim(&self) -> usize {
        (**self).latent_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn evaluate(&self, x: &DVector<f64>, m: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).evaluate(x, m)
    }
    fn jacobian(&self, x: &DVector<f64>, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(x, m)
    }
    fn evaluate_with_jacobian(
        &self,
        x: &DVector<f64>,
        m: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        (**self).evaluate_with_jacobian(x, m)
    }
    fn jacobian_transpose_product(
        &self,
        x: &DVector<f64>,
        m: &DVector<f64>,
        w: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        (**self).jacobian_transpose_product(x, m, w)
    }
}

/// Central finite-difference Jacobian of `model.evaluate` in `m`.
pub fn finite_difference_jacobian<M: ForwardModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    m: &DVector<f64>,
    step: f64,
) -> Result<DMatrix<f64>> {
    let mut jac = DMatrix::zeros(model.output_dim(), m.len());
    for i in 0..m.len() {
        let mut plus = m.clone();
        let mut minus = m.clone();
        plus[i] += step;
        minus[i] -= step;
        let column = (model.evaluate(x, &plus)? - model.evaluate(x, &minus)?) / (2.0 * step);
        jac.set_column(i, &column);
    }
    Ok(jac)
}

fn check_map_args(
    model: &(impl ForwardModel + ?Sized),
    m: &DVector<f64>,
    gamma: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    m0: &DVector<f64>,
) -> Result<()> {
    let d = model.latent_dim();
    for (context, actual) in [("latent vector", m.len()), ("prior mean", m0.len()), ("prior covariance", sigma0.nrows())] {
        if actual != d {
            return Err(Error::DimensionMismatch { context, expected: d, actual });
        }
    }
    if gamma.nrows() != model.output_dim() {
        return Err(Error::DimensionMismatch {
            context: "noise covariance",
            expected: model.output_dim(),
            actual: gamma.nrows(),
        });
    }
    Ok(())
}

/// Gradient of the MAP objective `½Σ‖y−G(x,m)‖²_Γ + ½‖m−m0‖²_Σ0`.
///
/// The data term is `−Σ_j (∂G/∂m)ᵀ Γ⁻¹ (y_j − G_j)`, evaluated through
/// [`ForwardModel::jacobian_transpose_product`], which is an adjoint solve
/// for the finite-element model.
pub fn map_scalar_gradient<M: ForwardModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    m: &DVector<f64>,
    gamma: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    m0: &DVector<f64>,
) -> Result<DVector<f64>> {
    map_gradient_with(model, dataset, m, gamma, sigma0, m0, |x, m, w| {
        model.jacobian_transpose_product(x, m, w)
    })
}

/// Same gradient as [`map_scalar_gradient`] but through the explicit Jacobian.
pub fn map_scalar_gradient_direct<M: ForwardModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    m: &DVector<f64>,
    gamma: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    m0: &DVector<f64>,
) -> Result<DVector<f64>> {
    map_gradient_with(model, dataset, m, gamma, sigma0, m0, |x, m, w| {
        Ok(model.jacobian(x, m)?.transpose() * w)
    })
}

fn map_gradient_with<M, F>(
    model: &M,
    dataset: &Dataset,
    m: &DVector<f64>,
    gamma: &DMatrix<f64>,
    sigma0: &DMatrix<f64>,
    m0: &DVector<f64>,
    vjp: F,
) -> Result<DVector<f64>>
where
    M: ForwardModel + ?Sized,
    F: Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    check_map_args(model, m, gamma, sigma0, m0)?;
    let gamma_chol = linalg::cholesky(gamma.clone(), "noise covariance")?;
    let mut grad = linalg::solve_spd(sigma0.clone(), &(m - m0), "prior covariance")?;
    for j in 0..dataset.len() {
        let x = dataset.input(j);
        let misfit = dataset.observation(j) - model.evaluate(&x, m)?;
        let weighted = gamma_chol.solve(&misfit);
        grad -= vjp(&x, m, &weighted)?;
    }
    Ok(grad)
}
