//! Two linear springs in series with parameterized stiffnesses.
//!
//! `k1 = x1·g(m1) + 0.1`, `k2 = x2·g(m2) + 0.5` and the displacements solve
//! `[[k1, −k1], [−k1, k1 + k2]]·u = [f1, f2]`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::ForwardModel;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StiffnessMap {
    /// `g(m) = exp(m)`, injective.
    Exp,
    /// `g(m) = m²`, two-to-one.
    Square,
}

impl StiffnessMap {
    pub fn value(self, m: f64) -> f64 {
        match self {
            StiffnessMap::Exp => m.exp(),
            StiffnessMap::Square => m * m,
        }
    }

    pub fn derivative(self, m: f64) -> f64 {
        match self {
            StiffnessMap::Exp => m.exp(),
            StiffnessMap::Square => 2.0 * m,
        }
    }
}

const K1_OFFSET: f64 = 0.1;
const K2_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpringModel {
    pub g: StiffnessMap,
    pub forces: [f64; 2],
}

impl Default for SpringModel {
    fn default() -> Self {
        Self::new(StiffnessMap::Exp)
    }
}

impl SpringModel {
    pub fn new(g: StiffnessMap) -> Self {
        Self { g, forces: [1.0, 1.0] }
    }

    pub fn stiffness(&self, x: &[f64], m: &[f64]) -> (f64, f64) {
        (
            x[0] * self.g.value(m[0]) + K1_OFFSET,
            x[1] * self.g.value(m[1]) + K2_OFFSET,
        )
    }

    fn checked_stiffness(&self, x: &[f64], m: &[f64]) -> Result<(f64, f64)> {
        check_len("spring input", x.len())?;
        check_len("spring latent vector", m.len())?;
        let (k1, k2) = self.stiffness(x, m);
        if !(k1 > 0.0 && k2 > 0.0) || !k1.is_finite() || !k2.is_finite() {
            return Err(Error::Singular(format!(
                "spring stiffness must be positive and finite, got k1={k1}, k2={k2}"
            )));
        }
        Ok((k1, k2))
    }

    pub fn system_matrix(k1: f64, k2: f64) -> Matrix2<f64> {
        Matrix2::new(k1, -k1, -k1, k1 + k2)
    }

    /// Closed-form displacements: `u2 = (f1+f2)/k2`, `u1 = u2 + f1/k1`.
    pub fn solve(&self, x: &[f64], m: &[f64]) -> Result<Vector2<f64>> {
        let (k1, k2) = self.checked_stiffness(x, m)?;
        let [f1, f2] = self.forces;
        let u2 = (f1 + f2) / k2;
        Ok(Vector2::new(u2 + f1 / k1, u2))
    }

    /// `∂u/∂m` by direct differentiation of `K u = f`: column `i` is
    /// `−K⁻¹ (∂K/∂m_i) u`.
    pub fn jacobian_2x2(&self, x: &[f64], m: &[f64]) -> Result<Matrix2<f64>> {
        let (k1, k2) = self.checked_stiffness(x, m)?;
        let u = self.solve(x, m)?;
        let k = Self::system_matrix(k1, k2);
        let lu = k.lu();
        let dk1 = Matrix2::new(1.0, -1.0, -1.0, 1.0) * (x[0] * self.g.derivative(m[0]));
        let dk2 = Matrix2::new(0.0, 0.0, 0.0, 1.0) * (x[1] * self.g.derivative(m[1]));
        let mut jac = Matrix2::zeros();
        for (i, dk) in [dk1, dk2].iter().enumerate() {
            let column = lu
                .solve(&(-(dk * u)))
                .ok_or_else(|| Error::Singular("spring system matrix".into()))?;
            jac.set_column(i, &column);
        }
        Ok(jac)
    }
}

fn check_len(context: &'static str, actual: usize) -> Result<()> {
    if actual != 2 {
        return Err(Error::DimensionMismatch { context, expected: 2, actual });
    }
    Ok(())
}

impl ForwardModel for SpringModel {
    fn input_dim(&self) -> usize {
        2
    }

    fn latent_dim(&self) -> usize {
        2
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, x: &DVector<f64>, m: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.solve(x.as_slice(), m.as_slice())?;
        Ok(DVector::from_column_slice(u.as_slice()))
    }

    fn jacobian(&self, x: &DVector<f64>, m: &DVector<f64>) -> Result<DMatrix<f64>> {
        let j = self.jacobian_2x2(x.as_slice(), m.as_slice())?;
        Ok(DMatrix::from_column_slice(2, 2, j.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward_models::finite_difference_jacobian;
    use approx::assert_relative_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn stiffness_examples() {
        let exp = SpringModel::new(StiffnessMap::Exp);
        let (k1, k2) = exp.stiffness(&[0.5, 0.5], &[0.0, 0.0]);
        assert_relative_eq!(k1, 0.6, epsilon = 1e-15);
        assert_relative_eq!(k2, 1.0, epsilon = 1e-15);

        for g in [StiffnessMap::Exp, StiffnessMap::Square] {
            let (k1, k2) = SpringModel::new(g).stiffness(&[0.0, 0.0], &[5.0, 5.0]);
            assert_eq!((k1, k2), (0.1, 0.5));
        }

        let sq = SpringModel::new(StiffnessMap::Square);
        let (k1, k2) = sq.stiffness(&[1.0, 1.0], &[1.0, -1.0]);
        assert_relative_eq!(k1, 1.1, epsilon = 1e-15);
        assert_relative_eq!(k2, 1.5, epsilon = 1e-15);
    }

    #[test]
    fn solve_reference_point() {
        let u = SpringModel::default().solve(&[0.5, 0.5], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(u[0], 11.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(u[1], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn closed_form_matches_dense_solve() {
        let model = SpringModel::default();
        let (x, m) = ([0.9, 0.8], [2.0, 2.0]);
        let u = model.solve(&x, &m).unwrap();
        let (k1, k2) = model.stiffness(&x, &m);
        let dense = SpringModel::system_matrix(k1, k2)
            .lu()
            .solve(&Vector2::new(1.0, 1.0))
            .unwrap();
        assert_relative_eq!(u, dense, epsilon = 1e-12);
    }

    #[test]
    fn rigid_first_spring_limit() {
        let u = SpringModel::default().solve(&[0.5, 0.5], &[30.0, 0.0]).unwrap();
        assert!((u[0] - u[1]).abs() < 1e-10);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = SpringModel::default();
        let (x, m) = (dv(&[0.5, 0.5]), dv(&[0.3, -0.2]));
        let jac = model.jacobian(&x, &m).unwrap();
        let fd = finite_difference_jacobian(&model, &x, &m, 1e-6).unwrap();
        for (a, b) in jac.iter().zip(fd.iter()) {
            if b.abs() > 1e-12 {
                assert!(((a - b) / b).abs() <= 1e-6, "{a} vs {b}");
            } else {
                assert!(a.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn square_map_jacobian_vanishes_at_origin() {
        let model = SpringModel::new(StiffnessMap::Square);
        let jac = model.jacobian(&dv(&[0.5, 0.5]), &dv(&[0.0, 0.0])).unwrap();
        assert_eq!(jac.amax(), 0.0);
    }

    #[test]
    fn symmetric_inputs_match_oracle() {
        let model = SpringModel::default();
        let (x, m) = (dv(&[0.6, 0.6]), dv(&[0.4, 0.4]));
        let jac = model.jacobian(&x, &m).unwrap();
        let fd = finite_difference_jacobian(&model, &x, &m, 1e-6).unwrap();
        // u2 depends only on the second spring.
        assert!(jac[(1, 0)].abs() <= 1e-14);
        assert!(fd[(1, 0)].abs() < 1e-10);
        assert_relative_eq!(jac, fd, max_relative = 1e-6);
    }

    #[test]
    fn non_positive_stiffness_is_an_error() {
        let model = SpringModel::new(StiffnessMap::Square);
        let err = model.solve(&[-1.0, 0.5], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
        assert!(model.jacobian(&dv(&[-1.0, 0.5]), &dv(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn evaluate_is_deterministic() {
        let model = SpringModel::default();
        let (x, m) = (dv(&[0.51, 0.49]), dv(&[0.7, -1.3]));
        let a = model.evaluate(&x, &m).unwrap();
        let b = model.evaluate(&x, &m).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }
}
