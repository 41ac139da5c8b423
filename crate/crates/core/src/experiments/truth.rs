//! Ground-truth latent distributions used to synthesize data.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::GaussianMixture;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruthKind {
    /// Deterministic map `m(x)`; no latent distribution.
    Analytic,
    Unimodal,
    Bimodal,
    UShape,
    /// Two-mode field coefficients, `μ₁ = 0`, `μ₂ = 4·1`.
    BimodalKl,
    /// Three-mode field coefficients in an even dimension.
    Trimodal,
    /// `N([1.1, 1.2, …], I)`.
    UnimodalKl,
}

impl TruthKind {
    pub const NAMES: [&'static str; 7] =
        ["analytic", "unimodal", "bimodal", "u_shape", "bimodal_kl", "trimodal", "unimodal_kl"];

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "analytic" => TruthKind::Analytic,
            "unimodal" => TruthKind::Unimodal,
            "bimodal" => TruthKind::Bimodal,
            "u_shape" => TruthKind::UShape,
            "bimodal_kl" => TruthKind::BimodalKl,
            "trimodal" => TruthKind::Trimodal,
            "unimodal_kl" => TruthKind::UnimodalKl,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self as usize]
    }

    /// Latent dimension when the kind fixes it.
    pub fn fixed_dim(self) -> Option<usize> {
        match self {
            TruthKind::Analytic | TruthKind::Unimodal | TruthKind::Bimodal | TruthKind::UShape => Some(2),
            _ => None,
        }
    }

    pub fn default_dim(self) -> usize {
        match self {
            TruthKind::BimodalKl => 28,
            TruthKind::Trimodal => 10,
            TruthKind::UnimodalKl => 6,
            _ => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthSpec {
    pub kind: TruthKind,
    pub dim: usize,
}

impl TruthSpec {
    pub fn new(kind: TruthKind) -> Self {
        Self { kind, dim: kind.default_dim() }
    }

    pub fn with_dim(kind: TruthKind, dim: usize) -> Result<Self> {
        if let Some(fixed) = kind.fixed_dim() {
            if fixed != dim {
                return Err(Error::config("truth.dim", format!("`{}` is {fixed}-dimensional", kind.name())));
            }
        }
        if dim == 0 {
            return Err(Error::config("truth.dim", "must be at least 1"));
        }
        if kind == TruthKind::Trimodal && dim % 2 != 0 {
            return Err(Error::config("truth.dim", "trimodal truth needs an even dimension"));
        }
        Ok(Self { kind, dim })
    }
}

/// `m = [sin(8x₁ + 0.1x₂), x₁ − 0.1x₂]`.
pub fn analytic_map(x: &[f64]) -> [f64; 2] {
    [(8.0 * x[0] + 0.1 * x[1]).sin(), x[0] - 0.1 * x[1]]
}

/// Centers of the U-shaped mixture, traced from the upper-left arm down and
/// back up the right arm.
pub const U_SHAPE_CENTERS: [[f64; 2]; 9] = [
    [-2.0, 2.0],
    [-2.0, 0.67],
    [-2.0, -0.67],
    [-2.0, -2.0],
    [0.0, -2.0],
    [2.0, -2.0],
    [2.0, -0.67],
    [2.0, 0.67],
    [2.0, 2.0],
];

pub const U_SHAPE_VARIANCE: f64 = 0.05;

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn matrix2(a: f64, b: f64, c: f64) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[a, b, b, c])
}

/// Mixture for every kind except [`TruthKind::Analytic`].
pub fn make_truth(spec: &TruthSpec) -> Result<Option<GaussianMixture>> {
    let d = spec.dim;
    let mixture = match spec.kind {
        TruthKind::Analytic => return Ok(None),
        TruthKind::Unimodal => GaussianMixture::uniform(vec![vector(&[1.0, 1.0])], vec![matrix2(1.4, 0.63, 0.41)])?,
        TruthKind::Bimodal => GaussianMixture::uniform(
            vec![vector(&[2.0, 2.0]), vector(&[-2.0, -2.0])],
            vec![matrix2(0.51, 0.49, 0.51), matrix2(0.51, -0.49, 0.51)],
        )?,
        TruthKind::UShape => GaussianMixture::uniform(
            U_SHAPE_CENTERS.iter().map(|c| vector(c)).collect(),
            vec![DMatrix::identity(2, 2) * U_SHAPE_VARIANCE; U_SHAPE_CENTERS.len()],
        )?,
        TruthKind::BimodalKl => {
            let rising = DVector::from_fn(d, |i, _| 0.11 + 0.01 * i as f64);
            let falling = DVector::from_fn(d, |i, _| 0.11 + 0.01 * (d - 1 - i) as f64);
            GaussianMixture::uniform(
                vec![DVector::zeros(d), DVector::from_element(d, 4.0)],
                vec![DMatrix::from_diagonal(&rising), DMatrix::from_diagonal(&falling)],
            )?
        }
        TruthKind::Trimodal => {
            let h = d / 2;
            let rising = DVector::from_fn(d, |i, _| 0.11 + 0.01 * i as f64);
            let falling = DVector::from_fn(d, |i, _| 0.11 + 0.01 * (d - 1 - i) as f64);
            GaussianMixture::uniform(
                vec![
                    DVector::zeros(d),
                    DVector::from_element(d, 4.0),
                    DVector::from_fn(d, |i, _| if i < h { 6.0 } else { -1.0 }),
                ],
                vec![
                    DMatrix::from_diagonal(&rising),
                    DMatrix::from_diagonal(&falling),
                    DMatrix::identity(d, d) * 0.1,
                ],
            )?
        }
        TruthKind::UnimodalKl => GaussianMixture::uniform(
            vec![DVector::from_fn(d, |i, _| 1.1 + 0.1 * i as f64)],
            vec![DMatrix::identity(d, d)],
        )?,
    };
    Ok(Some(mixture))
}

/// Draws `n` latent rows with component counts fixed by the weights.
pub fn sample_truth<R: Rng + ?Sized>(mixture: &GaussianMixture, n: usize, rng: &mut R) -> DMatrix<f64> {
    mixture.sample_stratified(n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg;
    use approx::assert_relative_eq;

    #[test]
    fn analytic_map_examples() {
        assert_eq!(analytic_map(&[0.0, 0.0]), [0.0, 0.0]);
        let m = analytic_map(&[0.5, 0.5]);
        assert_relative_eq!(m[0], 4.05f64.sin(), epsilon = 1e-15);
        assert!((m[0] + 0.78853).abs() < 1e-5);
        assert_relative_eq!(m[1], 0.45, epsilon = 1e-15);
        assert_eq!(analytic_map(&[1.0, 0.0]), [8f64.sin(), 1.0]);
    }

    #[test]
    fn unimodal_covariance_within_five_percent() {
        let g = make_truth(&TruthSpec::new(TruthKind::Unimodal)).unwrap().unwrap();
        let s = g.sample(100_000, &mut crate::rng::seeded(1));
        let cov = linalg::sample_covariance(&s);
        let expected = matrix2(1.4, 0.63, 0.41);
        for i in 0..2 {
            for j in 0..2 {
                assert!((cov[(i, j)] - expected[(i, j)]).abs() <= 0.05 * expected[(i, j)], "{cov}");
            }
        }
    }

    #[test]
    fn trimodal_clusters_are_recovered() {
        let g = make_truth(&TruthSpec::new(TruthKind::Trimodal)).unwrap().unwrap();
        let s = g.sample(30_000, &mut crate::rng::seeded(2));
        let mut sums = vec![DVector::zeros(10); 3];
        let mut counts = [0usize; 3];
        for row in s.row_iter() {
            let r = row.transpose();
            let k = (0..3)
                .min_by(|&a, &b| (&r - g.mean(a)).norm().total_cmp(&(&r - g.mean(b)).norm()))
                .unwrap();
            sums[k] += &r;
            counts[k] += 1;
        }
        for k in 0..3 {
            let center = &sums[k] / counts[k] as f64;
            assert!((center - g.mean(k)).amax() <= 0.05);
        }
    }

    #[test]
    fn kl_truths_have_requested_dimension() {
        let g = make_truth(&TruthSpec::with_dim(TruthKind::BimodalKl, 6).unwrap()).unwrap().unwrap();
        assert_eq!(g.dim(), 6);
        assert_relative_eq!(g.covariance(0)[(5, 5)], 0.16, epsilon = 1e-15);
        assert_relative_eq!(g.covariance(1)[(0, 0)], 0.16, epsilon = 1e-15);
        let g = make_truth(&TruthSpec::new(TruthKind::UnimodalKl)).unwrap().unwrap();
        assert_relative_eq!(g.mean(0)[5], 1.6, epsilon = 1e-12);
        assert!(TruthSpec::with_dim(TruthKind::Bimodal, 3).is_err());
        assert!(TruthSpec::with_dim(TruthKind::Trimodal, 5).is_err());
    }

    #[test]
    fn names_round_trip() {
        for name in TruthKind::NAMES {
            assert_eq!(TruthKind::parse(name).unwrap().name(), name);
        }
        assert!(TruthKind::parse("quadmodal").is_none());
    }
}
