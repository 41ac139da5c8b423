//! Karhunen-Loève expansion of the log-modulus field.
//!
//! The covariance is the separable exponential kernel
//! `C(x, x') = exp(−‖x − x'‖₁ / ℓ)` on `[0,1]²`, so 2D eigenpairs are tensor
//! products of the analytic 1D eigenpairs of `exp(−|s − t| / ℓ)` on `[0,1]`.
//! The modulus on element `e` is `exp(Σ_i √λ_i Ê_i(c_e) m_i)` with the basis
//! evaluated once at the element centroids `c_e`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest log-modulus accepted before `exp` is considered an overflow.
pub const MAX_LOG_MODULUS: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Parity {
    /// `cos(w (x − ½))`
    Even,
    /// `sin(w (x − ½))`
    Odd,
}

/// One analytic eigenpair of the 1D exponential kernel on `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenpair1d {
    pub value: f64,
    pub frequency: f64,
    pub parity: Parity,
    norm: f64,
}

impl Eigenpair1d {
    /// Eigenfunction value at `x ∈ [0,1]`, normalized in `L²[0,1]`.
    pub fn eval(&self, x: f64) -> f64 {
        let t = self.frequency * (x - 0.5);
        match self.parity {
            Parity::Even => t.cos() / self.norm,
            Parity::Odd => t.sin() / self.norm,
        }
    }
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, mode: usize) -> Result<f64> {
    let (mut flo, fhi) = (f(lo), f(hi));
    if !(flo * fhi < 0.0) {
        return Err(Error::Bracketing { mode });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        if fmid == 0.0 || (hi - lo) <= 4.0 * f64::EPSILON * mid.abs() {
            return Ok(mid);
        }
        if flo * fmid < 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = fmid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// The `n_modes` leading eigenpairs of `∫₀¹ exp(−|x−x'|/ℓ) φ(x') dx'`.
///
/// With half-width `a = ½` and `c = 1/ℓ`, even modes have frequencies solving
/// `c cos(wa) − w sin(wa) = 0` on `(kπ/a, (k+½)π/a)` and odd modes
/// `w cos(wa) + c sin(wa) = 0` on `((k+½)π/a, (k+1)π/a)`; both are found by
/// bisection. Eigenvalues are `2ℓ / (ℓ²w² + 1)`, in descending order.
pub fn exp_kernel_eigenpairs_1d(n_modes: usize, correlation_length: f64) -> Result<Vec<Eigenpair1d>> {
    if n_modes == 0 {
        return Err(Error::InvalidArgument("at least one KL mode is required".into()));
    }
    if !(correlation_length > 0.0) {
        return Err(Error::InvalidArgument("correlation length must be positive".into()));
    }
    let a = 0.5;
    let c = 1.0 / correlation_length;
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut pairs = Vec::with_capacity(n_modes);
    for mode in 0..n_modes {
        let k = (mode / 2) as f64;
        let (frequency, parity) = if mode % 2 == 0 {
            let lo = k * std::f64::consts::PI / a;
            let hi = (k * std::f64::consts::PI + half_pi) / a;
            let w = bisect(|w| c * (w * a).cos() - w * (w * a).sin(), lo, hi, mode)?;
            (w, Parity::Even)
        } else {
            let lo = (k * std::f64::consts::PI + half_pi) / a;
            let hi = (k + 1.0) * std::f64::consts::PI / a;
            let w = bisect(|w| w * (w * a).cos() + c * (w * a).sin(), lo, hi, mode)?;
            (w, Parity::Odd)
        };
        let s = (2.0 * frequency * a).sin() / (2.0 * frequency);
        let norm = match parity {
            Parity::Even => (a + s).sqrt(),
            Parity::Odd => (a - s).sqrt(),
        };
        let value = 2.0 * correlation_length / (correlation_length.powi(2) * frequency.powi(2) + 1.0);
        pairs.push(Eigenpair1d { value, frequency, parity, norm });
    }
    Ok(pairs)
}

/// Tensor-product 2D eigenpairs evaluated at `points`.
///
/// Returns the `points.len() × d` basis matrix and the `d` eigenvalues,
/// sorted by descending eigenvalue with ties broken by the `(i, j)` mode pair.
pub fn kl_basis_2d(points: &[[f64; 2]], d: usize, correlation_length: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let modes = exp_kernel_eigenpairs_1d(d, correlation_length)?;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(d * d);
    for i in 0..d {
        for j in 0..d {
            pairs.push((modes[i].value * modes[j].value, i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    pairs.truncate(d);
    let basis = DMatrix::from_fn(points.len(), d, |p, col| {
        let (_, i, j) = pairs[col];
        modes[i].eval(points[p][0]) * modes[j].eval(points[p][1])
    });
    Ok((basis, pairs.iter().map(|p| p.0).collect()))
}

/// `sin` on odd (1-based) columns and `cos` on even ones, elementwise.
pub fn transform_basis(e: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = e.clone();
    for (col, mut column) in out.column_iter_mut().enumerate() {
        let odd = col % 2 == 0;
        column.apply(|v| *v = if odd { v.sin() } else { v.cos() });
    }
    out
}

/// Truncated KL basis cached at element centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct KlBasis {
    eigenvalues: Vec<f64>,
    sqrt_eigenvalues: Vec<f64>,
    /// `n_elements × d`.
    basis: DMatrix<f64>,
    transformed: bool,
}

impl KlBasis {
    pub fn new(centroids: &[[f64; 2]], d: usize, correlation_length: f64, transform: bool) -> Result<Self> {
        let (raw, eigenvalues) = kl_basis_2d(centroids, d, correlation_length)?;
        let basis = if transform { transform_basis(&raw) } else { raw };
        Self::from_parts(eigenvalues, basis, transform)
    }

    /// Builds a basis from explicit eigenvalues and centroid values.
    pub fn from_parts(eigenvalues: Vec<f64>, basis: DMatrix<f64>, transformed: bool) -> Result<Self> {
        if eigenvalues.len() != basis.ncols() {
            return Err(Error::DimensionMismatch {
                context: "KL eigenvalues",
                expected: basis.ncols(),
                actual: eigenvalues.len(),
            });
        }
        if eigenvalues.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::InvalidArgument("KL eigenvalues must be positive".into()));
        }
        let sqrt_eigenvalues = eigenvalues.iter().map(|l| l.sqrt()).collect();
        Ok(Self { eigenvalues, sqrt_eigenvalues, basis, transformed })
    }

    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn n_elements(&self) -> usize {
        self.basis.nrows()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn sqrt_eigenvalues(&self) -> &[f64] {
        &self.sqrt_eigenvalues
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn is_transformed(&self) -> bool {
        self.transformed
    }

    /// `Ẽ(c_e, m) = Σ_i √λ_i Ê_i(c_e) m_i`.
    pub fn log_modulus(&self, element: usize, m: &DVector<f64>) -> f64 {
        (0..self.dim())
            .map(|i| self.sqrt_eigenvalues[i] * self.basis[(element, i)] * m[i])
            .sum()
    }

    /// `exp(Ẽ(c_e, m))`, with an error if the exponent would overflow.
    pub fn modulus_field(&self, m: &DVector<f64>, element: usize) -> Result<f64> {
        if element >= self.n_elements() {
            return Err(Error::InvalidArgument(format!(
                "element {element} out of range ({} elements)",
                self.n_elements()
            )));
        }
        if m.len() != self.dim() {
            return Err(Error::DimensionMismatch { context: "KL coefficients", expected: self.dim(), actual: m.len() });
        }
        let log_modulus = self.log_modulus(element, m);
        if !log_modulus.is_finite() || log_modulus > MAX_LOG_MODULUS {
            return Err(Error::NonFiniteModulus { element, log_modulus });
        }
        Ok(log_modulus.exp())
    }

    /// One row per element: centroid `x, y` followed by `Ê_1..Ê_d`.
    pub fn write_csv<W: Write>(&self, centroids: &[[f64; 2]], w: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(w);
        let mut header = vec!["x".to_string(), "y".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("E{i}")));
        writer.write_record(&header)?;
        for (e, c) in centroids.iter().enumerate() {
            let mut row = vec![c[0].to_string(), c[1].to_string()];
            row.extend(self.basis.row(e).iter().map(|v| v.to_string()));
            writer.write_record(&row)?;
        }
        writer.flush()?;
        Ok(())
    }
}
