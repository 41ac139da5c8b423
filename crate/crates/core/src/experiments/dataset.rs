//! Observation datasets `D = {(x⁽ʲ⁾, y⁽ʲ⁾)}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::GaussianMixture;
use crate::forward_models::ForwardModel;
use crate::{Error, Result, SampleMatrix};

use super::truth::sample_truth;

/// Smallest and largest admissible design density.
pub const DENSITY_BOUNDS: (f64, f64) = (1e-3, 1.0);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub truth: String,
    pub seed: u64,
    pub delta_x: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n_data × l`.
    pub inputs: DMatrix<f64>,
    /// `n_data × n`.
    pub observations: DMatrix<f64>,
    /// Latent rows that generated the observations, when known.
    pub latent: Option<SampleMatrix>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(inputs: DMatrix<f64>, observations: DMatrix<f64>) -> Result<Self> {
        if inputs.nrows() != observations.nrows() {
            return Err(Error::DimensionMismatch {
                context: "dataset rows",
                expected: inputs.nrows(),
                actual: observations.nrows(),
            });
        }
        Ok(Self { inputs, observations, latent: None, provenance: Provenance::default() })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, j: usize) -> DVector<f64> {
        self.inputs.row(j).transpose()
    }

    pub fn observation(&self, j: usize) -> DVector<f64> {
        self.observations.row(j).transpose()
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(rows),
            observations: self.observations.select_rows(rows),
            latent: self.latent.as_ref().map(|l| l.select_rows(rows)),
            provenance: self.provenance.clone(),
        }
    }
}

/// `y⁽ʲ⁾ = G(x⁽ʲ⁾, m⁽ʲ⁾)` for paired input and latent rows.
pub fn observe<M: ForwardModel + ?Sized>(model: &M, inputs: &DMatrix<f64>, latent: &SampleMatrix) -> Result<DMatrix<f64>> {
    if inputs.nrows() != latent.nrows() {
        return Err(Error::DimensionMismatch { context: "latent rows", expected: inputs.nrows(), actual: latent.nrows() });
    }
    let rows = (0..inputs.nrows())
        .into_par_iter()
        .map(|j| {
            model
                .evaluate(&inputs.row(j).transpose(), &latent.row(j).transpose())
                .map_err(|e| Error::InvalidArgument(format!("forward model failed on sample {j}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = model.output_dim();
    Ok(DMatrix::from_fn(rows.len(), n, |j, k| rows[j][k]))
}

/// `x = center + δ_x·x̂` with `x̂ ~ U[−1,1]^l`, one row per sample.
pub fn perturbed_inputs<R: Rng + ?Sized>(center: &[f64], n: usize, delta_x: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(n, center.len(), |_, k| center[k] + delta_x * rng.random_range(-1.0..=1.0))
}

/// Default spring input center.
pub const SPRING_INPUT_CENTER: [f64; 2] = [0.5, 0.5];

/// Spring dataset: inputs around `[0.5, 0.5]`, latent rows from the truth.
pub fn generate_dataset<M: ForwardModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    truth: &GaussianMixture,
    n_data: usize,
    delta_x: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if n_data == 0 {
        return Err(Error::InvalidArgument("dataset needs at least one sample".into()));
    }
    let inputs = perturbed_inputs(&SPRING_INPUT_CENTER, n_data, delta_x, rng);
    generate_dataset_with_inputs(model, truth, inputs, rng)
}

/// Dataset for explicitly given inputs (for example design fields).
pub fn generate_dataset_with_inputs<M: ForwardModel + ?Sized, R: Rng + ?Sized>(
    model: &M,
    truth: &GaussianMixture,
    inputs: DMatrix<f64>,
    rng: &mut R,
) -> Result<Dataset> {
    if truth.dim() != model.latent_dim() {
        return Err(Error::DimensionMismatch { context: "truth dimension", expected: model.latent_dim(), actual: truth.dim() });
    }
    if inputs.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch { context: "input dimension", expected: model.input_dim(), actual: inputs.ncols() });
    }
    let latent = sample_truth(truth, inputs.nrows(), rng);
    let observations = observe(model, &inputs, &latent)?;
    let mut data = Dataset::new(inputs, observations)?;
    data.latent = Some(latent);
    Ok(data)
}

/// Smooth stand-ins for intermediate density iterates: a base level plus
/// Gaussian bumps at random centers, evaluated at the element centroids and
/// clamped to the density bounds. Later fields have sharper bumps.
pub fn synthetic_design_fields<R: Rng + ?Sized>(centroids: &[[f64; 2]], n_fields: usize, rng: &mut R) -> Vec<DVector<f64>> {
    (0..n_fields)
        .map(|t| {
            let progress = if n_fields > 1 { t as f64 / (n_fields - 1) as f64 } else { 1.0 };
            let width = 0.35 - 0.2 * progress;
            let bumps: Vec<([f64; 2], f64)> = (0..3)
                .map(|_| ([rng.random::<f64>(), rng.random::<f64>()], rng.random_range(0.3..0.7)))
                .collect();
            DVector::from_iterator(
                centroids.len(),
                centroids.iter().map(|c| {
                    let v: f64 = 0.3
                        + bumps
                            .iter()
                            .map(|(p, a)| {
                                let r2 = (c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2);
                                a * (-r2 / (2.0 * width * width)).exp()
                            })
                            .sum::<f64>();
                    v.clamp(DENSITY_BOUNDS.0, DENSITY_BOUNDS.1)
                }),
            )
        })
        .collect()
}

/// Picks `n_keep` evenly spaced base fields and adds `n_noise_per` copies of
/// each with `x ← min(1, max(0.001, x + jitter·N(0,1)))`.
pub fn generate_design_inputs<R: Rng + ?Sized>(
    base_fields: &[DVector<f64>],
    n_keep: usize,
    n_noise_per: usize,
    jitter: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if base_fields.is_empty() || n_keep == 0 || n_noise_per == 0 {
        return Err(Error::InvalidArgument("design inputs need base fields, n_keep ≥ 1 and n_noise_per ≥ 1".into()));
    }
    let n_ele = base_fields[0].len();
    if base_fields.iter().any(|f| f.len() != n_ele) {
        return Err(Error::InvalidArgument("base design fields differ in length".into()));
    }
    let picks: Vec<usize> = (0..n_keep)
        .map(|k| if n_keep == 1 { base_fields.len() - 1 } else { k * (base_fields.len() - 1) / (n_keep - 1) })
        .collect();
    let mut out = DMatrix::zeros(n_keep * n_noise_per, n_ele);
    let mut row = 0;
    for &p in &picks {
        for _ in 0..n_noise_per {
            for e in 0..n_ele {
                let noise: f64 = rng.sample(StandardNormal);
                out[(row, e)] = (base_fields[p][e] + jitter * noise).clamp(DENSITY_BOUNDS.0, DENSITY_BOUNDS.1);
            }
            row += 1;
        }
    }
    Ok(out)
}
