//! Sample-wise variational inference for nonlinear inverse problems.
//!
//! The pipeline inverts a differentiable forward model once per observation
//! with a Tikhonov-regularized Gauss-Newton iteration, pairs the resulting
//! samples with uniformly drawn prior samples, and trains a neural net kernel
//! (NNK) transport map that turns fresh prior samples into posterior samples.
//!
//! Modules:
//! - [`forward_models`]: the forward-model contract, a two-spring system and a
//!   P1 finite-element elliptic solver with a random-field modulus.
//! - [`kl_field`]: Karhunen-Loève basis of the exponential kernel on the unit square.
//! - [`inversion`]: per-sample Gauss-Newton inversion.
//! - [`permutation`]: prior scaling and greedy nearest-neighbour pairing.
//! - [`nnk`]: the neural net kernel, its Jacobian and trainers.
//! - [`baselines`]: MAP/Laplace mixtures, Metropolis-Hastings, HMC, and the
//!   variational bandwidth search.
//! - [`experiments`]: truth distributions, datasets, metrics, configuration and
//!   the end-to-end runner.

pub mod baselines;
pub mod error;
pub mod experiments;
pub mod forward_models;
pub mod inversion;
pub mod kl_field;
pub mod linalg;
pub mod nnk;
pub mod permutation;
pub mod rng;

pub use error::{Error, Result};

/// Rows are samples, columns are latent dimensions.
pub type SampleMatrix = nalgebra::DMatrix<f64>;
