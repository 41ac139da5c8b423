//! Comparison methods: MAP with a Laplace mixture, MCMC samplers, and the
//! variational bandwidth search.

pub mod gmm;
pub mod likelihoods;
pub mod map;
pub mod mcmc;
pub mod sigma;

pub use gmm::{log_sum_exp, stratified_counts, GaussianMixture, MixtureRecord};
pub use likelihoods::{distance_neg_loglik, standard_neg_loglik};
pub use map::{bfgs, gaussian_coverage_starts, map_estimate, map_objective, map_posterior_mixture, BfgsOptions, BfgsResult, MapEstimate, MapMixture};
pub use mcmc::{hmc_sample, leapfrog, metropolis_accept, mh_sample, ChainMetadata, ChainState, SamplerSettings};
pub use sigma::{log_grid, optimize_sigma, SigmaOptions, SigmaPrior, SigmaSearch};
