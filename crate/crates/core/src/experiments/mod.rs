//! Truth distributions, datasets, metrics, configuration and the pipeline.

pub mod config;
pub mod dataset;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod truth;

pub use dataset::{
    generate_dataset, generate_dataset_with_inputs, generate_design_inputs, observe, perturbed_inputs, synthetic_design_fields,
    Dataset, Provenance, DENSITY_BOUNDS, SPRING_INPUT_CENTER,
};
pub use metrics::{concentration, moment_errors, normalized_error, outputs_at, MomentReport};
pub use truth::{analytic_map, make_truth, sample_truth, TruthKind, TruthSpec, U_SHAPE_CENTERS, U_SHAPE_VARIANCE};
pub use config::ExperimentConfig;
pub use pipeline::{Experiment, Manifest, Metrics, Model, PredictionMetrics, RunSummary};
