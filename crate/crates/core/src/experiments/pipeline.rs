//! Stage-by-stage experiment runs.
//!
//! Every stage reads what it needs from the output directory and writes its
//! own artifacts there, so stages can be run one at a time or chained by
//! [`Experiment::run`]. Randomness in stage `k` comes from stream `k` of the
//! experiment seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, HmcTarget, MhLikelihood, ModelConfig};
use super::dataset::{generate_dataset, generate_dataset_with_inputs, generate_design_inputs, synthetic_design_fields, Dataset, Provenance};
use super::io::{load_json, load_matrix, save_json, save_matrix};
use super::metrics::{concentration, moment_errors, normalized_error, outputs_at, MomentReport};
use super::truth::{analytic_map, make_truth, sample_truth, TruthKind};
use crate::baselines::{
    distance_neg_loglik, gaussian_coverage_starts, hmc_sample, log_grid, map_posterior_mixture, mh_sample, optimize_sigma,
    standard_neg_loglik, BfgsOptions, ChainMetadata, ChainState, GaussianMixture, MixtureRecord, SigmaOptions, SigmaPrior,
    SigmaSearch,
};
use crate::forward_models::{map_scalar_gradient, FemModel, FemProblem, ForwardModel, Mesh, SpringModel};
use crate::inversion::{invert_dataset, invert_with_noise, InversionReport};
use crate::kl_field::KlBasis;
use crate::nnk::{augment_prior, init_network, train, KernelNetwork, TrainingHistory};
use crate::permutation::{column_bounds, permute, scale_prior, PermutationOutput};
use crate::{rng, Error, Result, SampleMatrix};

/// Random stream of each stage.
pub mod streams {
    pub const GENERATE: u64 = 1;
    pub const DESIGN: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const PRIOR: u64 = 4;
    pub const INIT: u64 = 5;
    pub const TEST: u64 = 6;
    pub const REFERENCE: u64 = 7;
    pub const MAP: u64 = 8;
    pub const MH: u64 = 9;
    pub const HMC: u64 = 10;
    pub const SIGMA: u64 = 11;
}

pub const STAGES: [&str; 7] = ["generate", "invert", "permute", "train", "predict", "report", "baselines"];

/// The forward model named by a configuration.
pub enum Model {
    Spring(SpringModel),
    Fem(FemModel),
}

impl Model {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        match &cfg.model {
            ModelConfig::Spring { stiffness_map } => Ok(Model::Spring(SpringModel::new(*stiffness_map))),
            ModelConfig::Fem(fem) => {
                let mut mesh = Mesh::unit_square(fem.nx, fem.ny)?;
                if let Some(hole) = &fem.hole {
                    mesh = mesh.with_hole(hole)?;
                }
                let kl = KlBasis::new(&mesh.centroids(), cfg.truth.dim, fem.correlation_length, fem.transform)?;
                let dirichlet = FemProblem::left_edge_nodes(&mesh, 1e-12);
                let load = FemProblem::right_edge_flux(&mesh, fem.flux);
                let problem = FemProblem::new(mesh, dirichlet, load, Arc::new(kl))?.with_simp_exponent(fem.simp_exponent)?;
                Ok(Model::Fem(FemModel::new(problem)))
            }
        }
    }

    pub fn forward(&self) -> &dyn ForwardModel {
        match self {
            Model::Spring(m) => m,
            Model::Fem(m) => m,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub seconds: f64,
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    /// Stream index of each stage under `seed`.
    pub streams: BTreeMap<String, u64>,
    /// Stand-ins for inputs that cannot be reconstructed exactly.
    pub substitutions: Vec<String>,
    pub stages: BTreeMap<String, StageRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionSummary {
    pub report: InversionReport,
    /// Noise level and draws per pair, when the observations were perturbed.
    pub noise: Option<(f64, usize)>,
    /// Rows kept for training (one per data pair).
    pub n_selected: usize,
    pub n_selected_converged: usize,
    /// `max_j ‖m_opt⁽ʲ⁾ − m_true⁽ʲ⁾‖` for noise-free runs with known latents.
    pub max_latent_error: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub final_residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMetrics {
    pub x: Vec<f64>,
    pub moments: MomentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub latent: MomentReport,
    /// Output moments at each configured prediction input.
    pub outputs: Vec<OutputMetrics>,
    /// Fraction of samples within the configured radius of each truth mode.
    pub concentration: Vec<f64>,
}

impl PredictionMetrics {
    /// `(e_μ, e_σ)` of output component `k` at prediction input `i`.
    pub fn output_errors(&self, i: usize, k: usize) -> (f64, f64) {
        let m = &self.outputs[i].moments;
        (m.mu(k), m.sigma(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticMetrics {
    pub e_train: f64,
    pub e_test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub training: TrainingSummary,
    pub analytic: Option<AnalyticMetrics>,
    /// The inverted training samples themselves.
    pub inverted: Option<PredictionMetrics>,
    pub uniform: Option<PredictionMetrics>,
    pub augmented: Option<PredictionMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub n_components: usize,
    pub dropped: usize,
    pub prior_fallbacks: usize,
    pub prediction: PredictionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainMetrics {
    pub start: Vec<f64>,
    pub metadata: ChainMetadata,
    pub prediction: PredictionMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub map: Option<MapMetrics>,
    pub mh: Option<ChainMetrics>,
    pub hmc: Vec<ChainMetrics>,
    pub sigma: Option<SigmaSearch>,
}

/// Everything a full run produces, kept in memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub inversion: Option<InversionSummary>,
    pub metrics: Metrics,
    pub baselines: BaselineMetrics,
}

pub struct Experiment {
    pub config: ExperimentConfig,
    config_text: String,
    out_dir: PathBuf,
    model: Option<Model>,
}

fn stage<T>(name: &str, result: Result<T>) -> Result<T> {
    result.map_err(|e| match e {
        Error::Stage { .. } => e,
        other => other.in_stage(name),
    })
}

fn stream_seed(seed: u64, id: u64) -> u64 {
    rng::stream(seed, id).next_u64()
}

fn uniform_unit<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> SampleMatrix {
    DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
}

fn analytic_targets(x: &SampleMatrix) -> SampleMatrix {
    let mut out = DMatrix::zeros(x.nrows(), 2);
    for (i, row) in x.row_iter().enumerate() {
        let m = analytic_map(&[row[0], row[1]]);
        out[(i, 0)] = m[0];
        out[(i, 1)] = m[1];
    }
    out
}

impl Experiment {
    /// Parses `config_text`; `seed` overrides the configured seed.
    pub fn new(config_text: &str, out_dir: impl Into<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::from_toml_str(config_text)?;
        if let Some(s) = seed {
            config.seed = s;
        }
        Ok(Self { config, config_text: config_text.to_string(), out_dir: out_dir.into(), model: None })
    }

    pub fn from_path(path: &Path, out_dir: impl Into<PathBuf>, seed: Option<u64>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::new(&text, out_dir, seed)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    fn analytic(&self) -> bool {
        self.config.truth.kind == TruthKind::Analytic
    }

    fn seed(&self, id: u64) -> u64 {
        stream_seed(self.config.seed, id)
    }

    fn rng(&self, id: u64) -> rng::StreamRng {
        rng::stream(self.config.seed, id)
    }

    pub fn model(&mut self) -> Result<&Model> {
        if self.model.is_none() {
            self.model = Some(Model::build(&self.config)?);
        }
        Ok(self.model.as_ref().expect("model built above"))
    }

    fn truth(&self) -> Result<GaussianMixture> {
        make_truth(&self.config.truth)?.ok_or_else(|| Error::InvalidArgument("the analytic truth has no latent distribution".into()))
    }

    fn load(&self, file: &str) -> Result<SampleMatrix> {
        let path = self.path(file);
        if !path.exists() {
            return Err(Error::InvalidArgument(format!("missing artifact {}; run the earlier stages first", path.display())));
        }
        load_matrix(&path)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let mut data = Dataset::new(self.load("inputs.csv")?, self.load("observations.csv")?)?;
        if self.path("latent_true.csv").exists() {
            data.latent = Some(self.load("latent_true.csv")?);
        }
        data.provenance = Provenance {
            truth: self.config.truth.kind.name().into(),
            seed: self.config.seed,
            delta_x: self.config.data.delta_x,
        };
        Ok(data)
    }

    fn record(&self, name: &str, started: Instant, files: &[&str]) -> Result<()> {
        let path = self.path("manifest.json");
        let mut manifest = if path.exists() { load_json::<Manifest>(&path)? } else { self.manifest() };
        if manifest.config_sha256 != self.manifest().config_sha256 || manifest.seed != self.config.seed {
            manifest = self.manifest();
        }
        manifest
            .stages
            .insert(name.into(), StageRecord { seconds: started.elapsed().as_secs_f64(), files: files.iter().map(|f| f.to_string()).collect() });
        save_json(&path, &manifest)
    }

    fn manifest(&self) -> Manifest {
        let streams = [
            ("generate", streams::GENERATE),
            ("design", streams::DESIGN),
            ("noise", streams::NOISE),
            ("prior", streams::PRIOR),
            ("init", streams::INIT),
            ("test", streams::TEST),
            ("reference", streams::REFERENCE),
            ("map", streams::MAP),
            ("mh", streams::MH),
            ("hmc", streams::HMC),
            ("sigma", streams::SIGMA),
        ];
        let mut substitutions = Vec::new();
        if self.config.is_fem() {
            substitutions.push("design inputs are synthetic smooth density fields, not optimization iterates".into());
        }
        if self.config.truth.kind == TruthKind::UShape {
            substitutions.push("U-shaped truth uses 9 centers along a U with covariance 0.05·I".into());
        }
        if self.config.baselines.map.is_some() {
            substitutions.push("MAP starts are a deterministic Gaussian-coverage set, not designed quadrature nodes".into());
        }
        Manifest {
            name: self.config.name.clone(),
            config: self.config_text.clone(),
            config_sha256: Sha256::digest(self.config_text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect(),
            seed: self.config.seed,
            streams: streams.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            substitutions,
            stages: BTreeMap::new(),
        }
    }

    fn prepare_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir)?;
        Ok(())
    }

    /// Synthesizes the dataset (or, for the analytic truth, the training pairs).
    pub fn generate(&mut self) -> Result<()> {
        stage("generate", self.generate_inner())
    }

    fn generate_inner(&mut self) -> Result<()> {
        let started = Instant::now();
        self.prepare_dir()?;
        let n = self.config.data.n_train;
        if self.analytic() {
            let x = uniform_unit(n, 2, &mut self.rng(streams::GENERATE));
            save_matrix(&self.path("train_inputs.csv"), &x, "x")?;
            save_matrix(&self.path("train_targets.csv"), &analytic_targets(&x), "m")?;
            return self.record("generate", started, &["train_inputs.csv", "train_targets.csv"]);
        }
        let truth = self.truth()?;
        let seed = self.config.seed;
        let data_cfg = self.config.data.clone();
        let mut rng = self.rng(streams::GENERATE);
        let mut design_rng = self.rng(streams::DESIGN);
        let model = self.model()?;
        let mut dataset = match model {
            Model::Spring(m) => generate_dataset(m, &truth, n, data_cfg.delta_x, &mut rng)?,
            Model::Fem(m) => {
                let centroids = m.problem().mesh().centroids();
                let base = synthetic_design_fields(&centroids, data_cfg.n_base_fields, &mut design_rng);
                let inputs = generate_design_inputs(&base, data_cfg.n_keep, data_cfg.n_noise_per, data_cfg.design_jitter, &mut design_rng)?;
                generate_dataset_with_inputs(m, &truth, inputs, &mut rng)?
            }
        };
        dataset.provenance = Provenance { truth: self.config.truth.kind.name().into(), seed, delta_x: data_cfg.delta_x };
        save_matrix(&self.path("inputs.csv"), &dataset.inputs, "x")?;
        save_matrix(&self.path("observations.csv"), &dataset.observations, "u")?;
        let latent = dataset.latent.as_ref().expect("generated datasets carry their latents");
        save_matrix(&self.path("latent_true.csv"), latent, "m")?;
        self.record("generate", started, &["inputs.csv", "observations.csv", "latent_true.csv"])
    }

    /// Sample-wise inversion of every data pair.
    pub fn invert(&mut self) -> Result<InversionSummary> {
        stage("invert", self.invert_inner())
    }

    fn invert_inner(&mut self) -> Result<InversionSummary> {
        if self.analytic() {
            return Err(Error::InvalidArgument("the analytic experiment has exact targets and no inversion stage".into()));
        }
        let started = Instant::now();
        let data = self.load_dataset()?;
        let opts = self.config.inversion.clone();
        let noise = self.config.noise;
        let noise_seed = self.seed(streams::NOISE);
        let model = self.model()?.forward();
        let (samples, report, selected_converged) = match noise {
            None => {
                let inv = invert_dataset(model, &data, &opts)?;
                let ok = inv.results.iter().filter(|r| r.converged).count();
                (inv.samples, inv.report, ok)
            }
            Some(nc) => {
                let inv = invert_with_noise(model, &data, nc.delta, nc.n_per_sample, &opts, noise_seed)?;
                let rows: Vec<usize> = (0..data.len()).map(|j| j * nc.n_per_sample).collect();
                let ok = rows.iter().filter(|&&r| inv.results[r].converged).count();
                (inv.samples.select_rows(&rows), inv.report, ok)
            }
        };
        let max_latent_error = match (&data.latent, noise) {
            (Some(truth), None) => Some((0..samples.nrows()).map(|j| (samples.row(j) - truth.row(j)).norm()).fold(0.0, f64::max)),
            _ => None,
        };
        let summary = InversionSummary {
            report,
            noise: noise.map(|n| (n.delta, n.n_per_sample)),
            n_selected: samples.nrows(),
            n_selected_converged: selected_converged,
            max_latent_error,
            seconds: started.elapsed().as_secs_f64(),
        };
        save_matrix(&self.path("m_opt.csv"), &samples, "m")?;
        save_json(&self.path("inversion.json"), &summary)?;
        self.record("invert", started, &["m_opt.csv", "inversion.json"])?;
        Ok(summary)
    }

    /// Scales a uniform prior onto the inverted samples and pairs them.
    pub fn permute(&mut self) -> Result<PermutationOutput> {
        stage("permute", self.permute_inner())
    }

    fn permute_inner(&mut self) -> Result<PermutationOutput> {
        if self.analytic() {
            return Err(Error::InvalidArgument("the analytic experiment trains on its inputs directly".into()));
        }
        let started = Instant::now();
        let m_opt = self.load("m_opt.csv")?;
        let m0 = uniform_unit(m_opt.nrows(), m_opt.ncols(), &mut self.rng(streams::PRIOR));
        let out = if self.config.permute {
            permute(&m0, &m_opt)?
        } else {
            PermutationOutput { m_tilde: scale_prior(&m0, &m_opt)?, pairing: (0..m0.nrows()).collect() }
        };
        save_matrix(&self.path("prior_train.csv"), &m0, "m")?;
        save_matrix(&self.path("train_inputs.csv"), &out.m_tilde, "m")?;
        save_matrix(&self.path("train_targets.csv"), &m_opt, "m")?;
        out.write_pairing_csv(fs::File::create(self.path("pairing.csv"))?)?;
        self.record("permute", started, &["prior_train.csv", "train_inputs.csv", "train_targets.csv", "pairing.csv"])?;
        Ok(out)
    }

    /// Fits the kernel network from the training inputs to the targets.
    pub fn train(&mut self) -> Result<(KernelNetwork, TrainingSummary)> {
        stage("train", self.train_inner())
    }

    fn train_inner(&mut self) -> Result<(KernelNetwork, TrainingSummary)> {
        let started = Instant::now();
        let inputs = self.load("train_inputs.csv")?;
        let targets = self.load("train_targets.csv")?;
        let mut net = init_network(
            &self.config.layer_sizes(),
            self.config.nnk.n_anchors,
            targets.ncols(),
            &column_bounds(&inputs),
            &mut self.rng(streams::INIT),
        )?;
        let history = train(&mut net, &inputs, &targets, &self.config.nnk.training)?;
        let summary = training_summary(&history, started.elapsed().as_secs_f64());
        net.save_json(Some(history), fs::File::create(self.path("network.json"))?)?;
        save_json(&self.path("training.json"), &summary)?;
        self.record("train", started, &["network.json", "training.json"])?;
        Ok((net, summary))
    }

    fn load_network(&self) -> Result<(KernelNetwork, Option<TrainingHistory>)> {
        let path = self.path("network.json");
        if !path.exists() {
            return Err(Error::InvalidArgument(format!("missing artifact {}; run the train stage first", path.display())));
        }
        KernelNetwork::load_json(std::io::BufReader::new(fs::File::open(path)?))
    }

    /// Pushes test priors through the trained network.
    pub fn predict(&mut self) -> Result<()> {
        stage("predict", self.predict_inner())
    }

    fn predict_inner(&mut self) -> Result<()> {
        let started = Instant::now();
        let (net, _) = self.load_network()?;
        let mut rng = self.rng(streams::TEST);
        let n_test = self.config.test.n_test;
        if self.analytic() {
            let x = uniform_unit(n_test, 2, &mut rng);
            save_matrix(&self.path("test_inputs.csv"), &x, "x")?;
            save_matrix(&self.path("test_targets.csv"), &analytic_targets(&x), "m")?;
            save_matrix(&self.path("predictions_test.csv"), &net.predict(&x)?, "m")?;
            return self.record("predict", started, &["test_inputs.csv", "test_targets.csv", "predictions_test.csv"]);
        }
        let m_opt = self.load("train_targets.csv")?;
        let prior = scale_prior(&uniform_unit(n_test, m_opt.ncols(), &mut rng), &m_opt)?;
        save_matrix(&self.path("test_prior_uniform.csv"), &prior, "m")?;
        save_matrix(&self.path("predictions_uniform.csv"), &net.predict(&prior)?, "m")?;
        let mut files = vec!["test_prior_uniform.csv", "predictions_uniform.csv"];
        if let Some(aug) = self.config.test.augment {
            let m_tilde = self.load("train_inputs.csv")?;
            let prior = augment_prior(&m_tilde, aug.n_per, aug.sigma, &mut rng)?;
            save_matrix(&self.path("test_prior_augmented.csv"), &prior, "m")?;
            save_matrix(&self.path("predictions_augmented.csv"), &net.predict(&prior)?, "m")?;
            files.extend(["test_prior_augmented.csv", "predictions_augmented.csv"]);
        }
        self.record("predict", started, &files)
    }

    /// Monte Carlo truth samples used as the moment reference.
    pub fn reference(&self) -> Result<SampleMatrix> {
        Ok(sample_truth(&self.truth()?, self.config.test.n_reference, &mut self.rng(streams::REFERENCE)))
    }

    /// Latent and output moment errors of `samples` against the reference.
    pub fn evaluate_samples(&mut self, samples: &SampleMatrix, reference: &SampleMatrix) -> Result<PredictionMetrics> {
        let truth = self.truth()?;
        let radius = self.config.test.concentration_radius;
        let inputs = self.config.test.prediction_inputs.clone();
        let model = self.model()?.forward();
        let latent = moment_errors(samples, reference)?;
        let outputs = inputs
            .iter()
            .map(|x| {
                let xv = DVector::from_column_slice(x);
                let moments = moment_errors(&outputs_at(model, &xv, samples)?, &outputs_at(model, &xv, reference)?)?;
                Ok(OutputMetrics { x: x.clone(), moments })
            })
            .collect::<Result<Vec<_>>>()?;
        let concentration = (0..truth.n_components()).map(|k| concentration(samples, truth.mean(k), radius)).collect();
        Ok(PredictionMetrics { latent, outputs, concentration })
    }

    /// Error metrics of the training fit and the predictions.
    pub fn report(&mut self) -> Result<Metrics> {
        stage("report", self.report_inner())
    }

    fn report_inner(&mut self) -> Result<Metrics> {
        let started = Instant::now();
        let training: TrainingSummary = load_json(&self.path("training.json"))?;
        let metrics = if self.analytic() {
            let (net, _) = self.load_network()?;
            let flat = |m: &SampleMatrix| m.transpose().as_slice().to_vec();
            let train_pred = net.predict(&self.load("train_inputs.csv")?)?;
            let e_train = normalized_error(&flat(&train_pred), &flat(&self.load("train_targets.csv")?))?;
            let e_test = normalized_error(&flat(&self.load("predictions_test.csv")?), &flat(&self.load("test_targets.csv")?))?;
            Metrics { training, analytic: Some(AnalyticMetrics { e_train, e_test }), inverted: None, uniform: None, augmented: None }
        } else {
            let reference = self.reference()?;
            save_matrix(&self.path("reference.csv"), &reference, "m")?;
            let inverted = self.load("m_opt.csv")?;
            let inverted = Some(self.evaluate_samples(&inverted, &reference)?);
            let uniform = self.load("predictions_uniform.csv")?;
            let uniform = Some(self.evaluate_samples(&uniform, &reference)?);
            let augmented = if self.config.test.augment.is_some() {
                let samples = self.load("predictions_augmented.csv")?;
                Some(self.evaluate_samples(&samples, &reference)?)
            } else {
                None
            };
            Metrics { training, analytic: None, inverted, uniform, augmented }
        };
        save_json(&self.path("metrics.json"), &metrics)?;
        let files: &[&str] = if self.analytic() { &["metrics.json"] } else { &["reference.csv", "metrics.json"] };
        self.record("report", started, files)?;
        Ok(metrics)
    }

    /// Runs every configured comparison method.
    pub fn baselines(&mut self) -> Result<BaselineMetrics> {
        let mut out = BaselineMetrics::default();
        if self.config.baselines.map.is_some() {
            out.map = Some(self.baseline_map()?);
        }
        if self.config.baselines.mh.is_some() {
            out.mh = Some(self.baseline_mh()?);
        }
        if self.config.baselines.hmc.is_some() {
            out.hmc = self.baseline_hmc()?;
        }
        if self.config.baselines.sigma.is_some() {
            out.sigma = Some(self.baseline_sigma()?);
        }
        save_json(&self.path("baselines.json"), &out)?;
        Ok(out)
    }

    fn require<T: Clone>(&self, value: &Option<T>, name: &str) -> Result<T> {
        value.clone().ok_or_else(|| Error::config(format!("baselines.{name}"), "section missing from the configuration"))
    }

    pub fn baseline_map(&mut self) -> Result<MapMetrics> {
        stage("baseline map", self.baseline_map_inner())
    }

    fn baseline_map_inner(&mut self) -> Result<MapMetrics> {
        let started = Instant::now();
        let cfg = self.require(&self.config.baselines.map, "map")?;
        let data = self.load_dataset()?;
        let reference = self.reference()?;
        let d = self.config.truth.dim;
        let sample_seed = self.seed(streams::MAP);
        let model = self.model()?.forward();
        let gamma = DMatrix::identity(model.output_dim(), model.output_dim()) * cfg.noise_variance;
        let sigma0 = DMatrix::identity(d, d) * cfg.prior_variance;
        let origin = DVector::zeros(d);
        let starts = gaussian_coverage_starts(&origin, &sigma0, cfg.n_starts)?;
        let prior_mean = if cfg.prior_at_start { None } else { Some(&origin) };
        let mix = map_posterior_mixture(model, &data, &starts, &gamma, &sigma0, prior_mean, &BfgsOptions::default())?;
        let samples = mix.mixture.sample_stratified(cfg.n_samples, &mut rng::seeded(sample_seed));
        save_matrix(&self.path("map_starts.csv"), &starts, "m")?;
        save_matrix(&self.path("map_samples.csv"), &samples, "m")?;
        save_json(&self.path("map_mixture.json"), &mix.mixture.to_record())?;
        let metrics = MapMetrics {
            n_components: mix.estimates.len(),
            dropped: mix.dropped.len(),
            prior_fallbacks: mix.estimates.iter().filter(|e| e.used_prior_fallback).count(),
            prediction: self.evaluate_samples(&samples, &reference)?,
        };
        save_json(&self.path("map.json"), &metrics)?;
        self.record("baseline_map", started, &["map_starts.csv", "map_samples.csv", "map_mixture.json", "map.json"])?;
        Ok(metrics)
    }

    pub fn baseline_mh(&mut self) -> Result<ChainMetrics> {
        stage("baseline mh", self.baseline_mh_inner())
    }

    fn baseline_mh_inner(&mut self) -> Result<ChainMetrics> {
        let started = Instant::now();
        let cfg = self.require(&self.config.baselines.mh, "mh")?;
        let d = self.config.truth.dim;
        let reference = self.reference()?;
        let seed = self.seed(streams::MH);
        let start = DVector::from_column_slice(&cfg.start);
        let proposal = DMatrix::identity(d, d) * cfg.proposal_variance;
        let chain = match cfg.likelihood {
            MhLikelihood::Standard => {
                let data = self.load_dataset()?;
                let model = self.model()?.forward();
                let gamma = DMatrix::identity(model.output_dim(), model.output_dim()) * cfg.noise_variance;
                mh_sample(|m| standard_neg_loglik(model, m, &data, &gamma).map_or(f64::NEG_INFINITY, |v| -v), &start, &proposal, cfg.n_steps, seed)?
            }
            MhLikelihood::Distance => {
                let m_opt = self.load("m_opt.csv")?;
                let gamma = DMatrix::identity(d, d) * cfg.noise_variance;
                if cfg.n_lkl > m_opt.nrows() {
                    return Err(Error::config("baselines.mh.n_lkl", format!("exceeds the {} inverted samples", m_opt.nrows())));
                }
                mh_sample(|m| distance_neg_loglik(m, &m_opt, cfg.n_lkl, &gamma).map_or(f64::NEG_INFINITY, |v| -v), &start, &proposal, cfg.n_steps, seed)?
            }
        };
        let metrics = self.chain_metrics(&chain, &cfg.start, &reference)?;
        chain.write_csv(fs::File::create(self.path("mh_chain.csv"))?)?;
        save_json(&self.path("mh_chain.json"), &metrics)?;
        self.record("baseline_mh", started, &["mh_chain.csv", "mh_chain.json"])?;
        Ok(metrics)
    }

    fn chain_metrics(&mut self, chain: &ChainState, start: &[f64], reference: &SampleMatrix) -> Result<ChainMetrics> {
        Ok(ChainMetrics { start: start.to_vec(), metadata: chain.metadata(), prediction: self.evaluate_samples(&chain.samples, reference)? })
    }

    pub fn baseline_hmc(&mut self) -> Result<Vec<ChainMetrics>> {
        stage("baseline hmc", self.baseline_hmc_inner())
    }

    fn baseline_hmc_inner(&mut self) -> Result<Vec<ChainMetrics>> {
        let started = Instant::now();
        let cfg = self.require(&self.config.baselines.hmc, "hmc")?;
        let truth = self.truth()?;
        let reference = self.reference()?;
        let d = self.config.truth.dim;
        let data = match cfg.target {
            HmcTarget::Standard => Some(self.load_dataset()?),
            HmcTarget::Truth => None,
        };
        let mut chains = Vec::new();
        for (k, start) in cfg.starts.iter().enumerate() {
            let seed = stream_seed(self.seed(streams::HMC), k as u64);
            let m_init = DVector::from_column_slice(start);
            let chain = match &data {
                None => hmc_sample(|m| Some(truth.logpdf_and_grad(m)), &m_init, cfg.step_size, cfg.leapfrog_steps, cfg.n_steps, seed)?,
                Some(data) => {
                    let model = self.model()?.forward();
                    let gamma = DMatrix::identity(model.output_dim(), model.output_dim()) * cfg.noise_variance;
                    let eye = DMatrix::identity(d, d);
                    // With the prior mean at m the prior term vanishes, leaving half the likelihood gradient.
                    let target = |m: &DVector<f64>| {
                        let value = standard_neg_loglik(model, m, data, &gamma).ok()?;
                        let grad = map_scalar_gradient(model, data, m, &gamma, &eye, m).ok()?;
                        Some((-value, grad * -2.0))
                    };
                    hmc_sample(target, &m_init, cfg.step_size, cfg.leapfrog_steps, cfg.n_steps, seed)?
                }
            };
            chain.write_csv(fs::File::create(self.path(&format!("hmc_chain_{k}.csv")))?)?;
            chains.push(self.chain_metrics(&chain, start, &reference)?);
        }
        save_json(&self.path("hmc_chains.json"), &chains)?;
        let mut files: Vec<String> = (0..chains.len()).map(|k| format!("hmc_chain_{k}.csv")).collect();
        files.push("hmc_chains.json".into());
        self.record("baseline_hmc", started, &files.iter().map(String::as_str).collect::<Vec<_>>())?;
        Ok(chains)
    }

    pub fn baseline_sigma(&mut self) -> Result<SigmaSearch> {
        stage("sigma", self.baseline_sigma_inner())
    }

    fn baseline_sigma_inner(&mut self) -> Result<SigmaSearch> {
        let started = Instant::now();
        let cfg = self.require(&self.config.baselines.sigma, "sigma")?;
        let file = if self.config.test.augment.is_some() { "predictions_augmented.csv" } else { "predictions_uniform.csv" };
        let centers = self.load(file)?;
        let opts = SigmaOptions { grid: log_grid(cfg.grid_min, cfg.grid_max, cfg.grid_points), n_mc: cfg.n_mc, seed: self.seed(streams::SIGMA) };
        let search = optimize_sigma(&centers, &SigmaPrior::Mixture(self.truth()?), &opts)?;
        save_json(&self.path("sigma.json"), &search)?;
        self.record("sigma", started, &["sigma.json"])?;
        Ok(search)
    }

    /// Every stage in order.
    pub fn run(&mut self) -> Result<RunSummary> {
        self.generate()?;
        let inversion = if self.analytic() {
            None
        } else {
            let s = self.invert()?;
            self.permute()?;
            Some(s)
        };
        self.train()?;
        self.predict()?;
        let metrics = self.report()?;
        let baselines = self.baselines()?;
        Ok(RunSummary { inversion, metrics, baselines })
    }
}

fn training_summary(history: &TrainingHistory, seconds: f64) -> TrainingSummary {
    TrainingSummary { final_residual: history.final_residual(), iterations: history.iterations, converged: history.converged, seconds }
}

/// Reads back a mixture written by the MAP baseline.
pub fn load_mixture(path: &Path) -> Result<GaussianMixture> {
    GaussianMixture::from_record(&load_json::<MixtureRecord>(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
name = "small"
seed = 3
[truth]
kind = "bimodal"
[data]
n_train = 30
[nnk]
hidden = [4]
n_anchors = 6
max_iter = 40
[test]
n_test = 50
n_reference = 200
augment = { n_per = 2 }
[baselines.hmc]
n_steps = 50
starts = [[2.0, 2.0]]
"#;

    #[test]
    fn full_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = Experiment::new(SMALL, dir.path(), None).unwrap();
        let summary = exp.run().unwrap();
        assert_eq!(summary.inversion.as_ref().unwrap().n_selected, 30);
        assert!(summary.metrics.augmented.is_some());
        assert_eq!(summary.baselines.hmc.len(), 1);
        for f in ["inputs.csv", "m_opt.csv", "pairing.csv", "network.json", "predictions_augmented.csv", "metrics.json", "hmc_chain_0.csv", "manifest.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let manifest: Manifest = load_json(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.config_sha256.len(), 64);
        assert!(STAGES[..6].iter().all(|s| manifest.stages.contains_key(*s)));
    }

    #[test]
    fn reruns_are_byte_identical() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        Experiment::new(SMALL, a.path(), None).unwrap().run().unwrap();
        Experiment::new(SMALL, b.path(), None).unwrap().run().unwrap();
        for f in ["observations.csv", "m_opt.csv", "predictions_uniform.csv", "hmc_chain_0.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let c = tempfile::tempdir().unwrap();
        Experiment::new(SMALL, c.path(), Some(4)).unwrap().generate().unwrap();
        assert_ne!(fs::read(a.path().join("observations.csv")).unwrap(), fs::read(c.path().join("observations.csv")).unwrap());
    }

    #[test]
    fn missing_artifact_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let err = Experiment::new(SMALL, dir.path(), None).unwrap().train().unwrap_err();
        assert!(err.to_string().starts_with("stage `train` failed"), "{err}");
        assert!(!err.is_validation());
    }

    #[test]
    fn analytic_run_reports_fit_errors() {
        let text = "[truth]\nkind = \"analytic\"\n[data]\nn_train = 40\n[nnk]\nhidden = [5]\nmax_iter = 30\n[test]\nn_test = 40\n";
        let dir = tempfile::tempdir().unwrap();
        let summary = Experiment::new(text, dir.path(), None).unwrap().run().unwrap();
        let a = summary.metrics.analytic.unwrap();
        assert!(a.e_train.is_finite() && a.e_test.is_finite());
        assert!(summary.inversion.is_none());
    }
}
