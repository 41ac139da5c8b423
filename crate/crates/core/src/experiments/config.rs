//! Experiment configuration read from TOML.
//!
//! Every key is optional except `truth.kind`; unknown keys and invalid values
//! are reported with their dotted path, e.g. `nnk.hidden`.

use std::cell::RefCell;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use super::truth::{TruthKind, TruthSpec};
use crate::forward_models::{Circle, StiffnessMap};
use crate::inversion::{InitPolicy, InversionOptions, ResidualScope, TikhonovSchedule};
use crate::nnk::{Trainer, TrainingOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Spring { stiffness_map: StiffnessMap },
    Fem(FemConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FemConfig {
    pub nx: usize,
    pub ny: usize,
    pub hole: Option<Circle>,
    pub correlation_length: f64,
    pub transform: bool,
    pub simp_exponent: f64,
    /// Outward flux on the right edge.
    pub flux: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    /// Spring input scatter around `[0.5, 0.5]`.
    pub delta_x: f64,
    /// Finite-element design inputs: base fields, fields kept, copies per kept field, jitter.
    pub n_base_fields: usize,
    pub n_keep: usize,
    pub n_noise_per: usize,
    pub design_jitter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub delta: f64,
    pub n_per_sample: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnkConfig {
    pub hidden: Vec<usize>,
    pub n_anchors: usize,
    pub training: TrainingOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub n_per: usize,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub n_test: usize,
    pub augment: Option<AugmentConfig>,
    /// Spring inputs at which output moments are compared.
    pub prediction_inputs: Vec<Vec<f64>>,
    /// Monte Carlo truth sample count.
    pub n_reference: usize,
    /// Ball radius for the per-mode concentration metric.
    pub concentration_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapConfig {
    pub n_starts: usize,
    /// Use each start as the prior mean of its own objective; otherwise the origin.
    pub prior_at_start: bool,
    pub noise_variance: f64,
    pub prior_variance: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MhLikelihood {
    Standard,
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MhConfig {
    pub likelihood: MhLikelihood,
    pub n_steps: usize,
    pub proposal_variance: f64,
    pub noise_variance: f64,
    pub n_lkl: usize,
    pub start: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HmcTarget {
    /// The truth mixture density.
    Truth,
    /// The standard likelihood over the dataset.
    Standard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmcConfig {
    pub target: HmcTarget,
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub n_steps: usize,
    pub noise_variance: f64,
    pub starts: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaConfig {
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_points: usize,
    pub n_mc: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselinesConfig {
    pub map: Option<MapConfig>,
    pub mh: Option<MhConfig>,
    pub hmc: Option<HmcConfig>,
    pub sigma: Option<SigmaConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub truth: TruthSpec,
    pub data: DataConfig,
    pub inversion: InversionOptions,
    pub noise: Option<NoiseConfig>,
    pub permute: bool,
    pub nnk: NnkConfig,
    pub test: TestConfig,
    pub baselines: BaselinesConfig,
}

/// Typed access to one TOML table, remembering which keys were read.
struct Section<'a> {
    path: String,
    table: Option<&'a Table>,
    used: RefCell<BTreeSet<String>>,
}

impl<'a> Section<'a> {
    fn root(table: &'a Table) -> Self {
        Self { path: String::new(), table: Some(table), used: RefCell::default() }
    }

    fn field(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn present(&self) -> bool {
        self.table.is_some()
    }

    fn get(&self, key: &str) -> Option<&'a Value> {
        self.used.borrow_mut().insert(key.to_string());
        self.table.and_then(|t| t.get(key))
    }

    fn sub(&self, key: &str) -> Result<Section<'a>> {
        let table = match self.get(key) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => return Err(Error::config(self.field(key), "expected a table")),
        };
        Ok(Section { path: self.field(key), table, used: RefCell::default() })
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Float(v)) => Ok(Some(*v)),
            Some(Value::Integer(v)) => Ok(Some(*v as f64)),
            Some(_) => Err(Error::config(self.field(key), "expected a number")),
        }
    }

    fn f64(&self, key: &str, default: f64) -> Result<f64> {
        Ok(self.opt_f64(key)?.unwrap_or(default))
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.f64(key, default)?;
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::config(self.field(key), format!("must be positive, got {v}")));
        }
        Ok(v)
    }

    fn nonnegative(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.f64(key, default)?;
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::config(self.field(key), format!("must be nonnegative, got {v}")));
        }
        Ok(v)
    }

    fn u64(&self, key: &str, default: u64) -> Result<u64> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Integer(v)) if *v >= 0 => Ok(*v as u64),
            Some(_) => Err(Error::config(self.field(key), "expected a nonnegative integer")),
        }
    }

    fn count(&self, key: &str, default: usize) -> Result<usize> {
        let v = self.u64(key, default as u64)? as usize;
        if v == 0 {
            return Err(Error::config(self.field(key), "must be at least 1"));
        }
        Ok(v)
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.get(key) {
            None => Ok(default),
            Some(Value::Boolean(b)) => Ok(*b),
            Some(_) => Err(Error::config(self.field(key), "expected true or false")),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.clone())),
            Some(_) => Err(Error::config(self.field(key), "expected a string")),
        }
    }

    fn choice<T>(&self, key: &str, default: T, options: &[(&str, T)]) -> Result<T>
    where
        T: Copy,
    {
        match self.string(key)? {
            None => Ok(default),
            Some(s) => options.iter().find(|(name, _)| *name == s).map(|(_, v)| *v).ok_or_else(|| {
                let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                Error::config(self.field(key), format!("unknown value `{s}`; expected one of {}", names.join(", ")))
            }),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    _ => Err(Error::config(self.field(key), "expected an array of numbers")),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(_) => Err(Error::config(self.field(key), "expected an array of numbers")),
        }
    }

    fn f64_lists(&self, key: &str) -> Result<Option<Vec<Vec<f64>>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(rows)) => rows
                .iter()
                .map(|row| match row {
                    Value::Array(items) => items
                        .iter()
                        .map(|v| v.as_float().or_else(|| v.as_integer().map(|i| i as f64)))
                        .collect::<Option<Vec<f64>>>()
                        .ok_or_else(|| Error::config(self.field(key), "expected an array of number arrays")),
                    _ => Err(Error::config(self.field(key), "expected an array of number arrays")),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(_) => Err(Error::config(self.field(key), "expected an array of number arrays")),
        }
    }

    fn usize_list(&self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.get(key) {
            None => Ok(None),
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i > 0 => Ok(*i as usize),
                    _ => Err(Error::config(self.field(key), "expected an array of positive integers")),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(_) => Err(Error::config(self.field(key), "expected an array of positive integers")),
        }
    }

    /// Rejects keys that were never read.
    fn finish(&self) -> Result<()> {
        if let Some(t) = self.table {
            let used = self.used.borrow();
            if let Some(unknown) = t.keys().find(|k| !used.contains(*k)) {
                return Err(Error::config(self.field(unknown), "unknown key"));
            }
        }
        Ok(())
    }
}

fn parse_truth(s: &Section) -> Result<TruthSpec> {
    let t = s.sub("truth")?;
    let name = t.string("kind")?.ok_or_else(|| Error::config("truth.kind", "missing"))?;
    let kind = TruthKind::parse(&name).ok_or_else(|| {
        Error::config("truth.kind", format!("unknown truth kind `{name}`; expected one of {}", TruthKind::NAMES.join(", ")))
    })?;
    let dim = t.u64("dim", kind.default_dim() as u64)? as usize;
    let spec = TruthSpec::with_dim(kind, dim)?;
    t.finish()?;
    Ok(spec)
}

fn parse_model(s: &Section, truth: &TruthSpec) -> Result<ModelConfig> {
    let m = s.sub("model")?;
    let default_kind = match truth.kind {
        TruthKind::BimodalKl | TruthKind::Trimodal | TruthKind::UnimodalKl => "fem",
        _ => "spring",
    };
    let kind = m.string("kind")?.unwrap_or_else(|| default_kind.to_string());
    let cfg = match kind.as_str() {
        "spring" => {
            let stiffness_map = m.choice("stiffness_map", StiffnessMap::Exp, &[("exp", StiffnessMap::Exp), ("square", StiffnessMap::Square)])?;
            ModelConfig::Spring { stiffness_map }
        }
        "fem" => {
            let hole = m.sub("hole")?;
            let hole_cfg = if hole.present() {
                let center = hole.f64_list("center")?.unwrap_or_else(|| vec![0.5, 0.5]);
                if center.len() != 2 {
                    return Err(Error::config("model.hole.center", "expected two coordinates"));
                }
                let radius = hole.positive("radius", 0.2)?;
                hole.finish()?;
                Some(Circle { center: [center[0], center[1]], radius })
            } else {
                None
            };
            ModelConfig::Fem(FemConfig {
                nx: m.count("nx", 12)?,
                ny: m.count("ny", 12)?,
                hole: hole_cfg,
                correlation_length: m.positive("correlation_length", 1.0)?,
                transform: m.bool("transform", true)?,
                simp_exponent: m.positive("simp_exponent", 1.0)?,
                flux: m.f64("flux", 1.0)?,
            })
        }
        other => return Err(Error::config("model.kind", format!("unknown model kind `{other}`; expected spring or fem"))),
    };
    m.finish()?;
    if truth.kind != TruthKind::Analytic {
        let fem = matches!(cfg, ModelConfig::Fem(_));
        if fem && truth.kind.fixed_dim() == Some(2) {
            return Err(Error::config("model.kind", format!("truth `{}` is two-dimensional; use the spring model", truth.kind.name())));
        }
        if !fem && truth.dim != 2 {
            return Err(Error::config("model.kind", format!("the spring model has two latent parameters but truth `{}` has {}", truth.kind.name(), truth.dim)));
        }
    }
    Ok(cfg)
}

fn parse_tikhonov(s: &Section) -> Result<TikhonovSchedule> {
    let t = s.sub("tikhonov")?;
    let d = TikhonovSchedule::default();
    let out = TikhonovSchedule {
        threshold: t.nonnegative("threshold", d.threshold)?,
        high: t.positive("high", d.high)?,
        low: t.positive("low", d.low)?,
    };
    t.finish()?;
    Ok(out)
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        let root = Section::root(&table);
        let name = root.string("name")?.unwrap_or_else(|| "experiment".into());
        let seed = root.u64("seed", 0)?;
        let truth = parse_truth(&root)?;
        let model = parse_model(&root, &truth)?;
        let fem = matches!(model, ModelConfig::Fem(_));

        let d = root.sub("data")?;
        let data = DataConfig {
            n_train: d.count("n_train", 200)?,
            delta_x: d.nonnegative("delta_x", 0.005)?,
            n_base_fields: d.count("n_base_fields", 40)?,
            n_keep: d.count("n_keep", 20)?,
            n_noise_per: d.count("n_noise_per", 10)?,
            design_jitter: d.nonnegative("design_jitter", 0.01)?,
        };
        let explicit_n_train = d.table.is_some_and(|t| t.contains_key("n_train"));
        d.finish()?;
        let mut data = data;
        if fem {
            if data.n_keep > data.n_base_fields {
                return Err(Error::config("data.n_keep", "cannot exceed data.n_base_fields"));
            }
            let n = data.n_keep * data.n_noise_per;
            if explicit_n_train && data.n_train != n {
                return Err(Error::config("data.n_train", format!("finite-element runs have n_keep·n_noise_per = {n} samples")));
            }
            data.n_train = n;
        }

        let inv = root.sub("inversion")?;
        let defaults = InversionOptions::default();
        let m_init = match inv.f64_list("m_init")? {
            Some(v) if v.len() != truth.dim => {
                return Err(Error::config("inversion.m_init", format!("expected {} entries, got {}", truth.dim, v.len())))
            }
            Some(v) => InitPolicy::Fixed(v),
            None => InitPolicy::Zero,
        };
        let inversion = InversionOptions {
            learning_rate: inv.positive("learning_rate", defaults.learning_rate)?,
            residual_tol: inv.positive("residual_tol", if fem { 0.01 } else { 1e-3 })?,
            max_iter: inv.count("max_iter", defaults.max_iter)?,
            tikhonov: parse_tikhonov(&inv)?,
            m_init,
            warm_start: None,
            scope: inv.choice("scope", ResidualScope::Stacked, &[("stacked", ResidualScope::Stacked), ("per_sample", ResidualScope::PerSample)])?,
        };
        let noise_sec = inv.sub("noise")?;
        let noise = if noise_sec.present() {
            let n = NoiseConfig { delta: noise_sec.nonnegative("delta", 0.01)?, n_per_sample: noise_sec.count("n_per_sample", 100)? };
            noise_sec.finish()?;
            Some(n)
        } else {
            None
        };
        inv.finish()?;

        let permute = root.sub("permutation")?;
        let permute_enabled = permute.bool("enabled", true)?;
        permute.finish()?;

        let n = root.sub("nnk")?;
        let default_hidden = if fem { vec![12, 7, 4] } else { vec![10, 4] };
        let hidden = n.usize_list("hidden")?.unwrap_or(default_hidden);
        if hidden.is_empty() {
            return Err(Error::config("nnk.hidden", "need at least one hidden layer"));
        }
        let trainer = n.choice("trainer", Trainer::NewtonRaphson, &[("newton_raphson", Trainer::NewtonRaphson), ("gradient_descent", Trainer::GradientDescent)])?;
        let base = match trainer {
            Trainer::NewtonRaphson => TrainingOptions::newton_raphson(),
            Trainer::GradientDescent => TrainingOptions::gradient_descent(),
        };
        let training = TrainingOptions {
            trainer,
            learning_rate: n.positive("learning_rate", base.learning_rate)?,
            tikhonov: parse_tikhonov(&n)?,
            residual_tol: n.positive("residual_tol", if fem { 0.01 } else { base.residual_tol })?,
            max_iter: n.count("max_iter", base.max_iter)?,
        };
        let nnk = NnkConfig { hidden, n_anchors: n.count("n_anchors", if truth.dim > 2 { 25 } else { 20 })?, training };
        n.finish()?;

        let t = root.sub("test")?;
        let aug = t.sub("augment")?;
        let augment = if aug.present() && aug.bool("enabled", true)? {
            Some(AugmentConfig { n_per: aug.count("n_per", 5)?, sigma: aug.nonnegative("sigma", 0.002)? })
        } else {
            None
        };
        aug.finish()?;
        let prediction_inputs = t.f64_lists("prediction_inputs")?.unwrap_or_else(|| if fem { vec![] } else { vec![vec![0.9, 0.8]] });
        if let Some(bad) = prediction_inputs.iter().find(|x| x.len() != 2) {
            return Err(Error::config("test.prediction_inputs", format!("spring inputs have two entries, got {}", bad.len())));
        }
        if fem && !prediction_inputs.is_empty() {
            return Err(Error::config("test.prediction_inputs", "only supported for the spring model"));
        }
        let test = TestConfig {
            n_test: t.count("n_test", 1000)?,
            augment,
            prediction_inputs,
            n_reference: t.count("n_reference", 1000)?,
            concentration_radius: t.positive("concentration_radius", 1.0)?,
        };
        t.finish()?;

        let baselines = parse_baselines(&root, &truth)?;
        root.finish()?;

        let cfg = Self { name, seed, model, truth, data, inversion, noise, permute: permute_enabled, nnk, test, baselines };
        cfg.inversion.validate()?;
        cfg.nnk.training.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(field.replace("training.", "nnk."), message),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn is_fem(&self) -> bool {
        matches!(self.model, ModelConfig::Fem(_))
    }

    /// Full layer sizes `[d, hidden…, 1]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.truth.dim];
        sizes.extend(&self.nnk.hidden);
        sizes.push(1);
        sizes
    }
}

fn parse_baselines(root: &Section, truth: &TruthSpec) -> Result<BaselinesConfig> {
    let b = root.sub("baselines")?;
    if b.present() && truth.kind == TruthKind::Analytic {
        return Err(Error::config("baselines", "not available for the analytic truth"));
    }
    let d = truth.dim;
    let mut out = BaselinesConfig::default();

    let map = b.sub("map")?;
    if map.present() {
        out.map = Some(MapConfig {
            n_starts: map.count("n_starts", 17)?,
            prior_at_start: map.bool("prior_at_start", true)?,
            noise_variance: map.positive("noise_variance", 1.0)?,
            prior_variance: map.positive("prior_variance", 1.0)?,
            n_samples: map.count("n_samples", 1000)?,
        });
        map.finish()?;
    }

    let mh = b.sub("mh")?;
    if mh.present() {
        let start = mh.f64_list("start")?.unwrap_or_else(|| vec![0.0; d]);
        if start.len() != d {
            return Err(Error::config("baselines.mh.start", format!("expected {d} entries")));
        }
        out.mh = Some(MhConfig {
            likelihood: mh.choice("likelihood", MhLikelihood::Standard, &[("standard", MhLikelihood::Standard), ("distance", MhLikelihood::Distance)])?,
            n_steps: mh.count("n_steps", 2000)?,
            proposal_variance: mh.positive("proposal_variance", 0.25)?,
            noise_variance: mh.positive("noise_variance", 0.01)?,
            n_lkl: mh.count("n_lkl", 20)?,
            start,
        });
        mh.finish()?;
    }

    let hmc = b.sub("hmc")?;
    if hmc.present() {
        let starts = hmc.f64_lists("starts")?.unwrap_or_else(|| vec![vec![-3.0; d], vec![3.0; d]]);
        if starts.is_empty() || starts.iter().any(|s| s.len() != d) {
            return Err(Error::config("baselines.hmc.starts", format!("expected one or more starts with {d} entries")));
        }
        out.hmc = Some(HmcConfig {
            target: hmc.choice("target", HmcTarget::Truth, &[("truth", HmcTarget::Truth), ("standard", HmcTarget::Standard)])?,
            step_size: hmc.positive("step_size", 0.05)?,
            leapfrog_steps: hmc.count("leapfrog_steps", 20)?,
            n_steps: hmc.count("n_steps", 2000)?,
            noise_variance: hmc.positive("noise_variance", 0.01)?,
            starts,
        });
        hmc.finish()?;
    }

    let sigma = b.sub("sigma")?;
    if sigma.present() {
        let cfg = SigmaConfig {
            grid_min: sigma.positive("grid_min", 1e-3)?,
            grid_max: sigma.positive("grid_max", 1.0)?,
            grid_points: sigma.count("grid_points", 30)?,
            n_mc: sigma.count("n_mc", 5000)?,
        };
        if cfg.grid_max < cfg.grid_min {
            return Err(Error::config("baselines.sigma.grid_max", "must not be below grid_min"));
        }
        out.sigma = Some(cfg);
        sigma.finish()?;
    }
    b.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field_of(text: &str) -> String {
        match ExperimentConfig::from_toml_str(text).unwrap_err() {
            Error::Config { field, .. } => field,
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[truth]\nkind = \"bimodal\"\n").unwrap();
        assert_eq!(cfg.truth.kind, TruthKind::Bimodal);
        assert_eq!(cfg.data.n_train, 200);
        assert_eq!(cfg.inversion.residual_tol, 1e-3);
        assert_eq!(cfg.layer_sizes(), vec![2, 10, 4, 1]);
        assert_eq!(cfg.test.prediction_inputs, vec![vec![0.9, 0.8]]);
        assert!(cfg.permute && cfg.baselines.map.is_none());
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("[truth]\nkind = \"pentamodal\"\n"), "truth.kind");
        assert_eq!(field_of("[model]\nkind = \"spring\"\n"), "truth.kind");
        assert_eq!(field_of("[truth]\nkind = \"bimodal\"\n[nnk]\nhidden = []\n"), "nnk.hidden");
        assert_eq!(field_of("[truth]\nkind = \"bimodal\"\n[inversion]\nlearning_rate = -1\n"), "inversion.learning_rate");
        assert_eq!(field_of("[truth]\nkind = \"bimodal\"\n[data]\nn_trian = 3\n"), "data.n_trian");
        assert_eq!(field_of("[truth]\nkind = \"bimodal_kl\"\n[model]\nkind = \"spring\"\n"), "model.kind");
        assert_eq!(field_of("[truth]\nkind = \"unimodal\"\n[baselines.hmc]\nstarts = [[1.0]]\n"), "baselines.hmc.starts");
    }

    #[test]
    fn syntax_errors_are_parse_errors() {
        let err = ExperimentConfig::from_toml_str("[truth\n").unwrap_err();
        assert!(matches!(err, Error::Parse(_)) && err.is_validation());
    }

    #[test]
    fn fem_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[truth]\nkind = \"bimodal_kl\"\ndim = 6\n[model]\nhole = { radius = 0.15 }\n").unwrap();
        let ModelConfig::Fem(fem) = &cfg.model else { panic!() };
        assert_eq!(fem.hole.unwrap().center, [0.5, 0.5]);
        assert_eq!(cfg.layer_sizes(), vec![6, 12, 7, 4, 1]);
        assert_eq!(cfg.nnk.n_anchors, 25);
        assert_eq!(cfg.inversion.residual_tol, 0.01);
    }
}
