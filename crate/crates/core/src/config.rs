//! Experiment configuration, read from TOML. Every field has a default so
//! a config file only needs the values it changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assignment::{ErrorThreshold, TimingModel};
use crate::convergence::ConvergenceConstants;
use crate::error::{Error, Result};
use crate::model::{KdParams, ModelSpec};
use crate::resources::{load_population_csv, ResourceRecord, ResourceWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Fedrac,
    Fedavg,
    Fedprox,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Fedrac => "fedrac",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedrac" => Ok(Method::Fedrac),
            "fedavg" => Ok(Method::Fedavg),
            "fedprox" => Ok(Method::Fedprox),
            other => Err(Error::Config(format!(
                "unknown method `{other}` (expected fedrac, fedavg or fedprox)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    /// Name of a bundled population; ignored when `path` is set.
    pub fixture: String,
    /// CSV file with header `id,speed_ghz,rate_mbps,memory_gb`.
    pub path: Option<PathBuf>,
    /// Weights of processing speed, transmission rate and memory.
    pub weights: [f64; 3],
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            fixture: "smartphones_40".into(),
            path: None,
            weights: [0.4, 0.4, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusteringConfig {
    /// Number of clusters to train; `None` keeps the Dunn-optimal count.
    pub m: Option<usize>,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            m: None,
            restarts: 16,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanningConfig {
    /// Precision every cluster aims for; sets the round budgets.
    pub target_precision: f64,
    pub round_cap: u32,
    pub delta_slack: f64,
    pub theta: ErrorThreshold,
    pub reduction_step: f64,
    pub max_reductions: u32,
}

impl Default for PlanningConfig {
    fn default() -> Self {
        Self {
            target_precision: 0.05,
            round_cap: 200,
            delta_slack: 1.1,
            theta: ErrorThreshold::default(),
            reduction_step: 0.5,
            max_reductions: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    pub compression_factor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_widths: vec![64, 32],
            compression_factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Local epochs per cluster rank; the last value repeats.
    pub local_epochs: Vec<u32>,
    /// Proximal coefficient of the FedProx baseline.
    pub mu_prox: f64,
    /// Class-balanced resampling in the master cluster when slaves exist.
    pub balanced_master: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            batch_size: 200,
            local_epochs: vec![1],
            mu_prox: 0.001,
            balanced_master: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdConfig {
    pub enabled: bool,
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        let d = KdParams::default();
        Self {
            enabled: true,
            temperature: d.temperature,
            lambda: d.lambda,
        }
    }
}

impl KdConfig {
    pub fn params(&self) -> KdParams {
        KdParams {
            temperature: self.temperature,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// CSV with a `label` column; synthetic blobs are generated when unset.
    pub path: Option<PathBuf>,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    /// Range of local instance counts, drawn uniformly per participant.
    pub instances_min: usize,
    pub instances_max: usize,
    pub test_size: usize,
    /// Drop one class from every participant's training data.
    pub leave_one_out: bool,
    /// Class to drop; the most frequent one when unset.
    pub left_out_class: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            classes: 6,
            dim: 8,
            separation: 3.0,
            instances_min: 400,
            instances_max: 800,
            test_size: 1200,
            leave_one_out: false,
            left_out_class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Training scheme to run.
    pub baseline: Method,
    pub population: PopulationConfig,
    pub clustering: ClusteringConfig,
    pub convergence: ConvergenceConstants,
    pub planning: PlanningConfig,
    pub timing: TimingModel,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub kd: KdConfig,
    pub data: DataConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            baseline: Method::default(),
            population: PopulationConfig::default(),
            clustering: ClusteringConfig::default(),
            convergence: ConvergenceConstants::default(),
            planning: PlanningConfig::default(),
            timing: TimingModel::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            kd: KdConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.population.path, &mut cfg.data.path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.weights()?;
        self.model_spec().validate()?;
        self.timing.validate()?;
        let t = &self.training;
        if !(t.learning_rate.is_finite() && t.learning_rate > 0.0) {
            return bad(format!(
                "training.learning_rate must be positive, got {}",
                t.learning_rate
            ));
        }
        if t.batch_size == 0 {
            return bad("training.batch_size must be positive".into());
        }
        if t.local_epochs.is_empty() || t.local_epochs.contains(&0) {
            return bad(
                "training.local_epochs must be a nonempty list of positive integers".into(),
            );
        }
        if !(t.mu_prox.is_finite() && t.mu_prox >= 0.0) {
            return bad(format!(
                "training.mu_prox must be nonnegative, got {}",
                t.mu_prox
            ));
        }
        if !(self.kd.temperature > 0.0) || !(0.0..=1.0).contains(&self.kd.lambda) {
            return bad(format!(
                "kd needs temperature > 0 and lambda in [0, 1], got {} and {}",
                self.kd.temperature, self.kd.lambda
            ));
        }
        let d = &self.data;
        if d.instances_min < t.batch_size || d.instances_max < d.instances_min {
            return bad(format!(
                "data needs batch_size <= instances_min <= instances_max, got {} <= {} <= {}",
                t.batch_size, d.instances_min, d.instances_max
            ));
        }
        if d.path.is_none() && (d.classes < 2 || d.dim == 0) {
            return bad("synthetic data needs classes >= 2 and dim >= 1".into());
        }
        if d.test_size == 0 {
            return bad("data.test_size must be positive".into());
        }
        if let Some(c) = d.left_out_class {
            if d.path.is_none() && c >= d.classes {
                return bad(format!("data.left_out_class {c} out of range"));
            }
        }
        let p = &self.planning;
        if !(p.target_precision.is_finite() && p.target_precision > 0.0) {
            return Err(Error::InvalidPrecision(p.target_precision));
        }
        if p.round_cap == 0
            || !(p.delta_slack >= 1.0)
            || !(p.reduction_step > 0.0 && p.reduction_step < 1.0)
        {
            return bad(
                "planning needs round_cap >= 1, delta_slack >= 1 and reduction_step in (0, 1)"
                    .into(),
            );
        }
        match p.theta {
            ErrorThreshold::Relative(v) | ErrorThreshold::Absolute(v)
                if !(v.is_finite() && v >= 0.0) =>
            {
                return bad(format!("planning.theta must be nonnegative, got {v}"));
            }
            _ => {}
        }
        if let Some(m) = self.clustering.m {
            if m == 0 {
                return bad("clustering.m must be at least 1".into());
            }
        }
        if self.clustering.restarts == 0 || self.clustering.max_iter == 0 {
            return bad("clustering needs restarts >= 1 and max_iter >= 1".into());
        }
        if let Some(path) = &self.population.path {
            if !path.exists() {
                return Err(Error::io(
                    path,
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        } else if crate::fixtures::by_name(&self.population.fixture).is_none() {
            return bad(format!(
                "unknown population fixture `{}`",
                self.population.fixture
            ));
        }
        if let Some(path) = &d.path {
            if !path.exists() {
                return Err(Error::io(
                    path,
                    std::io::Error::from(std::io::ErrorKind::NotFound),
                ));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<ResourceWeights> {
        let [a, b, c] = self.population.weights;
        ResourceWeights::new(a, b, c)
    }

    /// Full-size model for the configured data dimensions.
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.data.dim,
            hidden_widths: self.model.hidden_widths.clone(),
            class_count: self.data.classes,
            compression_factor: self.model.compression_factor,
        }
    }

    pub fn population(&self) -> Result<Vec<ResourceRecord>> {
        match &self.population.path {
            Some(path) => load_population_csv(path),
            None => crate::fixtures::by_name(&self.population.fixture).ok_or_else(|| {
                Error::Config(format!(
                    "unknown population fixture `{}`",
                    self.population.fixture
                ))
            }),
        }
    }
}
