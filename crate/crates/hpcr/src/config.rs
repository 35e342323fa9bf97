//! Experiment configuration: a flat key/value TOML file with one section per
//! subsystem. Every hyperparameter has an explicit key and a documented
//! default; only `experiment.methods` and `experiment.seeds` must be given.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TemperatureSchedule;
use crate::trainer::{Classifier, Method};

/// Synthetic task-stream parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamConfig {
    /// Number of tasks T.
    pub num_tasks: usize,
    /// Classes per task; total classes = T * classes_per_task.
    pub classes_per_task: usize,
    /// Generated samples per class (train + held-out test).
    pub samples_per_class: usize,
    /// Feature dimension d.
    pub feature_dim: usize,
    /// Class-cluster means are drawn uniformly from [-mean_scale, mean_scale]^d.
    pub mean_scale: f64,
    /// Isotropic Gaussian noise around each class mean.
    pub noise_sigma: f64,
    /// Current-batch size |B| served per training step.
    pub batch_size: usize,
    /// Generator seed; experiment runs overwrite this per seed cell.
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            num_tasks: 5,
            classes_per_task: 2,
            samples_per_class: 100,
            feature_dim: 32,
            mean_scale: 3.0,
            noise_sigma: 0.6,
            batch_size: 10,
            seed: 1,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::Config("stream.num_tasks must be positive".into()));
        }
        if self.classes_per_task == 0 {
            return Err(Error::Config(
                "stream.classes_per_task must be positive".into(),
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config(
                "stream.samples_per_class must be positive".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("stream.feature_dim must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("stream.batch_size must be at least 1".into()));
        }
        if !(self.mean_scale.is_finite() && self.noise_sigma.is_finite() && self.noise_sigma >= 0.0)
        {
            return Err(Error::Config(
                "stream.mean_scale and stream.noise_sigma must be finite (sigma >= 0)".into(),
            ));
        }
        Ok(())
    }

    /// Total number of classes across all tasks.
    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }
}

/// Feature-extractor and proxy-classifier parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input dimension; must match the stream's feature_dim.
    pub input_dim: usize,
    /// Hidden-layer widths of the extractor MLP (ReLU between layers).
    pub hidden: Vec<usize>,
    /// Embedding dimension e (output of the final layer, then L2-normalized).
    pub embedding_dim: usize,
    /// Static temperature applied inside every similarity softmax.
    pub tau: f64,
    /// Standard deviation for lazily registered class proxies.
    pub proxy_init_sigma: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 32,
            hidden: vec![64, 64],
            embedding_dim: 32,
            tau: 0.09,
            proxy_init_sigma: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::Config(
                "model.input_dim and model.embedding_dim must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config("model.tau must be a positive real".into()));
        }
        if !(self.proxy_init_sigma.is_finite() && self.proxy_init_sigma >= 0.0) {
            return Err(Error::Config("model.proxy_init_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Training hyperparameters shared by every method.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// Scale of the proxy-based distillation term.
    pub alpha: f64,
    /// Scale of the sample-based distillation term.
    pub beta: f64,
    /// Combined-batch size below which anchor-to-sample pairs are gated off.
    pub n_min: usize,
    /// SGD learning rate.
    pub learning_rate: f64,
    /// Replay buffer capacity M; filled per experiment cell.
    pub buffer_capacity: usize,
    /// Current-batch size |B|; mirrors stream.batch_size.
    pub current_batch: usize,
    /// Replay-batch size |B_M| retrieved per step.
    pub replay_batch: usize,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 1.0,
            beta: 1.0,
            n_min: 60,
            learning_rate: 0.1,
            buffer_capacity: 200,
            current_batch: 10,
            replay_batch: 10,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0)
            || !(self.beta.is_finite() && self.beta >= 0.0)
        {
            return Err(Error::Config(
                "train.alpha and train.beta must be >= 0".into(),
            ));
        }
        if self.n_min == 0 {
            return Err(Error::Config("train.n_min must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("train.learning_rate must be positive".into()));
        }
        if self.current_batch == 0 {
            return Err(Error::Config(
                "train.current_batch must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Serialized form of the temperature schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub tau_max: f64,
    pub tau_min: f64,
    /// Cycle length S in optimizer steps.
    pub cycle: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            tau_max: 0.16,
            tau_min: 0.05,
            cycle: 500,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self, static_tau: f64) -> Result<TemperatureSchedule> {
        TemperatureSchedule::new(self.tau_max, self.tau_min, self.cycle, static_tau)
    }
}

/// Top-level experiment grid: methods x buffer sizes x seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Methods to run; required for `run`.
    pub methods: Vec<Method>,
    /// Seeds; one run per (method, buffer, seed) cell. Required.
    pub seeds: Vec<u64>,
    /// Buffer capacities to sweep.
    pub buffer_sizes: Vec<usize>,
    /// Output directory; overridable via the HPCR_OUT_DIR environment variable.
    pub out_dir: String,
    /// `auto` pairs NCM with SCR and softmax with everything else.
    pub classifier: ClassifierChoice,
    /// Emit a per-step proxy-gradient audit CSV.
    pub grad_audit: bool,
    /// Evaluate after every optimizer step (learning curves); slow.
    pub eval_per_step: bool,
    /// Emit embeddings of all test samples under the final parameters.
    pub export_embeddings: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            methods: Vec::new(),
            seeds: Vec::new(),
            buffer_sizes: vec![200],
            out_dir: "results".into(),
            classifier: ClassifierChoice::Auto,
            grad_audit: false,
            eval_per_step: false,
            export_embeddings: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierChoice {
    Auto,
    Softmax,
    Ncm,
}

impl ClassifierChoice {
    /// Resolve to a concrete classifier for a method.
    pub fn resolve(self, method: Method) -> Classifier {
        match self {
            ClassifierChoice::Auto => method.default_classifier(),
            ClassifierChoice::Softmax => Classifier::Softmax,
            ClassifierChoice::Ncm => Classifier::Ncm,
        }
    }
}

/// Temperature-schedule grid for the `tau-sweep` verb.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub tau_max: Vec<f64>,
    pub tau_min: Vec<f64>,
    pub cycle: Vec<u64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            tau_max: vec![0.16],
            tau_min: vec![0.05],
            cycle: vec![500],
        }
    }
}

/// The whole configuration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub model: ModelConfig,
    pub train: HyperParams,
    pub schedule: ScheduleConfig,
    pub experiment: ExperimentSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // The stream's batch size is the single source for |B|.
        cfg.train.current_batch = cfg.stream.batch_size;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks shared by every verb.
    pub fn validate_common(&self) -> Result<()> {
        self.stream.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.schedule.build(self.model.tau)?;
        if self.model.input_dim != self.stream.feature_dim {
            return Err(Error::Config(format!(
                "model.input_dim ({}) must equal stream.feature_dim ({})",
                self.model.input_dim, self.stream.feature_dim
            )));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config(
                "missing field `experiment.seeds`: at least one seed is required".into(),
            ));
        }
        Ok(())
    }

    /// Checks specific to the `run` verb.
    pub fn validate_for_run(&self) -> Result<()> {
        self.validate_common()?;
        if self.experiment.methods.is_empty() {
            return Err(Error::Config(
                "missing field `experiment.methods`: at least one method is required".into(),
            ));
        }
        if self.experiment.buffer_sizes.is_empty() {
            return Err(Error::Config(
                "experiment.buffer_sizes must not be empty".into(),
            ));
        }
        Ok(())
    }
}
