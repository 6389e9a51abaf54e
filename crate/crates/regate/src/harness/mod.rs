//! Experiment orchestration: config schema, teacher pretraining, the
//! gated fine-tuning loop, accounting, and the baseline / gated / lambda
//! ablation experiment drivers.
//!
//! One JSON document configures everything. Every section is optional
//! and defaults to the values used throughout the test suite; unknown
//! keys are rejected at any depth. Dotted-path overrides
//! (`train.seed=3`) patch the document before validation.

pub mod experiment;
pub mod metrics;
pub mod train;

pub use experiment::{
    ablate_lambda, pretrain_only, run_experiment, score_dump, write_datasets, AblationReport,
    DumpSplit, ExperimentResult, ScoreDumpRecord,
};
pub use metrics::{accounting_table, read_metrics_csv, totals_from_csv, CsvTotals, MetricsRow};
pub use train::{build_datasets, pretrain_teacher, train_one_arm, Arm, ArmSummary, Datasets, TeacherReport};

use crate::data::TaskConfig;
use crate::data::VocabLayout;
use crate::gating::GatingError;
use crate::model::loss::LossAverage;
use crate::model::{ModelConfig, ModelError};
use crate::optim::OptimAlgo;
use crate::schedule::ScheduleConfig;
use crate::scoring::{ScoreMode, ScoringError, DEFAULT_BETA, DEFAULT_LAMBDA};
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("override {0:?} must look like section.key=value")]
    BadOverride(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Gating(#[from] GatingError),
    #[error("{arm} arm failed at step {step}: {source}")]
    StepFailed {
        arm: &'static str,
        step: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("teacher parameters changed during fine-tuning")]
    TeacherChanged,
    #[error("unknown sample id {0}")]
    UnknownSample(u64),
    #[error("metrics file {path}: {msg}")]
    BadMetrics { path: String, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// True when the root cause is a non-finite value (exit code 2).
    pub fn is_numerical(&self) -> bool {
        match self {
            HarnessError::Tensor(t) | HarnessError::Model(ModelError::Tensor(t)) => {
                matches!(t, TensorError::NonFinite { .. })
            }
            HarnessError::Scoring(ScoringError::InvalidLoss { .. }) => true,
            HarnessError::Gating(GatingError::ScoreNotFinite { .. }) => true,
            HarnessError::StepFailed { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// True when the root cause is an IO failure (exit code 3).
    pub fn is_io(&self) -> bool {
        match self {
            HarnessError::Io(_) | HarnessError::Model(ModelError::Io(_)) => true,
            HarnessError::StepFailed { source, .. } => source.is_io(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Which arms a `train` invocation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Baseline,
    Regate,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub tied_head: bool,
    pub init_std: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            d_ff: 64,
            max_seq_len: 32,
            tied_head: true,
            init_std: 0.02,
        }
    }
}

impl ModelSection {
    pub fn to_model_config(self, vocab: VocabLayout) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            tied_head: self.tied_head,
            init_std: self.init_std,
            vocab,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    /// EMA decay for per-token student difficulty.
    pub beta: f64,
    /// Weight on the reference loss in the combined score.
    pub lambda: f64,
    pub mode: ScoreMode,
    /// Widen gating candidates from label positions to prompt positions.
    pub gate_prompt_tokens: bool,
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection {
            beta: DEFAULT_BETA,
            lambda: DEFAULT_LAMBDA,
            mode: ScoreMode::Combined,
            gate_prompt_tokens: false,
        }
    }
}

/// Learning-rate shape over a fine-tuning run. Linear decay is measured
/// against the token budget when one is set, otherwise against
/// `max_steps`, so arms that spend tokens at different per-step rates
/// still see the same rate at the same cumulative spend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    Constant,
    Linear,
}

impl Default for LrDecay {
    fn default() -> Self {
        LrDecay::Linear
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub algo: OptimAlgo,
    pub lr: f64,
    /// Applies to the fine-tuning arms only; teacher pretraining runs at
    /// a constant rate and stops on its target loss.
    pub decay: LrDecay,
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            algo: OptimAlgo::Sgd,
            lr: 0.1,
            decay: LrDecay::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub max_steps: usize,
    /// When positive, stop an arm once this many label tokens have been
    /// kept (trained on); arms then compare at a matched token budget.
    pub budget_label_tokens: u64,
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
    pub precision: Precision,
    pub teacher_max_steps: usize,
    /// Teacher pretraining stops once held-out copy-label loss falls
    /// below this, in nats.
    pub teacher_target_loss: f64,
    pub loss_average: LossAverage,
    /// When false, timing columns are written as zero so outputs are
    /// byte-identical across runs.
    pub record_timing: bool,
    /// Progress line period on standard error; 0 silences progress.
    pub progress_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            batch_size: 16,
            max_steps: 400,
            budget_label_tokens: 0,
            eval_every: 50,
            seed: 0,
            precision: Precision::F64,
            teacher_max_steps: 2000,
            teacher_target_loss: 0.3,
            loss_average: LossAverage::KeptLabels,
            record_timing: false,
            progress_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub task: TaskConfig,
    pub schedule: ScheduleConfig,
    pub score: ScoreSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub mode: RunMode,
    /// Lambda values for `ablate-lambda`, each run as its own arm.
    pub lambdas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSection::default(),
            task: TaskConfig::default(),
            schedule: ScheduleConfig::default(),
            score: ScoreSection::default(),
            optim: OptimSection::default(),
            train: TrainSection::default(),
            mode: RunMode::default(),
            lambdas: vec![0.0, 0.5, 1.0],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Config(m));
        self.task.validate().map_err(HarnessError::Config)?;
        self.schedule.validate().map_err(HarnessError::Config)?;
        self.model_config().validate()?;
        if self.task.seq_len() > self.model.max_seq_len {
            return err(format!(
                "sequences of length {} exceed max_seq_len {}",
                self.task.seq_len(),
                self.model.max_seq_len
            ));
        }
        if !(self.score.beta > 0.0 && self.score.beta < 1.0) {
            return err(format!("score.beta must lie in (0, 1), got {}", self.score.beta));
        }
        if !(self.score.lambda.is_finite() && self.score.lambda >= 0.0) {
            return err(format!(
                "score.lambda must be finite and non-negative, got {}",
                self.score.lambda
            ));
        }
        if !(self.optim.lr.is_finite() && self.optim.lr > 0.0) {
            return err(format!("optim.lr must be positive, got {}", self.optim.lr));
        }
        if self.train.batch_size == 0 || self.train.max_steps == 0 {
            return err("train.batch_size and train.max_steps must be positive".into());
        }
        if self.train.batch_size > self.task.n_train {
            return err(format!(
                "train.batch_size {} exceeds the fine-tune set size {}",
                self.train.batch_size, self.task.n_train
            ));
        }
        if self.train.teacher_max_steps == 0 {
            return err("train.teacher_max_steps must be positive".into());
        }
        if self.train.batch_size > self.task.n_pretrain {
            return err(format!(
                "train.batch_size {} exceeds the pretrain set size {}",
                self.train.batch_size, self.task.n_pretrain
            ));
        }
        if !(self.train.teacher_target_loss.is_finite() && self.train.teacher_target_loss > 0.0) {
            return err("train.teacher_target_loss must be positive".into());
        }
        for &l in &self.lambdas {
            if !(l.is_finite() && l >= 0.0) {
                return err(format!("lambdas entries must be finite and non-negative, got {l}"));
            }
        }
        Ok(())
    }

    /// Full model config, id layout derived from the task.
    pub fn model_config(&self) -> ModelConfig {
        self.model.to_model_config(self.task.vocab())
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_value(value)
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file (or the all-defaults document when absent),
    /// applies dotted-path overrides, then validates strictly.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, HarnessError> {
        let mut value: serde_json::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?
            }
            None => serde_json::json!({}),
        };
        apply_overrides(&mut value, overrides)?;
        Self::from_value(value)
    }
}

/// Patches a JSON document in place. Each override is `path=value` with
/// a dotted path; the value is parsed as JSON when possible and treated
/// as a bare string otherwise. Missing intermediate objects are created;
/// wrong key names still fail schema validation afterwards.
pub fn apply_overrides(
    value: &mut serde_json::Value,
    overrides: &[String],
) -> Result<(), HarnessError> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| HarnessError::BadOverride(item.clone()))?;
        if path.is_empty() || path.split('.').any(|seg| seg.is_empty()) {
            return Err(HarnessError::BadOverride(item.clone()));
        }
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut node = &mut *value;
        let segments: Vec<&str> = path.split('.').collect();
        for seg in &segments[..segments.len() - 1] {
            if !node.is_object() {
                return Err(HarnessError::BadOverride(item.clone()));
            }
            node = node
                .as_object_mut()
                .expect("checked object")
                .entry(seg.to_string())
                .or_insert_with(|| serde_json::json!({}));
        }
        match node.as_object_mut() {
            Some(obj) => {
                obj.insert(segments.last().expect("non-empty").to_string(), parsed);
            }
            None => return Err(HarnessError::BadOverride(item.clone())),
        }
    }
    Ok(())
}
