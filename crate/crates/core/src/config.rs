//! Experiment configuration.
//!
//! A configuration is resolved in three layers: task-dependent defaults, an
//! optional TOML file, then command-line overrides. The resolved value is
//! echoed back as TOML and parses to the identical configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cells::ModelKind;
use crate::error::{Error, Result};
use crate::tasks::Task;
use crate::tensor::Activation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "rmsprop" => Ok(Self::Rmsprop),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
            Self::Rmsprop => "rmsprop",
        })
    }
}

/// Fully resolved settings of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub task: Task,
    pub seq_len: usize,
    pub hidden: usize,
    pub batch: usize,
    pub nu: usize,
    pub rho: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub nonlinearity: Activation,
    pub seed: u64,
    pub max_updates: usize,
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Stop once evaluation accuracy reaches this value; `0` disables.
    pub early_stop_accuracy: f64,
    pub out: String,
}

impl ExperimentConfig {
    /// Defaults for a task: Adam with tanh for Copy, RMSprop with modReLU
    /// for Denoise.
    pub fn for_task(task: Task) -> Self {
        let (optimizer, nonlinearity) = match task {
            Task::Copy => (OptimizerKind::Adam, Activation::Tanh),
            Task::Denoise => (OptimizerKind::Rmsprop, Activation::Modrelu),
        };
        Self {
            model: ModelKind::RelRnn,
            task,
            seq_len: 100,
            hidden: 128,
            batch: 64,
            nu: 10,
            rho: 10,
            optimizer,
            lr: 2e-4,
            nonlinearity,
            seed: 0,
            max_updates: 20_000,
            eval_every: 500,
            eval_batches: 20,
            clip_norm: 0.0,
            early_stop_accuracy: 0.0,
            out: "runs/latest".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(m));
        if self.model.is_screened() && self.nu < 1 {
            return bad(format!("model {} needs nu >= 1", self.model));
        }
        if self.seq_len < self.task.min_len() {
            return bad(format!(
                "task {} needs seq_len >= {}, got {}",
                self.task,
                self.task.min_len(),
                self.seq_len
            ));
        }
        if self.hidden == 0 || self.batch == 0 {
            return bad("hidden and batch must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate must be finite and nonnegative, got {}", self.lr));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm >= 0.0) {
            return bad(format!("clip_norm must be nonnegative, got {}", self.clip_norm));
        }
        if self.eval_batches == 0 {
            return bad("eval_batches must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }
}

/// Optional settings as read from a file or from flags.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialConfig {
    pub model: Option<ModelKind>,
    pub task: Option<Task>,
    pub seq_len: Option<usize>,
    pub hidden: Option<usize>,
    pub batch: Option<usize>,
    pub nu: Option<i64>,
    pub rho: Option<i64>,
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub nonlinearity: Option<Activation>,
    pub seed: Option<u64>,
    pub max_updates: Option<usize>,
    pub eval_every: Option<usize>,
    pub eval_batches: Option<usize>,
    pub clip_norm: Option<f64>,
    pub early_stop_accuracy: Option<f64>,
    pub out: Option<String>,
}

impl PartialConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    /// Fields set in `other` win.
    pub fn overlay(self, other: PartialConfig) -> PartialConfig {
        macro_rules! pick {
            ($($f:ident),*) => { PartialConfig { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            model, task, seq_len, hidden, batch, nu, rho, optimizer, lr, nonlinearity, seed,
            max_updates, eval_every, eval_batches, clip_norm, early_stop_accuracy, out
        )
    }

    pub fn resolve(self) -> Result<ExperimentConfig> {
        let task = self.task.unwrap_or(Task::Copy);
        let mut c = ExperimentConfig::for_task(task);
        let size = |name: &str, v: i64| -> Result<usize> {
            usize::try_from(v).map_err(|_| Error::Usage(format!("{name} must be nonnegative, got {v}")))
        };
        if let Some(v) = self.model {
            c.model = v;
        }
        if let Some(v) = self.seq_len {
            c.seq_len = v;
        }
        if let Some(v) = self.hidden {
            c.hidden = v;
        }
        if let Some(v) = self.batch {
            c.batch = v;
        }
        if let Some(v) = self.nu {
            c.nu = size("nu", v)?;
        }
        if let Some(v) = self.rho {
            c.rho = size("rho", v)?;
        }
        if let Some(v) = self.optimizer {
            c.optimizer = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.nonlinearity {
            c.nonlinearity = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.max_updates {
            c.max_updates = v;
        }
        if let Some(v) = self.eval_every {
            c.eval_every = v;
        }
        if let Some(v) = self.eval_batches {
            c.eval_batches = v;
        }
        if let Some(v) = self.clip_norm {
            c.clip_norm = v;
        }
        if let Some(v) = self.early_stop_accuracy {
            c.early_stop_accuracy = v;
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        c.validate()?;
        Ok(c)
    }
}
