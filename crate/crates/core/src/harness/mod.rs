//! Experiment entry points: configuration, training, evaluation, FLOPs
//! profiling and routing statistics.

mod eval;
mod optim;
mod profile;
mod stats;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dpe::PyramidConfig;
use crate::error::{Error, Result};
use crate::synth::TaskConfig;
use crate::transformer::ModelDims;

pub use eval::{evaluate, evaluate_checkpoint, AccuracyReport, EvalReport, FlopsSummary};
pub use optim::RmsProp;
pub use profile::{profile, sweep, ProfileRow};
pub use stats::{read_traces, write_traces, RoutingStats, TagRouting, TraceRecord};
pub use train::{parse_metrics, train, train_model, MetricRecord, RunFiles, TrainOutcome};

/// Momentum-free adaptive optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Always `"rmsprop"`; recorded so runs stay self-describing.
    #[serde(default = "default_kind")]
    pub kind: String,
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip: Option<f64>,
    /// Cosine decay of `lr` to zero over `steps`.
    #[serde(default)]
    pub cosine: bool,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

fn default_kind() -> String {
    "rmsprop".into()
}
fn default_decay() -> f64 {
    0.99
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind != "rmsprop" {
            return Err(Error::Config(format!("unknown optimizer `{}`", self.kind)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.decay) || !(self.eps > 0.0) {
            return Err(Error::Config("decay must lie in [0, 1) and eps be positive".into()));
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Held-out evaluation during and after training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Steps between evaluations; 0 evaluates only at the end.
    #[serde(default)]
    pub every: usize,
    pub samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dims: ModelDims,
    pub pyramid: PyramidConfig,
    pub optimizer: OptimizerConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.pyramid.validate(self.dims.n_layers)?;
        self.optimizer.validate()?;
        self.task.validate()?;
        let (h, w) = self.task.grid;
        if h > self.dims.max_grid.0 || w > self.dims.max_grid.1 {
            return Err(Error::Config(format!("task grid {h}x{w} exceeds model max grid {:?}", self.dims.max_grid)));
        }
        if self.task.vocab() > self.dims.vocab {
            return Err(Error::Config(format!("task vocabulary {} exceeds model vocab {}", self.task.vocab(), self.dims.vocab)));
        }
        if self.task.n_codes > self.dims.patch_codes {
            return Err(Error::Config(format!("{} cell codes exceed {} patch codes", self.task.n_codes, self.dims.patch_codes)));
        }
        if self.task.max_tail() > self.dims.max_tail {
            return Err(Error::Config(format!("task needs {} tail positions, model has {}", self.task.max_tail(), self.dims.max_tail)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The small setup used by the examples and the toy acceptance run:
    /// 4 layers, width 64, one DPE layer over the default experts.
    pub fn toy() -> Self {
        let task = TaskConfig::default();
        Self {
            dims: ModelDims {
                n_layers: 4,
                d: 64,
                n_heads: 4,
                m: 128,
                vocab: task.vocab(),
                max_grid: task.grid,
                max_tail: task.max_tail(),
                patch_codes: task.n_codes,
            },
            pyramid: PyramidConfig::new(vec![1]),
            optimizer: OptimizerConfig {
                kind: default_kind(),
                lr: 3e-3,
                decay: default_decay(),
                eps: default_eps(),
                clip: Some(1.0),
                cosine: true,
                steps: 2000,
                batch: 8,
                seed: 0,
            },
            task,
            eval: EvalConfig { every: 500, samples: 400, seed: 0xE7A1 },
            output_dir: default_output(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_config_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::toy();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn inconsistent_configs_are_rejected() {
        let mut cfg = ExperimentConfig::toy();
        cfg.task.grid = (9, 8);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::toy();
        cfg.optimizer.kind = "adam".into();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::toy();
        cfg.pyramid.dpe_layers = vec![4];
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::from_json("{\"dims\": 1}").is_err());
    }
}
