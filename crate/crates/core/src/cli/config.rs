use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticTaskConfig;
use crate::error::{Error, Result};
use crate::eval::SweepOptions;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

/// Size and seed of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub count: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { seed: 0, count: 1000 }
    }
}

/// Top-level run description shared by every subcommand.
///
/// Only `model` is required. When `train.pause_layers` is omitted the default
/// layer set is cut down to the layers the model actually has.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub task: SyntheticTaskConfig,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub eval: SweepOptions,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        let explicit_layers = value
            .get("train")
            .and_then(|t| t.get("pause_layers"))
            .is_some();
        let mut config: Self =
            serde_json::from_value(value).map_err(|e| Error::config(format!("run config: {e}")))?;
        if !explicit_layers {
            config.train = config.train.clamp_layers(config.model.num_layers);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        self.task.validate()?;
        self.train.validate(m.num_layers)?;
        if (self.task.height, self.task.width, self.task.num_classes) != (m.image_height, m.image_width, m.num_classes) {
            return Err(Error::config(format!(
                "task is {}x{} with {} classes but the model expects {}x{} with {}",
                self.task.height, self.task.width, self.task.num_classes, m.image_height, m.image_width, m.num_classes
            )));
        }
        let e = &self.eval;
        if e.eval.batch_size == 0 || e.bench_batch == 0 {
            return Err(Error::config("eval batch sizes must be positive"));
        }
        if e.iters < 3 {
            return Err(Error::config("eval.iters must be at least 3"));
        }
        Ok(())
    }
}
