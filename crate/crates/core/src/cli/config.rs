use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::data::load_dataset_csv;
use crate::attribution::{Direction, PropagationMode, StageSpec};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec, PerformanceKind};
use crate::scenarios::gen_gaussian_classes;
use crate::training::{BatchPlan, HyperSchedule};

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// CSV with `x0, x1, …` feature columns and a `label` column or
    /// `y0, y1, …` target columns. Relative paths resolve against the
    /// config file's directory.
    Csv { path: PathBuf },
    /// Class-conditional Gaussians (see [`gen_gaussian_classes`]).
    Gaussian {
        n: usize,
        d: usize,
        classes: usize,
        separation: f64,
        seed: u64,
    },
}

impl DataSource {
    pub fn load(&self, base: &Path) -> Result<Dataset> {
        match self {
            DataSource::Csv { path } => load_dataset_csv(base.join(path)),
            DataSource::Gaussian {
                n,
                d,
                classes,
                separation,
                seed,
            } => Ok(Dataset::new(gen_gaussian_classes(*seed, *n, *d, *classes, *separation)?)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub gamma: f64,
    pub every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Multiply the learning rate by `gamma` every `every` steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<LrDecay>,
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<HyperSchedule> {
        match &self.lr_decay {
            None => HyperSchedule::constant(self.steps, self.lr, self.momentum, self.weight_decay),
            Some(d) => HyperSchedule::step_decay(self.steps, self.lr, d.gamma, d.every, self.momentum, self.weight_decay),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batching {
    pub batch_size: usize,
    /// Seeded permutations per epoch; sequential wrap-around otherwise.
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Shuffle seed; the run seed if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn yes() -> bool {
    true
}

/// A named stage given either as explicit steps or as a half-open range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedStage {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range: Option<[usize; 2]>,
}

impl NamedStage {
    pub fn spec(&self) -> Result<StageSpec> {
        match (&self.steps, self.range) {
            (Some(s), None) => StageSpec::new(s.clone()),
            (None, Some([a, b])) => StageSpec::range(a, b),
            _ => Err(Error::InvalidInput(format!("stage `{}` needs exactly one of `steps` or `range`", self.name))),
        }
    }
}

/// Everything a train/attribute/retrain run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub train_data: DataSource,
    /// Points whose performance is attributed; the training data if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_data: Option<DataSource>,
    pub schedule: ScheduleConfig,
    pub batching: Batching,
    /// Relative to the working directory.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: PropagationMode,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub perf: PerformanceKind,
    #[serde(default)]
    pub stages: Vec<NamedStage>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidInput(format!("run config: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn stage_specs(&self) -> Result<Vec<(String, StageSpec)>> {
        self.stages.iter().map(|s| Ok((s.name.clone(), s.spec()?))).collect()
    }

    pub fn plan(&self, n: usize) -> Result<BatchPlan> {
        let b = &self.batching;
        if b.shuffle {
            BatchPlan::shuffled(n, b.batch_size, self.schedule.steps, b.seed.unwrap_or(self.seed))
        } else {
            BatchPlan::sequential(n, b.batch_size, self.schedule.steps)
        }
    }
}

/// A parsed config together with the directory its relative paths refer to.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(LoadedConfig {
            config: RunConfig::from_json(&text)?,
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn train_data(&self) -> Result<Dataset> {
        self.config.train_data.load(&self.base)
    }

    pub fn test_data(&self) -> Result<Dataset> {
        match &self.config.test_data {
            Some(src) => src.load(&self.base),
            None => self.train_data(),
        }
    }
}
