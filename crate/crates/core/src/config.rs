//! JSON run configurations.
//!
//! ```json
//! {
//!   "seed": 0,
//!   "estimator": {
//!     "h": 3,
//!     "blocks": [{ "kind": "residual", "width": 8, "groups": [4, 4] }],
//!     "tasks": [{ "classes": 4 }]
//!   },
//!   "selector": { "hidden": 32 },
//!   "train": { "rho": 0.1 },
//!   "data": { "synthetic": { "seed": 0 } }
//! }
//! ```
//!
//! Omitted `train` keys take `TrainConfig::default()`; omitted
//! `data.synthetic` keys take `SyntheticSpec::default()`. [`load_config`]
//! resolves relative data paths against the directory holding the file.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Suite, SyntheticSpec};
use crate::error::{Error, Result};
use crate::estimator::{BlockConfig, EstimatorConfig, TaskConfig};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum BlockSpec {
    Residual { width: usize, groups: Vec<usize> },
    Plain { input: usize, output: usize, groups: Vec<usize> },
}

impl BlockSpec {
    fn build(&self) -> BlockConfig {
        match self {
            BlockSpec::Residual { width, groups } => BlockConfig::residual(*width, groups.clone()),
            BlockSpec::Plain { input, output, groups } => BlockConfig::plain(*input, *output, groups.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSpec {
    /// Levels per block; must agree with every block's group count.
    pub h: usize,
    pub blocks: Vec<BlockSpec>,
    pub tasks: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorSpec {
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitPaths<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPair {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    /// One file per split, each holding every task.
    Csv(SplitPaths<PathBuf>),
    /// One entry per task, in task order.
    Idx(Vec<SplitPaths<IdxPair>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub estimator: EstimatorSpec,
    pub selector: SelectorSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

/// Turns a serde failure into a parse error (bad JSON) or a validation
/// error naming the offending key.
fn classify(e: serde_path_to_error::Error<serde_json::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    if !inner.is_data() {
        return Error::Parse {
            line: inner.line(),
            message: inner.to_string(),
        };
    }
    let message = inner.to_string();
    let field = ["missing field `", "unknown field `"]
        .iter()
        .find_map(|p| message.strip_prefix(p))
        .and_then(|rest| rest.split('`').next());
    let key = match (path.as_str(), field) {
        (".", Some(f)) => f.to_string(),
        (p, Some(f)) if !p.ends_with(f) => format!("{p}.{f}"),
        (p, _) => p.to_string(),
    };
    Error::Validation { key, message }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(classify)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Overrides the run seed and, for synthetic data, the data seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DataSpec::Synthetic(spec) = &mut self.data {
            spec.seed = seed;
        }
        self
    }

    pub fn estimator_config(&self) -> Result<EstimatorConfig> {
        let blocks: Vec<BlockConfig> = self.estimator.blocks.iter().map(BlockSpec::build).collect();
        let width = blocks.first().map_or(0, |b| b.input_width);
        let tasks = self
            .estimator
            .tasks
            .iter()
            .map(|t| TaskConfig {
                input_width: width,
                classes: t.classes,
            })
            .collect();
        EstimatorConfig::new(blocks, tasks).map_err(|e| Error::validation("estimator", e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        self.estimator.tasks.iter().map(|t| t.classes).collect()
    }

    /// Cross-field checks, run before any data is touched.
    pub fn validate(&self) -> Result<()> {
        if self.estimator.blocks.is_empty() {
            return Err(Error::validation("estimator.blocks", "need at least one block"));
        }
        if self.estimator.tasks.is_empty() {
            return Err(Error::validation("estimator.tasks", "need at least one task"));
        }
        if self.estimator.h < 2 {
            return Err(Error::validation("estimator.h", "need at least 2 levels"));
        }
        for (i, b) in self.estimator.blocks.iter().enumerate() {
            let levels = b.build().levels();
            if levels != self.estimator.h {
                return Err(Error::validation(
                    format!("estimator.blocks[{i}]"),
                    format!("block has {levels} levels but estimator.h is {}", self.estimator.h),
                ));
            }
        }
        let cfg = self.estimator_config()?;
        if self.selector.hidden == 0 {
            return Err(Error::validation("selector.hidden", "must be positive"));
        }
        self.train.validate()?;
        match &self.data {
            DataSpec::Synthetic(spec) => {
                spec.validate()?;
                if spec.tasks != cfg.task_count() {
                    return Err(Error::validation(
                        "data.synthetic.tasks",
                        format!("{} tasks but the estimator has {} heads", spec.tasks, cfg.task_count()),
                    ));
                }
                if let Some(t) = self.estimator.tasks.iter().position(|t| t.classes != spec.classes) {
                    return Err(Error::validation(
                        "data.synthetic.classes",
                        format!("{} classes but estimator.tasks[{t}] has {}", spec.classes, self.estimator.tasks[t].classes),
                    ));
                }
                if spec.input_width != cfg.input_width() {
                    return Err(Error::validation(
                        "data.synthetic.input_width",
                        format!("{} features but the estimator takes {}", spec.input_width, cfg.input_width()),
                    ));
                }
            }
            DataSpec::Idx(tasks) if tasks.len() != cfg.task_count() => {
                return Err(Error::validation(
                    "data.idx",
                    format!("{} tasks but the estimator has {} heads", tasks.len(), cfg.task_count()),
                ));
            }
            _ => {}
        }
        Ok(())
    }

    /// Joins every relative data path onto `base`.
    pub fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSpec::Synthetic(_) => {}
            DataSpec::Csv(paths) => {
                for p in [&mut paths.train, &mut paths.val, &mut paths.test] {
                    join(p);
                }
            }
            DataSpec::Idx(tasks) => {
                for entry in tasks {
                    for pair in [&mut entry.train, &mut entry.val, &mut entry.test] {
                        join(&mut pair.images);
                        join(&mut pair.labels);
                    }
                }
            }
        }
    }

    /// Loads or generates every split and checks it against the estimator.
    pub fn load_suite(&self) -> Result<Suite> {
        let classes = self.classes();
        let suite = match &self.data {
            DataSpec::Synthetic(spec) => data::gen_synthetic_tasks(spec)?,
            DataSpec::Csv(paths) => {
                let read = |p: &Path| -> Result<Dataset> { data::read_csv(BufReader::new(File::open(p)?), &classes) };
                Suite {
                    train: read(&paths.train)?,
                    val: read(&paths.val)?,
                    test: read(&paths.test)?,
                    classes: classes.clone(),
                }
            }
            DataSpec::Idx(tasks) => {
                let mut splits: [Vec<_>; 3] = Default::default();
                for (t, entry) in tasks.iter().enumerate() {
                    for (slot, pair) in splits.iter_mut().zip([&entry.train, &entry.val, &entry.test]) {
                        let d = data::load_idx(&pair.images, &pair.labels, t, classes[t])?;
                        slot.extend(d.samples().iter().cloned());
                    }
                }
                let width = splits
                    .iter()
                    .flatten()
                    .next()
                    .map_or(0, |s| s.x.len());
                let [train, val, test] = splits;
                Suite {
                    train: Dataset::new(width, train, &classes)?,
                    val: Dataset::new(width, val, &classes)?,
                    test: Dataset::new(width, test, &classes)?,
                    classes: classes.clone(),
                }
            }
        };
        let width = self.estimator_config()?.input_width();
        if suite.width() != width {
            return Err(Error::validation(
                "data",
                format!("data has {} features but the estimator takes {width}", suite.width()),
            ));
        }
        Ok(suite)
    }
}

/// Reads and validates a config file; relative data paths are rebased onto
/// the file's directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_json(&std::fs::read_to_string(path)?)?;
    let dir = std::path::absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.rebase(&dir);
    Ok(cfg)
}
