use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapt::AdaptConfig;
use crate::data::{Condition, SHAPE_CLASSES};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SwapScope};
use crate::train::TrainSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskIdMode {
    Learned,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    SourceOnly,
    FineTuning,
    Joint,
}

impl Baseline {
    pub fn name(self) -> &'static str {
        match self {
            Baseline::SourceOnly => "source-only",
            Baseline::FineTuning => "fine-tuning",
            Baseline::Joint => "joint",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct DataConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Optional PNG root laid out as `<root>/<condition>/<train|test>/<class>/`.
    /// When absent the shape benchmark is generated.
    pub directory: Option<PathBuf>,
    pub class_names: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_per_class: 320,
            test_per_class: 80,
            directory: None,
            class_names: SHAPE_CLASSES.iter().map(|c| c.name().to_string()).collect(),
        }
    }
}

/// Corruption intensity per condition, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Intensities {
    pub rain: f64,
    pub fog: f64,
    pub snow: f64,
}

impl Default for Intensities {
    fn default() -> Self {
        Intensities {
            rain: 0.5,
            fog: 0.8,
            snow: 1.0,
        }
    }
}

impl Intensities {
    pub fn get(&self, c: Condition) -> f64 {
        match c {
            Condition::Clear => 0.0,
            Condition::Rain => self.rain,
            Condition::Fog => self.fog,
            Condition::Snow => self.snow,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct StreamConfig {
    /// Length of each homogeneous per-condition stream.
    pub homogeneous_frames: usize,
    /// Segment order of the transition stream.
    pub transitions: Vec<Condition>,
    pub transition_frames: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            homogeneous_frames: 500,
            transitions: vec![
                Condition::Clear,
                Condition::Rain,
                Condition::Fog,
                Condition::Snow,
                Condition::Clear,
            ],
            transition_frames: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage seed is derived from it by name.
    pub seed: u64,
    /// Learning order; must start with clear.
    pub tasks: Vec<Condition>,
    pub task_id: TaskIdMode,
    pub baselines: Vec<Baseline>,
    /// Epochs of joint training per step.
    pub joint_epochs: usize,
    /// Re-run the incremental sequence under every order of the non-clear
    /// tasks and compare per-task accuracies bitwise.
    pub check_permutations: bool,
    /// Also build an all-layers bank and compare it with after-cut
    /// swapping under oracle task ids.
    pub compare_scopes: bool,
    pub stats_batch_size: usize,
    /// Batch size for measuring alignment loss on test sets. Per-element
    /// variance estimates are noisy on small batches, which raises the
    /// loss floor on clear data.
    pub alignment_batch_size: usize,
    pub model: ModelConfig,
    pub pretrain: TrainSchedule,
    pub taskid: TrainSchedule,
    pub adapt: AdaptConfig,
    pub intensity: Intensities,
    pub data: DataConfig,
    pub stream: StreamConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            tasks: Condition::ALL.to_vec(),
            task_id: TaskIdMode::Learned,
            baselines: vec![Baseline::SourceOnly, Baseline::FineTuning, Baseline::Joint],
            joint_epochs: 4,
            check_permutations: true,
            compare_scopes: true,
            stats_batch_size: 64,
            alignment_batch_size: 160,
            model: ModelConfig::default(),
            pretrain: TrainSchedule {
                max_epochs: 30,
                ..Default::default()
            },
            taskid: TrainSchedule {
                max_epochs: 100,
                ..Default::default()
            },
            adapt: AdaptConfig::default(),
            intensity: Intensities::default(),
            data: DataConfig::default(),
            stream: StreamConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.first() != Some(&Condition::Clear) {
            return Err(Error::Config("task order must begin with clear".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].contains(t) {
                return Err(Error::Config(format!("task `{t}` listed twice")));
            }
        }
        self.model.validate()?;
        self.pretrain.validate()?;
        self.taskid.validate()?;
        if self.adapt.batch_size < 2 {
            return Err(Error::Config("adapt.batch-size must be at least 2".into()));
        }
        if self.adapt.scope == SwapScope::AllLayers && self.task_id == TaskIdMode::Learned {
            return Err(Error::Config(
                "all-layers swapping changes the task identifier's features; it needs task-id = \"oracle\"".into(),
            ));
        }
        for c in Condition::ALL {
            let k = self.intensity.get(c);
            if !(0.0..=1.0).contains(&k) {
                return Err(Error::Config(format!(
                    "intensity for {c} is {k}, outside [0, 1]"
                )));
            }
        }
        if self.data.class_names.len() != self.model.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.data.class_names.len(),
                self.model.num_classes
            )));
        }
        if self.data.directory.is_none() && self.model.input_size[1] != self.model.input_size[2] {
            return Err(Error::Config(
                "the shape generator renders square images".into(),
            ));
        }
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            return Err(Error::Config("data sizes must be positive".into()));
        }
        if self.stats_batch_size == 0
            || self.alignment_batch_size < 2
            || self.stream.homogeneous_frames == 0
            || self.stream.transition_frames == 0
        {
            return Err(Error::Config(
                "batch and stream sizes must be positive".into(),
            ));
        }
        if let Some(c) = self
            .stream
            .transitions
            .iter()
            .find(|c| !self.tasks.contains(c))
        {
            return Err(Error::Config(format!(
                "stream condition `{c}` is not a task"
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies
    /// `key.path=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Sets a dotted key in a TOML table. The value is parsed as a TOML
/// literal and falls back to a bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
