//! Run configuration files.
//!
//! A run is described by one TOML document with `[model]`, `[train]`,
//! `[data]` and `[output]` sections. `[model]` may name a preset
//! (`preset = "speech_fw2_multiscale"`) instead of spelling out the layers;
//! presets are expanded on load so the canonical text is always explicit.

use std::path::{Path, PathBuf};

use mstcn::data::{generate_synthetic, ChannelKind, SequenceDataset, Split, SyntheticSpec};
use mstcn::model::{presets, KlGrouping, ModelConfig, Objective, StepConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_eval_batch_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lambda0: f64,
    pub halving_period: f64,
    pub epochs: u64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub kl_grouping: KlGrouping,
    #[serde(default = "default_eval_batch_size")]
    pub eval_batch_size: usize,
}

impl TrainConfig {
    pub fn step(&self) -> StepConfig {
        StepConfig {
            lr0: self.lr0,
            lambda0: self.lambda0,
            halving_period: self.halving_period,
            objective: self.objective,
            grouping: self.kl_grouping,
        }
    }
}

/// Where the sequences come from: files, or the synthetic generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    /// Width of the uniform noise added to real channels during training.
    #[serde(default)]
    pub noise_width: f64,
    pub synthetic_train: Option<SyntheticSpec>,
    pub synthetic_valid: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint_dir: PathBuf,
    /// Defaults to `metrics.csv` inside the checkpoint directory.
    pub metrics: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        expand_preset(&mut doc)?;
        let config: RunConfig = doc.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text: explicit model, fixed key order.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return Err(CliError::Config("batch sizes must be positive".into()));
        }
        if !(t.lr0 > 0.0) || !(t.lambda0 >= 0.0) || !(t.halving_period > 0.0) {
            return Err(CliError::Config("lr0 and halving_period must be positive, lambda0 non-negative".into()));
        }
        if !(self.data.noise_width >= 0.0) {
            return Err(CliError::Config("noise_width must be non-negative".into()));
        }
        Ok(())
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output.metrics.clone().unwrap_or_else(|| self.output.checkpoint_dir.join("metrics.csv"))
    }

    /// Loads or generates one split and checks it against the model.
    pub fn dataset(&self, split: Split) -> Result<SequenceDataset, CliError> {
        let (path, synthetic) = match split {
            Split::Train => (&self.data.train, &self.data.synthetic_train),
            Split::Valid | Split::Test => (&self.data.valid, &self.data.synthetic_valid),
        };
        let data = match (path, synthetic) {
            (Some(p), _) => SequenceDataset::load(p, split).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?,
            (None, Some(spec)) => generate_synthetic(spec, split)?,
            (None, None) => return Err(CliError::Config(format!("no {split:?} data configured"))),
        };
        check_dataset(&self.model, &data)?;
        Ok(data)
    }
}

/// Channel count and value kinds must suit the model.
pub fn check_dataset(model: &ModelConfig, data: &SequenceDataset) -> Result<(), CliError> {
    if data.channels() != model.channels {
        return Err(CliError::Data(format!(
            "data has {} channels, model expects {}",
            data.channels(),
            model.channels
        )));
    }
    if data.is_empty() {
        return Err(CliError::Data("dataset is empty".into()));
    }
    if model.head.is_binary() && data.kinds.iter().any(|&k| k != ChannelKind::Binary) {
        return Err(CliError::Data("a Bernoulli head needs binary channels".into()));
    }
    Ok(())
}

fn expand_preset(doc: &mut toml::Table) -> Result<(), CliError> {
    let Some(toml::Value::Table(model)) = doc.get("model") else {
        return Ok(());
    };
    let Some(name) = model.get("preset") else {
        return Ok(());
    };
    if model.len() != 1 {
        return Err(CliError::Config("a model preset cannot be combined with other model keys".into()));
    }
    let name = name.as_str().ok_or_else(|| CliError::Config("model.preset must be a string".into()))?;
    let config = presets::by_name(name)
        .ok_or_else(|| CliError::Config(format!("unknown preset {name:?}; known: {}", presets::NAMES.join(", "))))?;
    let value = toml::Value::try_from(config).map_err(|e| CliError::Config(e.to_string()))?;
    doc.insert("model".into(), value);
    Ok(())
}

/// Resolves a bare preset name or a run config path to a model.
pub fn model_from_arg(arg: &str) -> Result<ModelConfig, CliError> {
    if let Some(m) = presets::by_name(arg) {
        return Ok(m);
    }
    Ok(RunConfig::load(Path::new(arg))?.model)
}
