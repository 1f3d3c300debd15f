//! Run configuration: one JSON file describes an entire experiment, every
//! subcommand reads the sections it needs, and each command writes the fully
//! resolved configuration next to its outputs so runs can be reproduced from
//! that file alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use etta::adapt::TTAConfig;
use etta::data::{CorruptionKind, DataConfig, ALL_CORRUPTIONS};
use etta::vit::ViTConfig;
use etta::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Method label stamped into summaries and report rows.
    pub label: String,
    /// Master seed; `--seed` overrides it (and the TTA seed) everywhere.
    pub seed: u64,
    pub model: ViTConfig,
    pub data: DataConfig,
    pub tta: TTAConfig,
    pub gen: GenSection,
    pub train: TrainSection,
    pub stats: StatsSection,
    pub adapt: AdaptSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            label: "navia".into(),
            seed: 7,
            model: ViTConfig::default(),
            data: DataConfig::default(),
            tta: TTAConfig::default(),
            gen: GenSection::default(),
            train: TrainSection::default(),
            stats: StatsSection::default(),
            adapt: AdaptSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenSection {
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Per-class preview PPMs written next to the dataset.
    pub previews: bool,
}

impl Default for GenSection {
    fn default() -> Self {
        GenSection {
            train_per_class: 300,
            test_per_class: 210,
            previews: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Epoch cap; training fails loudly if the target is not hit by then.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Running train accuracy that counts as converged.
    pub target_train_accuracy: f32,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            max_epochs: 40,
            batch_size: 128,
            lr: 1e-3,
            target_train_accuracy: 0.95,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsSection {
    /// Source images (taken from the head of the train set) used to
    /// estimate per-layer feature statistics.
    pub sample_images: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection { sample_images: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptSection {
    pub corruptions: Vec<CorruptionKind>,
    pub severity: u8,
    /// Stream length per corruption, drawn from the head of the test set.
    pub images: usize,
    /// Reset the adaptation state between corruption datasets (adaptation
    /// stays continual within each stream).
    pub reset_between: bool,
}

impl Default for AdaptSection {
    fn default() -> Self {
        AdaptSection {
            corruptions: ALL_CORRUPTIONS.to_vec(),
            severity: 5,
            images: 2048,
            reset_between: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub dataset_train: PathBuf,
    pub dataset_test: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub stats: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            dataset_train: "runs/data/train.etta".into(),
            dataset_test: "runs/data/test.etta".into(),
            checkpoint: "runs/model/checkpoint.etta".into(),
            train_log: "runs/model/pretrain_log.jsonl".into(),
            stats: "runs/model/source_stats.etta".into(),
            out_dir: "runs/out".into(),
        }
    }
}

impl RunConfig {
    /// Loads the config (or the built-in default when no file is given) and
    /// applies the command-line overrides.
    pub fn load(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
        let mut config: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            config.seed = s;
            config.tta.seed = s;
        }
        if let Some(o) = out {
            config.paths.out_dir = o.to_path_buf();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.tta.validate(self.model.num_layers)?;
        if self.model.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "model expects {}px images but the dataset is {}px",
                self.model.image_size, self.data.image_size
            )));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes but the dataset has {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        if !(1..=5).contains(&self.adapt.severity) {
            return Err(Error::Config(format!(
                "severity must be 1..=5, got {}",
                self.adapt.severity
            )));
        }
        if self.adapt.corruptions.is_empty() {
            return Err(Error::Config("adapt.corruptions is empty".into()));
        }
        if self.gen.train_per_class == 0 || self.gen.test_per_class == 0 {
            return Err(Error::Config("per-class sample counts must be positive".into()));
        }
        if self.train.batch_size == 0 || self.train.max_epochs == 0 {
            return Err(Error::Config("train.batch_size and train.max_epochs must be positive".into()));
        }
        if !(self.train.lr > 0.0) || !self.train.lr.is_finite() {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        if !(0.0..=1.0).contains(&self.train.target_train_accuracy) {
            return Err(Error::Config("train.target_train_accuracy must lie in [0, 1]".into()));
        }
        if self.stats.sample_images < 2 {
            return Err(Error::Config("stats.sample_images must be at least 2".into()));
        }
        if self.adapt.images == 0 {
            return Err(Error::Config("adapt.images must be positive".into()));
        }
        Ok(())
    }

    /// Writes the fully resolved config as `<dir>/<command>.config.json`.
    pub fn write_resolved(&self, dir: &Path, command: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{command}.config.json"));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}

/// Stable per-purpose seed derivation from the master seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    // splitmix64 over the combined value.
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
