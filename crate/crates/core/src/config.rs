//! Experiment configuration: TOML schema, validation, hashing, and dotted-key overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::ContrastiveConfig;
use crate::encoder::{EncoderConfig, HeadConfig};
use crate::error::{Error, Result};
use crate::objective::{ObjectiveConfig, ScheduleConfig};
use crate::seeding;
use crate::transforms::{TransformConfigs, TransformKind, TransformSet};
use crate::videodata::{load_manifest, ClipSampleConfig, Dataset, SyntheticDatasetConfig};

/// Which losses a pretraining run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Contrastive learning between two untransformed clips.
    Baseline,
    /// Transformed views enter the contrastive loss; task heads are detached.
    AugOnly,
    /// Contrastive loss plus λ-weighted task losses.
    Taco,
    /// Task losses alone.
    TaskOnly,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::AugOnly => "aug_only",
            TrainMode::Taco => "taco",
            TrainMode::TaskOnly => "task_only",
        }
    }

    pub fn uses_contrastive(self) -> bool {
        self != TrainMode::TaskOnly
    }

    pub fn has_task_heads(self) -> bool {
        self != TrainMode::Baseline
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSource {
    Synthetic(SyntheticDatasetConfig),
    /// JSONL manifest as written by `write_manifest`.
    Manifest { path: PathBuf },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Synthetic(cfg) => cfg.generate(),
            DatasetSource::Manifest { path } => load_manifest(path),
        }
    }

    /// A disjoint labeled split of `num_videos` for downstream evaluation. Only
    /// synthetic sources can derive one; manifests need an explicit test manifest.
    pub fn held_out(&self, num_videos: usize) -> Result<DatasetSource> {
        match self {
            DatasetSource::Synthetic(cfg) => Ok(DatasetSource::Synthetic(SyntheticDatasetConfig {
                num_videos,
                seed: seeding::child_seed(cfg.seed, "held-out", 0),
                ..cfg.clone()
            })),
            DatasetSource::Manifest { path } => Err(Error::config(format!(
                "no held-out split can be derived from manifest {}; supply a test manifest",
                path.display()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: TrainMode,
    /// Enabled temporal transformations; empty for the baseline.
    #[serde(default)]
    pub transforms: Vec<TransformKind>,
    pub dataset: DatasetSource,
    pub clip: ClipSampleConfig,
    #[serde(default)]
    pub transform: TransformConfigs,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    /// Clips drawn per video per epoch.
    #[serde(default = "one")]
    pub clips_per_video: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn one() -> usize {
    1
}

impl Default for ExperimentConfig {
    /// Desk-scale TaCo run on the synthetic motion benchmark.
    fn default() -> Self {
        Self {
            seed: 0,
            mode: TrainMode::Taco,
            transforms: TransformKind::CORE.to_vec(),
            dataset: DatasetSource::Synthetic(SyntheticDatasetConfig::default()),
            clip: ClipSampleConfig {
                num_frames: 8,
                stride: 4,
                start: Default::default(),
            },
            transform: TransformConfigs::default(),
            encoder: EncoderConfig::tiny(),
            heads: HeadConfig::default(),
            contrastive: ContrastiveConfig::default(),
            objective: ObjectiveConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 32,
            clips_per_video: 1,
            checkpoint_every: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.clip.validate()?;
        self.transform.validate()?;
        self.encoder.validate()?;
        self.contrastive.validate()?;
        self.objective.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if self.clips_per_video == 0 {
            return Err(Error::config("clips_per_video must be ≥ 1"));
        }
        if self.heads.embed_dim == 0 || self.heads.task_hidden == 0 {
            return Err(Error::config("head dimensions must be ≥ 1"));
        }
        match (self.mode, self.transforms.is_empty()) {
            (TrainMode::Baseline, false) => {
                return Err(Error::config("baseline mode takes no transforms"));
            }
            (m, true) if m != TrainMode::Baseline => {
                return Err(Error::config(format!("{} mode needs at least one transform", m.name())));
            }
            _ => {}
        }
        if !self.transforms.is_empty() {
            TransformSet::new(self.transforms.clone())?;
        }
        Ok(())
    }

    pub fn transform_set(&self) -> Option<TransformSet> {
        TransformSet::new(self.transforms.clone()).ok()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// SHA-256 over the canonical TOML serialization, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    /// Short label such as `taco:speed` or `baseline`.
    pub fn label(&self) -> String {
        if self.transforms.is_empty() {
            self.mode.name().to_string()
        } else {
            let names: Vec<_> = self.transforms.iter().map(|k| k.name()).collect();
            format!("{}:{}", self.mode.name(), names.join("+"))
        }
    }
}

/// Sets a dotted `key` in a TOML tree. `value` is parsed as a TOML literal and
/// falls back to a plain string.
pub fn apply_override(root: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override key `{key}`")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override `{key}`: `{part}` is not inside a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::config(format!("override `{key}`: parent is not a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parses `text`, applies `key=value` overrides, and validates the result.
pub fn load_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut tree: toml::Value = toml::from_str(text)?;
    for (k, v) in overrides {
        apply_override(&mut tree, k, v)?;
    }
    let cfg: ExperimentConfig = tree.try_into()?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn unknown_key_names_the_field() {
        let text = ExperimentConfig::default().to_toml().unwrap().replace("batch_size", "batch_sise");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("batch_sise"), "{err}");
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let base = ExperimentConfig::default();
        let text = base.to_toml().unwrap();
        let cfg = load_with_overrides(
            &text,
            &[
                ("objective.lambda".into(), "0".into()),
                ("mode".into(), "aug_only".into()),
                ("schedule.total_epochs".into(), "6".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.objective.lambda, 0.0);
        assert_eq!(cfg.mode, TrainMode::AugOnly);
        assert_eq!(cfg.schedule.total_epochs, 6);
        assert_ne!(cfg.hash().unwrap(), base.hash().unwrap());
        assert!(load_with_overrides(&text, &[("objective.lambda".into(), "-1".into())]).is_err());
        assert!(load_with_overrides(&text, &[("objective..x".into(), "1".into())]).is_err());
    }

    #[test]
    fn held_out_split_is_disjoint() {
        let src = ExperimentConfig::default().dataset;
        let DatasetSource::Synthetic(train) = &src else { unreachable!() };
        let DatasetSource::Synthetic(test) = src.held_out(5).unwrap() else { unreachable!() };
        assert_eq!(test.num_videos, 5);
        assert_ne!(test.seed, train.seed);
        let a = train.specs();
        assert!(test.specs().iter().all(|s| a.iter().all(|t| t.seed != s.seed)));
        let manifest = DatasetSource::Manifest { path: "m.jsonl".into() };
        assert!(manifest.held_out(5).is_err());
    }

    #[test]
    fn mode_and_transforms_must_agree() {
        let mut cfg = ExperimentConfig::default();
        cfg.mode = TrainMode::Baseline;
        assert!(cfg.validate().is_err());
        cfg.transforms.clear();
        cfg.validate().unwrap();
        assert_eq!(cfg.label(), "baseline");
        cfg.mode = TrainMode::Taco;
        assert!(cfg.validate().is_err());
        cfg.transforms = vec![TransformKind::Speed, TransformKind::Speed];
        assert!(cfg.validate().is_err());
    }
}
