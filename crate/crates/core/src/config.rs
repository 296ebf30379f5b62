//! Experiment configuration: one JSON document holding every tunable of
//! the pipeline, with desk and paper presets and cross-module
//! consistency checks at load time.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::AnchorConfig;
use crate::eval::PostprocConfig;
use crate::loss::{AdamConfig, LossWeights};
use crate::net::NetworkConfig;
use crate::voxel::VoxelConfig;

/// Environment variable overriding `data.cache_dir`.
pub const CACHE_DIR_ENV: &str = "PILLARFPN_CACHE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    /// Hard cap on optimizer steps; None runs all epochs.
    pub max_steps: Option<usize>,
    pub checkpoint_every_epochs: usize,
    /// After this many epochs the batch-norm layers stop tracking batch
    /// statistics and normalize with the accumulated running averages, so
    /// the weights adapt to exactly the statistics inference will use.
    /// None keeps batch statistics for the whole run.
    pub bn_freeze_after_epochs: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 160,
            batch_size: 2,
            max_steps: None,
            checkpoint_every_epochs: 10,
            bn_freeze_after_epochs: Some(40),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub global: bool,
    pub gt_sampling: bool,
    /// Maximum database entries pasted per frame.
    pub max_new: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { global: true, gt_sampling: true, max_new: 12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum DataSource {
    /// Seeded generated scenes; frame i uses seed base_seed + i.
    Synthetic { n_frames: usize, n_cars: usize, base_seed: u64 },
    /// KITTI directory layout: velodyne/, label_2/, calib/ plus split files.
    Kitti { root: PathBuf, train_split: PathBuf, val_split: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    pub cache_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic { n_frames: 8, n_cars: 4, base_seed: 0 },
            cache_dir: PathBuf::from("cache"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub forty_point: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_threshold: 0.5, forty_point: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub voxel: VoxelConfig,
    pub network: NetworkConfig,
    pub loss: LossWeights,
    pub anchor: AnchorConfig,
    pub postproc: PostprocConfig,
    pub optimizer: AdamConfig,
    pub schedule: TrainSchedule,
    pub augment: AugmentConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Small-range CPU-budget preset: 19.2 x 19.2 m, S = 0.32 m.
    pub fn desk() -> Self {
        ExperimentConfig {
            seed: 0,
            voxel: VoxelConfig::desk(),
            network: NetworkConfig::default(),
            loss: LossWeights::default(),
            anchor: AnchorConfig::default(),
            postproc: PostprocConfig::default(),
            optimizer: AdamConfig { lr0: 1e-3, ..AdamConfig::default() },
            schedule: TrainSchedule { epochs: 400, ..TrainSchedule::default() },
            augment: AugmentConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Reference preset: 69.12 x 79.36 m range, S = 0.16 m, the published
    /// schedule (160 epochs, lr 2e-4).
    pub fn paper() -> Self {
        ExperimentConfig {
            seed: 0,
            voxel: VoxelConfig::paper(),
            network: NetworkConfig::default(),
            loss: LossWeights::default(),
            anchor: AnchorConfig { pos_iou: 0.6, neg_iou: 0.45, ..AnchorConfig::default() },
            postproc: PostprocConfig::default(),
            optimizer: AdamConfig::default(),
            schedule: TrainSchedule::default(),
            augment: AugmentConfig::default(),
            data: DataConfig {
                source: DataSource::Kitti {
                    root: PathBuf::from("kitti"),
                    train_split: PathBuf::from("kitti/train.txt"),
                    val_split: PathBuf::from("kitti/val.txt"),
                },
                cache_dir: PathBuf::from("cache"),
            },
            eval: EvalConfig { iou_threshold: 0.7, forty_point: false },
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(ConfigError::Invalid(format!("unknown preset '{other}' (desk|paper)"))),
        }
    }

    /// Cross-module consistency checks; run after every load.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.voxel
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("voxel: {e}")))?;
        self.network
            .validate(&self.voxel)
            .map_err(|e| ConfigError::Invalid(format!("network: {e}")))?;
        crate::net::audit_shapes(&self.network, &self.voxel)
            .map_err(|e| ConfigError::Invalid(format!("shape audit: {e}")))?;
        if self.anchor.neg_iou > self.anchor.pos_iou {
            return Err(ConfigError::Invalid(format!(
                "anchor: neg_iou {} exceeds pos_iou {}",
                self.anchor.neg_iou, self.anchor.pos_iou
            )));
        }
        if self.schedule.batch_size == 0 {
            return Err(ConfigError::Invalid("schedule: batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.postproc.score_threshold) {
            return Err(ConfigError::Invalid("postproc: score_threshold must be in [0,1]".into()));
        }
        Ok(())
    }

    /// Load from JSON; missing fields take their defaults. The cache
    /// directory env var, when set, wins over the file value.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        if let Ok(dir) = std::env::var(CACHE_DIR_ENV) {
            cfg.data.cache_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
    }

    /// Cache directory after applying the env override.
    pub fn cache_dir(&self) -> PathBuf {
        match std::env::var(CACHE_DIR_ENV) {
            Ok(dir) => PathBuf::from(dir),
            Err(_) => self.data.cache_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::desk().validate().unwrap();
        ExperimentConfig::paper().validate().unwrap();
    }

    #[test]
    fn json_round_trip() {
        let cfg = ExperimentConfig::desk();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.json");
        cfg.save(&path).unwrap();
        let back = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("partial.json");
        std::fs::write(&path, r#"{"seed": 7, "schedule": {"epochs": 3}}"#).unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.schedule.epochs, 3);
        assert_eq!(cfg.schedule.batch_size, 2);
        assert_eq!(cfg.voxel, VoxelConfig::desk());
    }

    #[test]
    fn non_integral_grid_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.voxel.base_size = 0.33;
        let err = cfg.validate().unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("voxel"), "unhelpful message: {msg}");
    }

    #[test]
    fn scale_mismatch_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.voxel.scales = vec![1];
        cfg.voxel.max_points = vec![100];
        cfg.voxel.max_voxels = vec![12000];
        // network wants 2 scales but only 1 is voxelized
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_preset_errors() {
        assert!(ExperimentConfig::preset("garage").is_err());
    }
}
