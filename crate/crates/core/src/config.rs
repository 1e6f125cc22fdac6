//! Unified run configuration: one TOML file mirrors every tunable, and CLI
//! flags override file values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::AugmentPolicy;
use crate::network::ModelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Initial learning rate.
    pub lr: f64,
    /// Iterations at the initial rate before the single step decay.
    pub lr_decay_iters: u64,
    pub lr_decay_factor: f64,
    /// First-moment decay of the adaptive optimizer.
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: u64,
    /// Optional hard iteration cap (checkpoints mid-epoch when hit).
    pub max_iterations: Option<u64>,
    pub seed: u64,
    /// Emit one JSON log line every this many iterations.
    pub log_every: u64,
    /// Write a validation snapshot every this many iterations.
    pub snapshot_every: u64,
    /// Store a checkpoint every this many epochs.
    pub checkpoint_every_epochs: u64,
    /// Weight the loss by inverse class frequency.
    pub class_weighting: bool,
    /// Single-lane execution; batches are reduced in sample order either way,
    /// so results are bit-identical with this on or off.
    pub deterministic: bool,
    pub augment_enabled: bool,
    /// Stop once the epoch training accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            lr_decay_iters: 10_000,
            lr_decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            max_epochs: 30,
            max_iterations: None,
            seed: 42,
            log_every: 400,
            snapshot_every: 2000,
            checkpoint_every_epochs: 10,
            class_weighting: false,
            deterministic: true,
            augment_enabled: true,
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is allowed as a degenerate no-op schedule.
        if !(self.lr >= 0.0) {
            return Err(Error::validation("lr must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be >= 1"));
        }
        if self.log_every == 0 || self.snapshot_every == 0 || self.checkpoint_every_epochs == 0 {
            return Err(Error::validation("logging intervals must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::validation("momentum decays must lie in [0,1)"));
        }
        Ok(())
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration < self.lr_decay_iters {
            self.lr
        } else {
            self.lr * self.lr_decay_factor
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImagingConfig {
    /// ROI crops are resized to this side before CLAHE.
    pub roi_side: usize,
    pub clahe_clip: f64,
    pub clahe_grid: (usize, usize),
    /// Fallback centered-crop fraction when a record has no ROI box.
    pub fallback_crop_fraction: f64,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            roi_side: 800,
            clahe_clip: 2.0,
            clahe_grid: (8, 8),
            fallback_crop_fraction: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Train/val/test fractions.
    pub split: (f64, f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { split: (0.75, 0.10, 0.15) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Decision threshold on the class-1 probability.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

/// Everything a run needs, serializable as one TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub imaging: ImagingConfig,
    pub augment: AugmentPolicy,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: AppConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        if self.imaging.roi_side == 0 {
            return Err(Error::validation("roi_side must be >= 1"));
        }
        if !(0.0 < self.imaging.fallback_crop_fraction && self.imaging.fallback_crop_fraction <= 1.0) {
            return Err(Error::validation("fallback crop fraction must be in (0,1]"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_default(128)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        AppConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip() {
        let cfg = AppConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let text = "[train]\nbatch_size = 4\nseed = 7\n";
        let cfg: AppConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.imaging.roi_side, 800);
    }

    #[test]
    fn lr_schedule_steps_once() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.001);
        assert_eq!(cfg.lr_at(9_999), 0.001);
        assert!((cfg.lr_at(10_000) - 0.0001).abs() < 1e-12);
        assert!((cfg.lr_at(1_000_000) - 0.0001).abs() < 1e-12);
    }
}
