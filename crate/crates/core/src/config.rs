//! Training configuration and its validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::ClipDims;
use crate::error::{Error, Result};

/// All hyperparameters for both training phases.
///
/// Serialized as a flat TOML table; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_classes: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub patch_t: usize,
    pub patch_hw: usize,
    pub d_proj: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the contrastive term in phase 1.
    pub lambda1: f64,
    /// Weight of the cross-correlation term in phase 2.
    pub alpha: f64,
    /// Off-diagonal weight inside the cross-correlation loss.
    pub lambda_offdiag: f64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub weight_decay: f64,
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_phase1: usize,
    pub batch_phase2: usize,
    /// Fraction of encoder blocks frozen during phase 2 (rounded down).
    pub freeze_fraction: f64,
    pub queue_capacity: usize,
    pub pairs_per_target: usize,
    pub pseudo_conf_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            frames: 8,
            height: 32,
            width: 32,
            channels: 3,
            d_model: 64,
            n_blocks: 4,
            n_heads: 4,
            patch_t: 2,
            patch_hw: 8,
            d_proj: 32,
            tau: 0.1,
            lambda1: 0.1,
            alpha: 0.1,
            lambda_offdiag: 5e-3,
            lr_phase1: 1e-3,
            lr_phase2: 5e-3,
            weight_decay: 1e-9,
            epochs_phase1: 20,
            epochs_phase2: 20,
            batch_phase1: 8,
            batch_phase2: 64,
            freeze_fraction: 0.5,
            queue_capacity: 256,
            pairs_per_target: 4,
            pseudo_conf_threshold: 0.8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn clip_dims(&self) -> ClipDims {
        ClipDims::new(self.frames, self.height, self.width, self.channels)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    /// Validated copy, or every violation at once.
    pub fn validated(self) -> Result<Self> {
        let violations = validate_config(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::InvalidConfig(violations))
        }
    }
}

/// Lists every violated invariant of `cfg`; empty means valid.
pub fn validate_config(cfg: &TrainConfig) -> Vec<String> {
    let mut out = Vec::new();
    let positive_ints = [
        ("num_classes", cfg.num_classes),
        ("frames", cfg.frames),
        ("height", cfg.height),
        ("width", cfg.width),
        ("channels", cfg.channels),
        ("d_model", cfg.d_model),
        ("n_blocks", cfg.n_blocks),
        ("n_heads", cfg.n_heads),
        ("patch_t", cfg.patch_t),
        ("patch_hw", cfg.patch_hw),
        ("d_proj", cfg.d_proj),
        ("epochs_phase1", cfg.epochs_phase1),
        ("epochs_phase2", cfg.epochs_phase2),
        ("batch_phase1", cfg.batch_phase1),
        ("batch_phase2", cfg.batch_phase2),
        ("queue_capacity", cfg.queue_capacity),
        ("pairs_per_target", cfg.pairs_per_target),
    ];
    for (name, value) in positive_ints {
        if value == 0 {
            out.push(format!("{name} must be > 0"));
        }
    }
    if cfg.num_classes == 1 {
        out.push("num_classes must be >= 2".into());
    }
    for (name, value) in [
        ("tau", cfg.tau),
        ("lr_phase1", cfg.lr_phase1),
        ("lr_phase2", cfg.lr_phase2),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            out.push(format!("{name} must be > 0"));
        }
    }
    for (name, value) in [
        ("lambda1", cfg.lambda1),
        ("alpha", cfg.alpha),
        ("lambda_offdiag", cfg.lambda_offdiag),
        ("weight_decay", cfg.weight_decay),
    ] {
        if !(value >= 0.0 && value.is_finite()) {
            out.push(format!("{name} must be >= 0"));
        }
    }
    if !(0.0..=1.0).contains(&cfg.freeze_fraction) {
        out.push("freeze_fraction ∈ [0,1]".into());
    }
    if !(0.0..=1.0).contains(&cfg.pseudo_conf_threshold) {
        out.push("pseudo_conf_threshold ∈ [0,1]".into());
    }
    if cfg.patch_t > 0 && cfg.frames % cfg.patch_t != 0 {
        out.push("frames must be divisible by patch_t".into());
    }
    if cfg.patch_hw > 0 && (cfg.height % cfg.patch_hw != 0 || cfg.width % cfg.patch_hw != 0) {
        out.push("height and width must be divisible by patch_hw".into());
    }
    if cfg.n_heads > 0 && cfg.d_model % cfg.n_heads != 0 {
        out.push("d_model must be divisible by n_heads".into());
    }
    out
}
