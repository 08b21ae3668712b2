//! Run configuration files: a TOML document mirroring the trainer and
//! benchmark settings plus paths. Every field is optional with defaults;
//! unknown keys are rejected; the parsed config is echoed verbatim into the
//! run directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{NoiseCfg, ScheduleConfig};
use crate::meta::{AblationMode, TestModel, TrainerConfig};
use crate::nets::{TransformKind, UnetDesc};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfigFile {
    /// All randomness in a run flows from this seed.
    pub seed: u64,
    /// "f32" (training default) or "f64" (verification).
    pub precision: String,
    /// no_adapt | mt | meta_seg | meta_hal | full | supervised_only
    pub mode: String,
    pub synth: SynthSection,
    pub trainer: TrainerSection,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            seed: 17,
            precision: "f32".into(),
            mode: "full".into(),
            synth: SynthSection::default(),
            trainer: TrainerSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub size: usize,
    pub n_source: usize,
    pub k_shot: usize,
    pub n_target_train: usize,
    pub n_target_test: usize,
    pub deform_magnitude: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::default();
        SynthSection {
            size: c.size,
            n_source: c.n_source,
            k_shot: c.k_shot,
            n_target_train: c.n_target_train,
            n_target_test: c.n_target_test,
            deform_magnitude: c.deform_magnitude,
            gamma: c.gamma,
            noise_sigma: c.noise_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub epochs: u32,
    pub meta_train_pairs: usize,
    pub meta_test_pairs: usize,
    pub labeled_batch: usize,
    pub augmented_batch: usize,
    pub unlabeled_batch: usize,
    pub ema_beta: f64,
    pub second_order: bool,
    pub noise_sigma: f64,
    pub ramp_max: f64,
    pub ramp_sharpness: f64,
    /// Ramp horizon in epochs; 0 means "use `epochs`".
    pub ramp_horizon: f64,
    pub warmup_epochs: u32,
    pub peak_lr: f64,
    pub inner_lr: f64,
    pub unet_base: usize,
    pub unet_depth: usize,
    /// "affine" or "dense".
    pub transform: String,
    pub smooth_weight: f64,
    pub checkpoint_every: u32,
    /// "student" or "teacher": which model headlines evaluation.
    pub test_model: String,
    pub divergence_threshold: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            epochs: 150,
            meta_train_pairs: 16,
            meta_test_pairs: 8,
            labeled_batch: 8,
            augmented_batch: 8,
            unlabeled_batch: 16,
            ema_beta: 0.99,
            second_order: false,
            noise_sigma: 0.05,
            ramp_max: 10.0,
            ramp_sharpness: 5.0,
            ramp_horizon: 0.0,
            warmup_epochs: 30,
            peak_lr: 0.005,
            inner_lr: 0.001,
            unet_base: 8,
            unet_depth: 3,
            transform: "affine".into(),
            smooth_weight: 0.01,
            checkpoint_every: 10,
            test_model: "student".into(),
            divergence_threshold: 1e4,
        }
    }
}

impl RunConfigFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            size: self.synth.size,
            n_source: self.synth.n_source,
            k_shot: self.synth.k_shot,
            n_target_train: self.synth.n_target_train,
            n_target_test: self.synth.n_target_test,
            deform_magnitude: self.synth.deform_magnitude,
            gamma: self.synth.gamma,
            noise_sigma: self.synth.noise_sigma,
        }
    }

    pub fn ablation_mode(&self) -> Result<AblationMode> {
        AblationMode::parse(&self.mode)
    }

    pub fn trainer_config(&self) -> Result<TrainerConfig> {
        let t = &self.trainer;
        let horizon = if t.ramp_horizon > 0.0 {
            t.ramp_horizon
        } else {
            t.epochs as f64
        };
        let transform = match t.transform.as_str() {
            "affine" => TransformKind::Affine,
            "dense" => TransformKind::Dense,
            other => {
                return Err(Error::Config(format!(
                    "unknown transform '{other}' (affine|dense)"
                )))
            }
        };
        let test_model = match t.test_model.as_str() {
            "student" => TestModel::Student,
            "teacher" => TestModel::Teacher,
            other => {
                return Err(Error::Config(format!(
                    "unknown test_model '{other}' (student|teacher)"
                )))
            }
        };
        let cfg = TrainerConfig {
            mode: self.ablation_mode()?,
            seed: self.seed,
            epochs: t.epochs,
            schedule: ScheduleConfig {
                ramp_max: t.ramp_max,
                ramp_sharpness: t.ramp_sharpness,
                horizon,
                warmup_epochs: t.warmup_epochs,
                peak_lr: t.peak_lr,
                inner_lr: t.inner_lr,
            },
            meta_train_pairs: t.meta_train_pairs,
            meta_test_pairs: t.meta_test_pairs,
            labeled_batch: t.labeled_batch,
            augmented_batch: t.augmented_batch,
            unlabeled_batch: t.unlabeled_batch,
            ema_beta: t.ema_beta,
            second_order: t.second_order,
            noise: NoiseCfg {
                sigma: t.noise_sigma,
            },
            unet: UnetDesc {
                in_channels: 1,
                base: t.unet_base,
                depth: t.unet_depth,
                classes: crate::dataset::NUM_CLASSES,
            },
            transform,
            smooth_weight: t.smooth_weight,
            checkpoint_every: t.checkpoint_every,
            test_model,
            divergence_threshold: t.divergence_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
