//! Episodic meta-learning trainer: episode sampling, inner-loop updates,
//! meta-test evaluation with consistency regularization, and the combined
//! outer update.

mod engine;
mod episode;

#[cfg(test)]
mod tests;

pub use engine::{
    EpisodeData, EpochLog, InnerOutcome, MetaTestOutcome, RunArtifacts, StepLosses, TrainData,
    TrainStats, Trainer,
};
pub use episode::{sample_episode, Episode};

use crate::error::{Error, Result};
use crate::losses::{NoiseCfg, ScheduleConfig};
use crate::nets::{TransformKind, UnetDesc};

/// Ablation arms. Each arm gates exactly the loss terms listed below:
///
/// - `NoAdapt`: segmentation loss on labeled source only; no target-side
///   terms at all (lower bound).
/// - `Mt`: mean teacher — segmentation plus noise-consistency on
///   unlabeled data; no meta-learning, no transforms.
/// - `MetaSeg`: episodic meta-learning with the segmentation loss (and
///   noise-consistency in meta-test); no hallucinator, no transform loss.
/// - `MetaHal`: adds the hallucinator and the transformation loss; the
///   consistency term still uses identity transforms.
/// - `Full`: consistency becomes hallucination-consistent (teacher outputs
///   warped by the hallucinator transforms).
/// - `SupervisedOnly`: segmentation on labeled target data (upper bound).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    NoAdapt,
    Mt,
    MetaSeg,
    MetaHal,
    Full,
    SupervisedOnly,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "no_adapt" => Ok(AblationMode::NoAdapt),
            "mt" => Ok(AblationMode::Mt),
            "meta_seg" => Ok(AblationMode::MetaSeg),
            "meta_hal" => Ok(AblationMode::MetaHal),
            "full" => Ok(AblationMode::Full),
            "supervised_only" => Ok(AblationMode::SupervisedOnly),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (no_adapt|mt|meta_seg|meta_hal|full|supervised_only)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationMode::NoAdapt => "no_adapt",
            AblationMode::Mt => "mt",
            AblationMode::MetaSeg => "meta_seg",
            AblationMode::MetaHal => "meta_hal",
            AblationMode::Full => "full",
            AblationMode::SupervisedOnly => "supervised_only",
        }
    }

    pub fn all() -> [AblationMode; 6] {
        [
            AblationMode::NoAdapt,
            AblationMode::Mt,
            AblationMode::MetaSeg,
            AblationMode::MetaHal,
            AblationMode::Full,
            AblationMode::SupervisedOnly,
        ]
    }

    pub fn is_episodic(self) -> bool {
        matches!(
            self,
            AblationMode::MetaSeg | AblationMode::MetaHal | AblationMode::Full
        )
    }

    pub fn uses_hallucinator(self) -> bool {
        matches!(self, AblationMode::MetaHal | AblationMode::Full)
    }

    pub fn uses_consistency(self) -> bool {
        matches!(
            self,
            AblationMode::Mt | AblationMode::MetaSeg | AblationMode::MetaHal | AblationMode::Full
        )
    }

    /// Whether the consistency term warps through hallucinator transforms
    /// (otherwise identity transforms with noise only).
    pub fn hallucination_consistent(self) -> bool {
        matches!(self, AblationMode::Full)
    }

    pub fn uses_unlabeled(self) -> bool {
        self.uses_consistency()
    }
}

/// Which parameters headline evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestModel {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub mode: AblationMode,
    pub seed: u64,
    pub epochs: u32,
    pub schedule: ScheduleConfig,
    pub meta_train_pairs: usize,
    pub meta_test_pairs: usize,
    pub labeled_batch: usize,
    pub augmented_batch: usize,
    pub unlabeled_batch: usize,
    pub ema_beta: f64,
    pub second_order: bool,
    pub noise: NoiseCfg,
    pub unet: UnetDesc,
    pub transform: TransformKind,
    pub smooth_weight: f64,
    pub checkpoint_every: u32,
    pub test_model: TestModel,
    pub divergence_threshold: f64,
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.labeled_batch > self.meta_train_pairs {
            return Err(Error::Config(
                "labeled_batch cannot exceed meta_train_pairs".into(),
            ));
        }
        if self.augmented_batch > self.labeled_batch {
            return Err(Error::Config(
                "augmented_batch cannot exceed labeled_batch (augmented slots \
                 hallucinate from the labeled slots)"
                    .into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_beta) {
            return Err(Error::Config("ema beta must lie in [0,1]".into()));
        }
        if self.divergence_threshold <= 0.0 {
            return Err(Error::Config("divergence threshold must be positive".into()));
        }
        if self.smooth_weight < 0.0 {
            return Err(Error::Config("smoothness weight must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            mode: AblationMode::Full,
            seed: 17,
            epochs: 150,
            schedule: ScheduleConfig::default(),
            meta_train_pairs: 16,
            meta_test_pairs: 8,
            labeled_batch: 8,
            augmented_batch: 8,
            unlabeled_batch: 16,
            ema_beta: 0.99,
            second_order: false,
            noise: NoiseCfg::default(),
            unet: UnetDesc::default(),
            transform: TransformKind::Affine,
            smooth_weight: 0.01,
            checkpoint_every: 10,
            test_model: TestModel::Student,
            divergence_threshold: 1e4,
        }
    }
}
