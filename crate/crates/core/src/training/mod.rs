//! Pretraining, fine-tuning and the evaluation protocols built on them.

mod checkpoint;
mod finetune;
mod model;
mod optim;
mod pretrain;

pub use checkpoint::{load_checkpoint, load_classifier, save_checkpoint, save_classifier, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use finetune::{
    compute_metrics, data_size_sweep, evaluate, finetune, finetune_seeds, Classifier, Metrics, SeedResult, SweepRow,
};
pub use model::{batch_gradients, batch_objective, embed_batch, BatchGradients};
pub use optim::{adamw_step, AdamConfig, AdamState, ParamSlot};
pub use pretrain::{alignment_report, pretrain, write_loss_log, AlignmentReport, PretrainRun, StepRecord, Trainer, LOSS_LOG_HEADER};

pub use crate::data::Task;

use crate::error::{Error, Result};

/// Seeds used for every multi-run experiment.
pub const EVAL_SEEDS: [u64; 5] = [1, 12, 123, 1234, 12345];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub gamma: f64,
    /// Hard negatives mined per anchor and side.
    pub hard_negatives: usize,
    pub seeds: Vec<u64>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning-rate multiplier for encoder arrays during fine-tuning; the
    /// classification head always uses the full rate.
    pub encoder_lr_scale: f64,
}

impl TrainConfig {
    /// Full-scale settings: lr 2e-5, batch 64, 20 epochs.
    pub fn full_scale() -> Self {
        Self {
            learning_rate: 2e-5,
            batch_size: 64,
            epochs: 20,
            ..Self::desk()
        }
    }

    /// Settings sized for a single CPU core and ~1K samples.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 16,
            epochs: 5,
            lambda: 0.5,
            gamma: 0.5,
            hard_negatives: 1,
            seeds: EVAL_SEEDS.to_vec(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            encoder_lr_scale: 1.0,
        }
    }

    /// Defaults for training a classification head on top of the encoders:
    /// a short schedule, with encoder arrays moving at 0.3× the head's rate.
    pub fn desk_finetune() -> Self {
        Self {
            epochs: 3,
            encoder_lr_scale: 0.3,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.lambda >= 0.0 && self.gamma >= 0.0) {
            return Err(Error::NegativeWeight(format!("λ = {}, γ = {}", self.lambda, self.gamma)));
        }
        if self.hard_negatives == 0 {
            return bad("hard_negatives must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if !(self.encoder_lr_scale >= 0.0 && self.encoder_lr_scale.is_finite()) {
            return bad("encoder_lr_scale must be non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Which encoders receive updates during fine-tuning. The head always trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FreezeMask {
    pub audio_encoder_trainable: bool,
    pub text_encoder_trainable: bool,
}

impl FreezeMask {
    pub const TRAIN_ALL: FreezeMask = FreezeMask::new(true, true);
    pub const FREEZE_ALL: FreezeMask = FreezeMask::new(false, false);

    pub const fn new(audio_encoder_trainable: bool, text_encoder_trainable: bool) -> Self {
        Self {
            audio_encoder_trainable,
            text_encoder_trainable,
        }
    }

    /// The four combinations, fully frozen first and fully trainable last.
    pub fn grid() -> [FreezeMask; 4] {
        [
            FreezeMask::new(false, false),
            FreezeMask::new(false, true),
            FreezeMask::new(true, false),
            FreezeMask::new(true, true),
        ]
    }

    /// Name of what is frozen: `none`, `audio`, `text` or `both`.
    pub fn frozen_name(self) -> &'static str {
        match (self.audio_encoder_trainable, self.text_encoder_trainable) {
            (true, true) => "none",
            (false, true) => "audio",
            (true, false) => "text",
            (false, false) => "both",
        }
    }
}

impl std::str::FromStr for FreezeMask {
    type Err = String;

    /// Parses the frozen part: `none`, `audio`, `text` or `both`.
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(FreezeMask::new(true, true)),
            "audio" => Ok(FreezeMask::new(false, true)),
            "text" => Ok(FreezeMask::new(true, false)),
            "both" => Ok(FreezeMask::new(false, false)),
            other => Err(format!("unknown freeze setting `{other}` (expected none, audio, text or both)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        TrainConfig::full_scale().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        TrainConfig::desk_finetune().validate().unwrap();
        assert_eq!(TrainConfig::full_scale().learning_rate, 2e-5);
        assert_eq!((TrainConfig::full_scale().batch_size, TrainConfig::full_scale().epochs), (64, 20));
        assert_eq!(TrainConfig::default().seeds, vec![1, 12, 123, 1234, 12345]);
    }

    #[test]
    fn tiny_batches_are_rejected() {
        let cfg = TrainConfig {
            batch_size: 1,
            ..TrainConfig::desk()
        };
        assert!(matches!(cfg.validate(), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn freeze_names_round_trip() {
        for mask in FreezeMask::grid() {
            assert_eq!(mask.frozen_name().parse::<FreezeMask>().unwrap(), mask);
        }
    }
}
