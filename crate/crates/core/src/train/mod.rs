//! Training orchestration: configuration, the plateau/early-stop state
//! machine, Adam, the two phase objectives and checkpointing.

mod checkpoint;
mod objective;
mod optim;
mod trainer;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointManifest, ModelSpecs, CHECKPOINT_FORMAT_VERSION};
pub use objective::{
    DecoderFinetune, DistillExample, EncoderDistill, LossParts, Objective, SegExample, TeacherTargets,
};
pub use optim::Adam;
pub use trainer::{distill_encoder, finetune_decoder, write_history_csv, EpochReport, Trainer};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::models::PromptPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    EncoderDistill,
    DecoderFinetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::EncoderDistill => "encoder_distill",
            Phase::DecoderFinetune => "decoder_finetune",
        }
    }
}

/// How the perceptual term is computed in phase 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Both embeddings pass through the frozen perceptual extractor.
    #[default]
    VggOnEmbeddings,
    /// Multi-scale MSE directly on the embeddings (average-pooled pyramid).
    DirectFeatureMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub name: OptimizerName,
    pub lr: f64,
    /// L2 penalty added to the gradient (coupled, not decoupled as in AdamW).
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            name: OptimizerName::Adam,
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub plateau_factor: f64,
    pub patience_epochs: usize,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            plateau_factor: 0.1,
            patience_epochs: 5,
            min_lr: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EarlyStopConfig {
    pub patience_epochs: usize,
    /// Also the improvement threshold of the plateau scheduler.
    pub min_delta: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            patience_epochs: 10,
            min_delta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub scheduler: SchedulerConfig,
    pub early_stop: EarlyStopConfig,
    pub loss_mode: LossMode,
    pub loss_weights: LossWeights,
    /// Pooling factors of the pyramid used by `direct_feature_match`.
    pub direct_scales: Vec<usize>,
    pub prompt_policy: PromptPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::EncoderDistill,
            max_epochs: 100,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            scheduler: SchedulerConfig::default(),
            early_stop: EarlyStopConfig::default(),
            loss_mode: LossMode::default(),
            loss_weights: LossWeights::default(),
            direct_scales: vec![2, 4],
            prompt_policy: PromptPolicy::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn for_phase(phase: Phase) -> Self {
        Self {
            phase,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let s = &self.scheduler;
        let checks = [
            (self.max_epochs >= 1, "max_epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (o.lr.is_finite() && o.lr > 0.0, "optimizer.lr must be > 0"),
            (
                o.weight_decay.is_finite() && o.weight_decay >= 0.0,
                "optimizer.weight_decay must be >= 0",
            ),
            (
                (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2),
                "adam betas must lie in [0, 1)",
            ),
            (o.eps > 0.0, "optimizer.eps must be > 0"),
            (
                s.plateau_factor > 0.0 && s.plateau_factor < 1.0,
                "scheduler.plateau_factor must lie in (0, 1)",
            ),
            (s.min_lr >= 0.0 && s.min_lr.is_finite(), "scheduler.min_lr must be >= 0"),
            (self.early_stop.min_delta >= 0.0, "early_stop.min_delta must be >= 0"),
            (
                !self.direct_scales.is_empty() && self.direct_scales.iter().all(|&k| k >= 1),
                "direct_scales must be a nonempty list of positive factors",
            ),
            (
                self.loss_weights.mse >= 0.0 && self.loss_weights.perceptual >= 0.0,
                "loss weights must be nonnegative",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::config(msg));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Shuffling is derived from `(seed, epoch)`, so this pair is the whole RNG state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// `None` until the first validation.
    pub best_val_loss: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub plateau_counter: usize,
    /// Number of plateau reductions applied so far.
    pub lr_reductions: u32,
    pub current_lr: f64,
    pub rng_state: RngState,
    pub stopped_early: bool,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            best_val_loss: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
            plateau_counter: 0,
            lr_reductions: 0,
            current_lr: config.optimizer.lr,
            rng_state: RngState {
                seed: config.seed,
                epoch: 0,
            },
            stopped_early: false,
            history: Vec::new(),
        }
    }

    pub fn is_finished(&self, config: &TrainConfig) -> bool {
        self.stopped_early || self.epoch >= config.max_epochs
    }
}

/// Updates best/improvement bookkeeping and the learning rate after one
/// validation. An epoch counts as an improvement when `val < best − min_delta`;
/// `best_val_loss` always tracks the true minimum. After `patience` epochs
/// without improvement the rate is multiplied by `plateau_factor` (floored at
/// `min_lr`) and the plateau counter restarts.
pub fn scheduler_step(state: &TrainState, val_loss: f64, config: &TrainConfig) -> TrainState {
    let mut s = state.clone();
    let improved = match s.best_val_loss {
        None => true,
        Some(best) => val_loss < best - config.early_stop.min_delta,
    };
    if s.best_val_loss.is_none_or(|b| val_loss < b) {
        s.best_val_loss = Some(val_loss);
        s.best_epoch = s.epoch.max(1);
    }
    if improved {
        s.epochs_since_improvement = 0;
        s.plateau_counter = 0;
    } else {
        s.epochs_since_improvement += 1;
        s.plateau_counter += 1;
    }
    let sc = &config.scheduler;
    if s.plateau_counter >= sc.patience_epochs && !improved {
        if s.current_lr > sc.min_lr {
            s.lr_reductions += 1;
        }
        s.current_lr = lr_after(config, s.lr_reductions);
        s.plateau_counter = 0;
    }
    s
}

/// `max(lr · factor^k, min_lr)`.
pub fn lr_after(config: &TrainConfig, reductions: u32) -> f64 {
    (config.optimizer.lr * config.scheduler.plateau_factor.powi(reductions as i32)).max(config.scheduler.min_lr)
}

/// True once `epochs_since_improvement` reaches the early-stop patience.
pub fn early_stop_check(state: &TrainState, config: &TrainConfig) -> bool {
    state.epochs_since_improvement >= config.early_stop.patience_epochs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(vals: &[f64], cfg: &TrainConfig) -> Vec<TrainState> {
        let mut s = TrainState::new(cfg);
        let mut out = vec![];
        for &v in vals {
            s.epoch += 1;
            s = scheduler_step(&s, v, cfg);
            out.push(s.clone());
        }
        out
    }

    #[test]
    fn flat_sequence_reduces_after_patience() {
        let mut cfg = TrainConfig::default();
        cfg.scheduler.patience_epochs = 2;
        let t = run(&[1.0, 1.0, 1.0], &cfg);
        assert_eq!(t[1].current_lr, 1e-4);
        assert_eq!(t[2].current_lr, 1e-4 * 0.1);
        let t = run(&[1.0, 0.9, 0.8], &cfg);
        assert!(t.iter().all(|s| s.current_lr == 1e-4));
    }

    #[test]
    fn constant_loss_stops_at_eleven() {
        let cfg = TrainConfig::default();
        let t = run(&[0.5; 12], &cfg);
        let first = t.iter().position(|s| early_stop_check(s, &cfg)).unwrap();
        assert_eq!(first + 1, 11);
    }

    #[test]
    fn lr_floors_at_min() {
        let mut cfg = TrainConfig::default();
        cfg.scheduler.patience_epochs = 1;
        let t = run(&[1.0; 10], &cfg);
        assert_eq!(t.last().unwrap().current_lr, cfg.scheduler.min_lr);
        assert!(t.windows(2).all(|w| w[1].current_lr <= w[0].current_lr));
    }
}
