//! Joint training of the translation and confidence branches.

mod loss;
mod optim;
mod train;

pub use loss::{
    conf_loss, conf_smoothing_mass, hint_interpolate, lambda_at, nmt_loss, smooth_targets, total_loss, BatchLoss,
    LossBreakdown,
};
pub use optim::{learning_rate, Adam};
pub use train::{token_accuracy, train, StepRecord, TrainOutcome, TrainOutputs};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::model::ModelError;
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid schedule: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String, last: Option<Box<StepRecord>> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    None,
    /// Fixed mass `eps0` spread over the other labels.
    Standard,
    /// Per-token mass `eps0 * exp(1 - c_t / mean(c))`.
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trainable {
    All,
    /// Only the confidence head moves; the translation branch is frozen.
    ConfidenceHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub lambda0: f64,
    /// Decay constant in steps; `total_steps / 3.3` when unset.
    pub beta0: Option<f64>,
    pub total_steps: usize,
    pub batch_size: usize,
    pub hint_fraction: f64,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub eps0: f64,
    pub smoothing: Smoothing,
    /// Use the smoothed label, not the one-hot, as the hint distribution.
    pub smooth_hints: bool,
    /// Build the confidence head and its loss. Off gives a plain
    /// translation model objective.
    pub confidence_branch: bool,
    pub trainable: Trainable,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            lambda0: 30.0,
            beta0: None,
            total_steps: 5000,
            batch_size: 32,
            hint_fraction: 0.5,
            learning_rate: 1e-3,
            warmup_steps: 4000,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            eps0: 0.1,
            smoothing: Smoothing::None,
            smooth_hints: false,
            confidence_branch: true,
            trainable: Trainable::All,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn beta0(&self) -> f64 {
        self.beta0.unwrap_or(self.total_steps as f64 / 3.3)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TrainError::Config(m));
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return fail(format!("lambda0 {} must be finite and >= 0", self.lambda0));
        }
        if !(self.beta0() > 0.0 && self.beta0().is_finite()) {
            return fail(format!("beta0 {} must be positive", self.beta0()));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return fail("total_steps and batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.hint_fraction) {
            return fail(format!("hint_fraction {} outside [0, 1]", self.hint_fraction));
        }
        if !(0.0..1.0).contains(&self.eps0) {
            return fail(format!("eps0 {} outside [0, 1)", self.eps0));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (n, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{n} {b} outside [0, 1)"));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return fail("adam_eps must be positive".into());
        }
        if !self.confidence_branch
            && (self.hint_fraction > 0.0
                || self.smoothing == Smoothing::Confidence
                || self.trainable == Trainable::ConfidenceHead)
        {
            return fail("hints, confidence smoothing and head-only training need the confidence branch".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let s = TrainSchedule::default();
        s.validate().unwrap();
        assert_eq!(s.lambda0, 30.0);
        assert!((s.beta0() - 5000.0 / 3.3).abs() < 1e-9);
        assert_eq!(s.hint_fraction, 0.5);
    }

    #[test]
    fn invalid_schedules() {
        let d = TrainSchedule::default;
        let bad = [
            TrainSchedule { lambda0: -1.0, ..d() },
            TrainSchedule { beta0: Some(0.0), ..d() },
            TrainSchedule { eps0: 1.0, ..d() },
            TrainSchedule { hint_fraction: 1.5, ..d() },
            TrainSchedule { total_steps: 0, ..d() },
            TrainSchedule { confidence_branch: false, ..d() },
            TrainSchedule { learning_rate: 0.0, ..d() },
        ];
        for s in bad {
            assert!(s.validate().is_err(), "{s:?}");
        }
        TrainSchedule { confidence_branch: false, hint_fraction: 0.0, ..d() }.validate().unwrap();
    }
}
