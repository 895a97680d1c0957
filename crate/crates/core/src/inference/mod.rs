//! Greedy and beam decoding, force decoding and Monte Carlo dropout passes.

mod beam;
mod forced;

pub use beam::{
    beam_search, greedy, length_penalty, translate, write_translations, BeamConfig, Hypothesis, ModelScorer,
    StepScorer, TranslationRecord,
};
pub use forced::{force_decode, force_decode_batch, mc_passes, mc_passes_batch, ForcedScore, McRecord};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("invalid input: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

impl From<crate::numerics::NumericsError> for InferenceError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        Self::Model(ModelError::from(e))
    }
}

/// Natural log of a model probability, floored at `1e-12`.
pub(crate) fn log_prob(p: f32) -> f64 {
    (p as f64).max(1e-12).ln()
}

/// Maps ids outside the vocabulary to UNK, with a warning.
pub(crate) fn sanitize(ids: &[usize], vocab_size: usize) -> Vec<usize> {
    let bad = ids.iter().filter(|&&t| t >= vocab_size).count();
    if bad > 0 {
        log::warn!("{bad} token id(s) outside the vocabulary of {vocab_size} scored as UNK");
    }
    ids.iter().map(|&t| if t < vocab_size { t } else { crate::data::UNK }).collect()
}
