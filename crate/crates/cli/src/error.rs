use std::io;

use confnmt::data::DataError;
use confnmt::evaluation::EvalError;
use confnmt::inference::InferenceError;
use confnmt::model::ModelError;
use confnmt::training::TrainError;
use thiserror::Error;

/// Failure of one command, carrying its process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training failed: {0}")]
    Training(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("{0} acceptance check(s) failed")]
    ChecksFailed(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// 0 success, 1 other failure, 2 configuration, 3 training, 4 artifact
    /// mismatch.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Training(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::ChecksFailed(_) | CliError::Io(_) | CliError::Other(_) => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => CliError::Config(m),
            ModelError::Checkpoint(m) => CliError::Mismatch(m),
            ModelError::Data(e) => e.into(),
            ModelError::Io(e) => CliError::Io(e),
            e @ ModelError::Numerics(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Config(m),
            DataError::Format(m) => CliError::Config(m),
            DataError::Io(e) => CliError::Io(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            e @ TrainError::Divergence { .. } => CliError::Training(e.to_string()),
            TrainError::Model(e) => e.into(),
            TrainError::Data(e) => e.into(),
            TrainError::Io(e) => CliError::Io(e),
            e @ TrainError::Numerics(_) => CliError::Training(e.to_string()),
        }
    }
}

impl From<InferenceError> for CliError {
    fn from(e: InferenceError) -> Self {
        match e {
            InferenceError::Config(m) => CliError::Config(m),
            InferenceError::Model(e) => e.into(),
            InferenceError::Io(e) => CliError::Io(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => CliError::Config(m),
            e @ (EvalError::SingleClass { .. } | EvalError::Undefined(_)) => CliError::Config(e.to_string()),
            EvalError::Train(e) => e.into(),
            EvalError::Inference(e) => e.into(),
            EvalError::Model(e) => e.into(),
            EvalError::Data(e) => e.into(),
            EvalError::Io(e) => CliError::Io(e),
            EvalError::Report(m) => CliError::Other(m),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
        assert_eq!(CliError::Training(String::new()).exit_code(), 3);
        assert_eq!(CliError::Mismatch(String::new()).exit_code(), 4);
        assert_eq!(CliError::ChecksFailed(1).exit_code(), 1);
    }

    #[test]
    fn divergence_maps_to_training_failure() {
        let e: CliError = EvalError::Train(TrainError::Divergence { step: 3, reason: "nan".into(), last: None }).into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = ModelError::Checkpoint("bad magic".into()).into();
        assert_eq!(e.exit_code(), 4);
    }
}
