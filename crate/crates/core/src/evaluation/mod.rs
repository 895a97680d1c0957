//! Sentence-level quality metrics, detection metrics and the experiment
//! harnesses built on them.

mod density;
mod detection;
mod experiments;
mod gradcheck;
mod metrics;
mod report;

pub use density::{
    density_report, DensityConfig, DensityReport, ScoreDensity, TokenScore, REFERENCE_OVER_RATE, REFERENCE_UNDER_RATE,
};
pub use detection::{detection_metrics, DetectionReport};
pub use experiments::{
    frequency_bins, mixed_quality_test, noisy_corpus, run_density, run_noise_experiment, run_ood_experiment,
    run_qe_experiment, score_noise, score_own_translations, score_qe, standard_ood_corpora, token_scores, BinSummary,
    Correlation, DetectionPair, FrequencyBin, NoiseConfig, NoiseRateResult, NoiseReport, NoiseSentence,
    OodCorpusResult, OodReport, QeConfig, QeReport, Setup, TokenFrequencyRow,
};
pub use gradcheck::{model_check, primitive_checks, GradCheckCase, MODEL_TOLERANCE, PRIMITIVE_TOLERANCE};
pub use metrics::{
    metric_conf, metric_conf_log, metric_d_family, metric_sent_std, metric_sent_std_conf, metric_softmax_ent,
    metric_softmax_ent_forced, metric_tp, pearson, DFamily, ScoredSentence,
};
pub use report::{write_csv, write_json, DensityRow, DetectionRow, Summary, REPORT_SCHEMA_VERSION};

use thiserror::Error;

use crate::data::DataError;
use crate::inference::InferenceError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::training::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid input: {0}")]
    Config(String),
    #[error("detection needs both classes, got {positives} positive and {negatives} negative")]
    SingleClass { positives: usize, negatives: usize },
    #[error("undefined: {0}")]
    Undefined(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

impl From<NumericsError> for EvalError {
    fn from(e: NumericsError) -> Self {
        Self::Model(e.into())
    }
}
