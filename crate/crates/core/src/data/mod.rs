//! Synthetic translation tasks, vocabularies, corpus I/O, target-side noise
//! injection and out-of-domain corpus synthesis.

mod batch;
mod corpus;
mod task;
mod vocab;

pub use batch::{make_batches, Batch};
pub use corpus::{
    corrupt_targets, load_parallel_text, read_metadata, write_metadata, write_parallel_text, LoadReport, Pair,
    PairMeta, ParallelCorpus,
};
pub use task::{generate_corpus, generate_ood_corpus, DomainShift, MappingRule, TaskSpec};
pub use vocab::{Vocab, BOS, EOS, NUM_RESERVED, PAD, UNK};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
