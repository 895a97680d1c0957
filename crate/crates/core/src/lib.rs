//! Toy sequence-to-sequence lab for learned token confidence in translation.
//!
//! A small transformer is trained with a confidence head whose output `c`
//! interpolates the model distribution toward the reference ("hints") under
//! a `-ln c` penalty. The crate covers data generation and corruption, the
//! autodiff model, training, beam search and force-decode scoring, and the
//! detection and correlation harnesses.

pub mod data;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod training;
