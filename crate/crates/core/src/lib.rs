//! R2D2: training a table-to-text generator to also discriminate faithful
//! from replaced sentences.
//!
//! The crate is organised as a pipeline:
//!
//! - [`corpus`]: table examples, linearization, tokenization, synthetic data.
//! - [`entities`]: entity normalization and a table-grounded recognizer.
//! - [`perturb`]: knowledge- and model-based contradictory sentence sampling.
//! - [`model`]: a small encoder-decoder with discrimination heads, built on a
//!   reverse-mode autodiff tape.
//! - [`losses`]: replacement detection, unlikelihood, NLL and the combined loss.
//! - [`trainer`]: warmup and R2D2 fine-tuning loops.
//! - [`eval`]: NER-based faithfulness metrics, corpus BLEU, correlations.
//! - [`contamination`]: the metric reliability harness.
//!
//! Batch-level work runs on rayon when the `parallel` feature is enabled
//! (the default); see [`exec`].

pub mod contamination;
pub mod corpus;
pub mod entities;
pub mod eval;
pub mod exec;
pub mod losses;
pub mod model;
pub mod perturb;
pub mod seed;
pub mod trainer;

pub use corpus::{TableExample, TokenSequence, Vocabulary};
pub use entities::{EntityRecognizer, EntitySpan, TableGroundedRecognizer};
pub use exec::Execution;
