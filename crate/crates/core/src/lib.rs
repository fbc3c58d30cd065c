//! Black-box knowledge editing.
//!
//! The crate post-processes the textual output of an upstream model with a
//! retrieval-backed edit memory and a post-editor model, provides the
//! PROMPT / IKE / SERAC-style baseline editors behind the same contract, and
//! scores edited responses along four axes: textual editing (TE), semantic
//! editing (SE), textual retention (TR) and semantic retention (SR).
//!
//! Module map:
//! - [`types`]: edits, query records, dataset files
//! - [`embedding`]: embedding providers and similarity
//! - [`memory`]: the edit memory and top-1 retrieval
//! - [`model`]: black-box text generation clients and scripted mocks
//! - [`templates`]: prompt templates and retain-token detection
//! - [`editors`]: postEdit and the baseline editors
//! - [`metrics`]: TE/SE/TR/SR, ROUGE-1, aggregation, Pearson
//! - [`augment`]: post-editor training data preparation
//! - [`harness`]: end-to-end evaluation runs

pub mod augment;
pub mod editors;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod templates;
pub mod text;
mod transport;
pub mod types;

pub use error::{Error, Result};
pub use transport::RetryPolicy;
pub use types::{Edit, EditId, QueryRecord, QueryType, ResponsePair, Scope};
