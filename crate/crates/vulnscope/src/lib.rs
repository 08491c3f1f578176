//! Source-code vulnerability diagnosis for C/C++ functions.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`corpus`] — ingest labeled datasets (BigVul/D2A-shaped CSV or the
//!    native line format) into validated [`corpus::CodeFunction`] records.
//! 2. [`tokenizer`] — byte-pair encode each function into a fixed-length
//!    token window with a token→line map.
//! 3. [`svg`] — build a semantic vulnerability graph over the token window
//!    (sequential, data, control, and sink-argument edges) and lower it to
//!    an adjacency matrix.
//! 4. [`model`] — encode tokens, propagate through a residual GCN, and read
//!    out a CWE class plus a vulnerable line range; trainable end to end on
//!    a focal + localization objective via the [`autodiff`] tape.
//! 5. [`explain`] — attribute the class score back to tokens and lines
//!    (gradient baseline plus masking marginals, with an exact Shapley mode
//!    for small inputs) and pick a root-cause line upstream of the predicted
//!    range.
//!
//! [`metrics`] scores a trained model on held-out splits, [`scanner`] walks
//! a source tree and renders findings as text or structured reports, and
//! [`synthetic`] generates small labeled corpora with planted vulnerability
//! patterns for tests and demos.

pub mod autodiff;
pub mod corpus;
mod csrc;
mod error;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod scanner;
pub mod svg;
pub mod synthetic;
#[cfg(test)]
pub(crate) mod testutil;
pub mod tokenizer;

pub use error::{Error, Result};
