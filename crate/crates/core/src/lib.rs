//! Active few-shot learning toolkit.
//!
//! The crate covers the full annotation loop for text classification with
//! a fixed sentence encoder:
//!
//! - [`corpus`]: ingestion, pool sampling and label-distribution statistics
//! - [`encoder`]: pluggable text embeddings plus a persistent cache
//! - [`fsl`]: label tuning and logistic regression few-shot classifiers
//! - [`cluster`]: k-means, k-medoids and single-link clustering
//! - [`select`]: acquisition strategies (uncertainty, diversity, hybrid, CAL)
//! - [`perfpred`]: convergence signals and the stopping predictor
//! - [`simulate`]: simulated-annotator experiments producing learning curves

pub mod cluster;
pub mod corpus;
pub mod encoder;
mod error;
pub mod fsl;
pub mod perfpred;
pub mod rng;
pub mod select;
pub mod simulate;

pub use error::{Error, Result};
