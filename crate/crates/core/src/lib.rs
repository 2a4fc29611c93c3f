//! Fuzzy-digest anomaly detection: ssdeep and TLSH digests, synthetic
//! corpora with spliced anomalies, digest tokenization, small neural
//! classifiers and the evaluation harness around them.

pub mod cli;
pub mod corpus;
pub mod digest;
pub mod error;
pub mod eval;
pub mod featurize;
pub mod fsutil;
pub mod nn;
pub mod rng;
pub mod ssdeep;
pub mod tlsh;

pub use error::{Error, Result};
