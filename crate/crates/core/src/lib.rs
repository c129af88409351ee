//! Measures surprise and prescience of concept and reference combinations in
//! publication corpora via a dynamic hypergraph embedding fit by Poisson
//! maximum likelihood, plus the citation-reward metrics and regression harness
//! needed to relate innovation to scholarly recognition.

pub mod citemetrics;
pub mod config;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod hypergraph;
pub mod pipeline;
pub mod regression;
pub mod scoring;
pub mod synth;

pub use error::{Error, Result};
