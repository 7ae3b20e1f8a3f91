//! Tight compression of sparse quantized weight matrices for weight-stationary
//! systolic arrays.
//!
//! The pipeline is: magnitude pruning and 8-bit quantization ([`prune`]),
//! optional subword pruning, simulated-annealing row/column permutation
//! ([`anneal`]) around a greedy conflict-aware column packer ([`pack`]), and a
//! functional array model that checks the packed form and estimates cycles
//! ([`simarray`]). [`tensorio`] holds the matrix type and file formats.

pub mod anneal;
pub mod error;
pub mod pack;
pub mod prune;
pub mod simarray;
pub mod tensorio;

pub use error::{Error, Result};

/// Schema tag carried by every JSON report and packed-matrix file.
pub const REPORT_SCHEMA: &str = "tightpack-report/1";
