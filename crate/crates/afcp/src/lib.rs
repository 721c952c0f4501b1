//! Adaptively fair conformal prediction (AFCP) for multi-class classification
//! and outlier detection.
//!
//! The crate implements split-conformal prediction sets and conformal p-values
//! whose coverage is equalized over groups defined by sensitive attributes.
//! The protected attributes can be fixed in advance (marginal, per-attribute,
//! or exhaustively crossed calibration) or selected automatically for each
//! test point by a leave-one-out audit of group miscoverage. Also included:
//! synthetic tabular generators with a planted bias, a small from-scratch
//! neural classifier, a Monte Carlo harness that reproduces the coverage
//! experiments at desk scale, and a command line front end.
//!
//! The central entry points are [`afcp_sets::afcp_classify`] for
//! classification and [`afcp_sets::afcp_outlier`] for outlier detection, with
//! [`evalharness::run_classification`] and [`evalharness::run_outlier`]
//! orchestrating repeated experiments.

pub mod afcp_select;
pub mod afcp_sets;
pub mod cli;
pub mod conformal_core;
pub mod data_model;
pub mod evalharness;
pub mod model;
pub mod scores;
pub mod synthgen;

pub(crate) mod rng;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A sensitive-attribute index was outside `[0, K)`.
    #[error("attribute index {index} out of range for {count} attributes")]
    AttributeIndex { index: usize, count: usize },
    /// An attribute value fell outside its declared level range.
    #[error("attribute '{name}' has value {value} but only {levels} levels")]
    AttributeLevel {
        name: String,
        value: u32,
        levels: usize,
    },
    /// Matrix or vector dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A precondition on plain input values was violated.
    #[error("invalid input: {0}")]
    Invalid(String),
    /// A row passed to [`model::external_scores`] was not a probability vector.
    #[error("invalid probability row {row}: {reason}")]
    Probability { row: usize, reason: String },
    /// A CSV ingestion problem, located by data row (1-based, header excluded).
    #[error("{path}: row {row}: {reason}")]
    Ingest {
        path: String,
        row: usize,
        reason: String,
    },
    /// An experiment or CLI configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
