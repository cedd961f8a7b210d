//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric within tolerance {tol}")]
    NotSymmetric { tol: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("label {label} outside active column range [{start}, {end})")]
    LabelOutOfRange { label: usize, start: usize, end: usize },

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("class {class} has only {count} samples, need at least {min}")]
    TooFewSamples { class: usize, count: usize, min: usize },

    #[error("non-finite loss at task {task} during {phase}: {value}")]
    NanLoss { task: usize, phase: &'static str, value: f64 },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
