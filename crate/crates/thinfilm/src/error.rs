//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by grid construction, transforms, solvers and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// A constructor or operation received parameters outside its domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A finite-difference stencil does not fit into the grid.
    #[error("stencil of {needed} nodes exceeds axis with {available} nodes")]
    StencilTooWide { needed: usize, available: usize },

    /// Fields (or a field and a grid) with incompatible shapes were combined.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The monotone graph condition required by the coordinate transform
    /// failed; the payload locates the first offending sample.
    #[error("graph condition violated at {location}: {detail}")]
    GraphCondition { location: String, detail: String },

    /// A numerical routine failed to converge or hit a singular system.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Configuration file or CLI usage error.
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
