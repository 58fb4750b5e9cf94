//! Crate-wide error type.
//!
//! Variants map onto the CLI exit codes: input and spec problems exit with 2,
//! numeric failures (including rank deficiency and smoothing-parameter
//! selection failures) with 3, resource-cap violations with 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data (CSV problems, dimension
    /// mismatches, invalid arguments).
    #[error("input error: {0}")]
    Input(String),

    /// Malformed kernel specification or one that does not fit the data.
    #[error("kernel spec error: {0}")]
    Spec(String),

    /// A design matrix lost rank; `columns` names the offending columns.
    #[error("rank deficiency in {context}: offending columns {columns:?}")]
    RankDeficient { context: String, columns: Vec<String> },

    /// Numeric failure (singular system, eigensolver breakdown). `details`
    /// carries condition diagnostics where available.
    #[error("numeric error: {context}: {details}")]
    Numeric { context: String, details: String },

    /// Smoothing-parameter selection failed (every candidate was skipped).
    #[error("selection error: {0}")]
    Selection(String),

    /// A configured resource cap (problem size, memory) was exceeded.
    #[error("resource cap exceeded: {0}")]
    Resource(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn spec(msg: impl Into<String>) -> Self {
        Error::Spec(msg.into())
    }

    pub fn numeric(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Numeric { context: context.into(), details: details.into() }
    }

    pub fn selection(msg: impl Into<String>) -> Self {
        Error::Selection(msg.into())
    }

    pub fn resource(msg: impl Into<String>) -> Self {
        Error::Resource(msg.into())
    }

    /// Process exit code for the CLI: 2 input, 3 numeric, 4 resource cap.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Input(_) | Error::Spec(_) | Error::Io(_) => 2,
            Error::RankDeficient { .. } | Error::Numeric { .. } | Error::Selection(_) => 3,
            Error::Resource(_) => 4,
        }
    }

    /// Stable machine-readable tag used in the structured error artifact.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Spec(_) => "spec",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::Numeric { .. } => "numeric",
            Error::Selection(_) => "selection",
            Error::Resource(_) => "resource",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
