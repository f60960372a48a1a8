use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the simulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("cosine distance is undefined for a zero vector")]
    ZeroVector,

    #[error("secure aggregation refused: {0}")]
    SecureAggregation(String),

    #[error("exhaustive search refused: {subsets} candidate subsets exceed the budget of {budget}")]
    SearchBudget { subsets: u128, budget: u128 },

    #[error("divergence (non-finite parameters){}{}", fmt_round(.round), fmt_client(.client))]
    Divergence {
        round: Option<usize>,
        client: Option<usize>,
    },

    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },
}

fn fmt_round(round: &Option<usize>) -> String {
    round.map(|r| format!(" in round {r}")).unwrap_or_default()
}

fn fmt_client(client: &Option<usize>) -> String {
    client.map(|c| format!(" at client {c}")).unwrap_or_default()
}

/// Coarse error category, used by the command line to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Divergence,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Divergence { .. } => ErrorCategory::Divergence,
            Error::Config { .. } | Error::Parameter(_) | Error::SearchBudget { .. } => {
                ErrorCategory::Config
            }
            _ => ErrorCategory::Data,
        }
    }

    /// Attach round context to a divergence error; other errors pass through.
    pub fn in_round(self, round: usize) -> Self {
        match self {
            Error::Divergence { client, .. } => Error::Divergence {
                round: Some(round),
                client,
            },
            other => other,
        }
    }

    pub fn at_client(self, client: usize) -> Self {
        match self {
            Error::Divergence { round, .. } => Error::Divergence {
                round,
                client: Some(client),
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
