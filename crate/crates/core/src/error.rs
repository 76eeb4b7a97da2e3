use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate leave-one-out: weight {alpha} leaves no remaining mass")]
    DegenerateLeaveOneOut { alpha: f64 },

    #[error("insufficient pool for class {class}: need {needed} samples, have {available}")]
    Capacity {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("could not place {classes} class means {min_distance} apart after {tries} tries; reduce noise_scale")]
    ReduceNoise {
        classes: usize,
        min_distance: f64,
        tries: usize,
    },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config field `{field}`: {message}")]
    ConfigField { field: String, message: String },

    #[error("unknown config key `{key}`{}", suggestion.as_ref().map(|s| format!(" (did you mean `{s}`?)")).unwrap_or_default())]
    UnknownKey {
        key: String,
        suggestion: Option<String>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable tag used in CLI error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Argument(_) => "argument",
            Error::Numeric(_) => "numeric",
            Error::DegenerateLeaveOneOut { .. } => "degenerate_leave_one_out",
            Error::Capacity { .. } => "capacity",
            Error::ReduceNoise { .. } => "reduce_noise",
            Error::ConfigParse { .. } => "config_parse",
            Error::ConfigField { .. } => "config_validation",
            Error::UnknownKey { .. } => "config_unknown_key",
            Error::Io { .. } => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension { expected, found })
    }
}
