use std::io;

/// Errors produced by the engine.
///
/// The variants are grouped so a driver can map them onto process exit
/// codes: configuration problems, data/format problems and numeric failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid branch {branch} (bank has {count} branches)")]
    InvalidBranch { branch: usize, count: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("stale context: {0}")]
    StaleContext(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid feature: {0}")]
    InvalidFeature(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by drivers for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidBranch { .. } | Error::InvalidConfig(_) => ErrorClass::Config,
            Error::Numeric(_) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
