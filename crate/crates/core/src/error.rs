use thiserror::Error;

/// Crate-wide error type. The CLI maps these onto process exit codes, so the
/// split between variants is part of the external contract: `Data` and
/// `Metric` become exit code 2, `Numeric` becomes exit code 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("data error{}: {detail}", loc.as_ref().map(|l| format!(" ({l})")).unwrap_or_default())]
    Data { loc: Option<String>, detail: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub fn data(loc: Option<String>, detail: impl Into<String>) -> Self {
        Error::Data { loc, detail: detail.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
