use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("checkpoint not available: {0}")]
    Fetch(String),

    #[error("capability error: {0}")]
    Capability(String),

    #[error("input of {len} tokens exceeds the model maximum of {max}")]
    Length { len: usize, max: usize },

    #[error("render error: {0}")]
    Render(String),

    #[error("verbalizer error: {0}")]
    Verbalizer(String),

    #[error("template mode error: {0}")]
    Mode(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: {message}")]
    Ingestion {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("grouping error: {0}")]
    Grouping(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("sweep error: {0}")]
    Sweep(String),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Short name of the subsystem that raised the error, used in CLI messages.
    pub fn component(&self) -> &'static str {
        match self {
            Error::Fetch(_) | Error::Capability(_) | Error::Length { .. } | Error::Tokenizer(_) => {
                "backend"
            }
            Error::Render(_)
            | Error::Verbalizer(_)
            | Error::Mode(_)
            | Error::Registry(_)
            | Error::Parse { .. } => "prompting",
            Error::Data(_) | Error::Ingestion { .. } | Error::Sampling(_) => "data",
            Error::Grouping(_) | Error::DegenerateBatch(_) => "objectives",
            Error::Sweep(_) => "harness",
            Error::Input(_) | Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "serialization",
        }
    }
}
