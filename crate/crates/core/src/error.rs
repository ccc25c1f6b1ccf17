use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite state reached while integrating.
    #[error("solver diverged at t = {t}: {context}")]
    Divergence { t: f64, context: String },

    #[error("drift evaluation budget exhausted: {nfe} > {max_nfe}")]
    Budget { nfe: usize, max_nfe: usize },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Attach batch / seed information to a divergence raised deep in a solve.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        match self {
            Error::Divergence { t, context } => Error::Divergence {
                t,
                context: format!("{context} ({})", ctx.as_ref()),
            },
            other => other,
        }
    }
}
