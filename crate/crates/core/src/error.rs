use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// A factorization or iteration broke down. `nugget` is the last diagonal
    /// shift that was attempted, when one applies.
    #[error("numerical failure: {message}")]
    NumericalFailure { message: String, nugget: Option<f64> },

    #[error("degenerate model: {0}")]
    DegenerateModel(String),

    #[error("preset unavailable: {0}")]
    PresetUnavailable(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::NumericalFailure {
            message: msg.into(),
            nugget: None,
        }
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for configuration-type errors (bad input rather than bad numerics).
    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::InvalidArgument(_)
                | Error::Unsupported(_)
                | Error::PresetUnavailable(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}
