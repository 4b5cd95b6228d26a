use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric domain error on {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("scenario generation failed: {0}")]
    Generation(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("scenario format: {0}")]
    Format(String),

    #[error("simulation aborted at slot {slot}: {source}")]
    Slot {
        slot: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }
}
