use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("box {box_2d:?} is out of bounds for a {width}x{height} image")]
    Bounds {
        box_2d: [i64; 4],
        width: u32,
        height: u32,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("box does not intersect the region")]
    EmptyIntersection,

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("guideline corpus is empty")]
    EmptyCorpus,

    #[error("guideline ingest failed: {0}")]
    Ingest(String),

    #[error("embedding failed for {id}: {message}")]
    Embedding { id: String, message: String },

    /// Carries the raw model text so it can be written to the run trace.
    #[error("protocol error: {message}")]
    Protocol { message: String, raw: String },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("unsupported file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn protocol(message: impl Into<String>, raw: &str) -> Self {
        Error::Protocol {
            message: message.into(),
            raw: raw.to_string(),
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failing backend or filesystem.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Bounds { .. }
                | Error::Shape(_)
                | Error::EmptyIntersection
                | Error::Validation(_)
                | Error::EmptyCorpus
                | Error::Ingest(_)
                | Error::Protocol { .. }
                | Error::Format(_)
                | Error::Json(_)
        )
    }
}

/// Failure reported by a model, segmenter, scorer or other remote backend.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Malformed(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
}
