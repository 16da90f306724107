//! Error type shared across the toolkit.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received an empty corpus, document, or text.
    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A sequence is too long (or too short) for the model.
    #[error("sequence length {len} outside supported range (max {max})")]
    Length { len: usize, max: usize },

    /// The autodiff tape was used after backward consumed it.
    #[error("graph error: {0}")]
    Graph(String),

    /// A document that must carry a reference summary does not.
    #[error("document `{0}` has no reference summary")]
    MissingReference(String),

    /// Duplicate document id within one corpus split.
    #[error("duplicate document id `{0}` in split")]
    DuplicateId(String),

    /// A value that must be finite was NaN or infinite.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Fewer data points than the operation needs.
    #[error("too few points: got {got}, need at least {need}")]
    TooFewPoints { got: usize, need: usize },

    /// A sweep was requested over an empty grid.
    #[error("empty sweep grid")]
    EmptyGrid,

    /// Malformed corpus, vocabulary, or checkpoint file.
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
