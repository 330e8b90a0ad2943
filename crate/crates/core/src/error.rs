use thiserror::Error;

/// Errors raised by ingestion, model fitting, evaluation and learning.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A referenced column or variable does not exist (or is missing where it is needed).
    #[error("schema error: {0}")]
    Schema(String),

    /// A value is not usable, e.g. a non-finite utility.
    #[error("value error: {0}")]
    Value(String),

    /// A label lies outside its declared domain (e.g. an unknown action).
    #[error("domain error: {0}")]
    Domain(String),

    /// Staged records do not form a valid trajectory.
    #[error("structure error: {0}")]
    Structure(String),

    /// Duplicate key, e.g. a repeated `(id, stage)` pair.
    #[error("key error: {0}")]
    Key(String),

    /// An index or count is out of range.
    #[error("range error: {0}")]
    Range(String),

    /// Formula syntax error at a byte offset.
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    /// A regression could not be fitted.
    #[error("fit error: {0}")]
    Fit(String),

    /// Invalid model, learner or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// No realistic action is left for some history.
    #[error("positivity error: {0}")]
    Positivity(String),

    /// The requested operation is not defined for this input.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    /// Serialized artifact could not be read.
    #[error("format error: {0}")]
    Format(String),

    /// Results could not be aligned on their ids.
    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    /// Prefix the message with context (fold, stage, ...), keeping the variant.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        use Error::*;
        match self {
            Schema(m) => Schema(format!("{ctx}: {m}")),
            Value(m) => Value(format!("{ctx}: {m}")),
            Domain(m) => Domain(format!("{ctx}: {m}")),
            Structure(m) => Structure(format!("{ctx}: {m}")),
            Key(m) => Key(format!("{ctx}: {m}")),
            Range(m) => Range(format!("{ctx}: {m}")),
            Syntax { offset, message } => Syntax {
                offset,
                message: format!("{ctx}: {message}"),
            },
            Fit(m) => Fit(format!("{ctx}: {m}")),
            Config(m) => Config(format!("{ctx}: {m}")),
            Positivity(m) => Positivity(format!("{ctx}: {m}")),
            Unsupported(m) => Unsupported(format!("{ctx}: {m}")),
            Format(m) => Format(format!("{ctx}: {m}")),
            Alignment(m) => Alignment(format!("{ctx}: {m}")),
            Io(m) => Io(format!("{ctx}: {m}")),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
