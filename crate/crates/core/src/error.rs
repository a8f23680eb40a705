use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("observation {obs_id}: {message}")]
    Observation { obs_id: i64, message: String },

    #[error("invalid schema: {0}")]
    Schema(String),

    #[error("invalid bins: {0}")]
    Bins(String),

    #[error("mining: {0}")]
    Mining(String),

    #[error("rule list: {0}")]
    RuleList(String),

    #[error("choice model: {0}")]
    Model(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of a numerical procedure (optimizer, sampler, evidence)
    /// as opposed to malformed input.
    pub fn is_estimation(&self) -> bool {
        matches!(self, Error::Estimation(_))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
            || matches!(self, Error::Csv(e) if matches!(e.kind(), csv::ErrorKind::Io(_)))
    }
}
