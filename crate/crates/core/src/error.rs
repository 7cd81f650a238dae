use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Invalid(String),

    #[error("step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    /// NaN/Inf during training or sampling. Carries enough context to replay.
    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("frame {index}: {reason}")]
    Frame { index: usize, reason: String },

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec: {0}")]
    Image(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// True for failures that are caused by bad input rather than by the
    /// numerics of a run.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Self::Numerical(_))
    }
}
