use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("field folds over on {bad} of {total} blocks")]
    FoldoverDetected { bad: usize, total: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("model has zero total variance")]
    ZeroVariance,
    #[error("image is flat (dynamic range {0} gray levels)")]
    FlatImage(u8),
    #[error("no foreground found")]
    EmptyForeground,
    #[error("value {0} outside [-90, 90)")]
    RangeError(f64),
    #[error("finger {0} appears in both training and validation splits")]
    SplitLeak(String),
    #[error("no usable pairs: every pairing was empty")]
    AllEmpty,
    #[error("empty score list: {0}")]
    EmptyScores(&'static str),
    #[error("unknown matcher {0:?}")]
    UnknownMatcher(String),
    #[error("bad format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
