use std::io;

/// Failure of a command, split by exit code: bad input is 2, anything that
/// goes wrong while doing the work is 3.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            Self::Runtime(_) => 3,
        }
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }
}

impl From<dfr_core::Error> for CliError {
    fn from(e: dfr_core::Error) -> Self {
        use dfr_core::Error as E;
        match &e {
            E::Io(io) if io.kind() == io::ErrorKind::NotFound => Self::Validation(e.to_string()),
            E::InvalidArgument(_) | E::UnknownMatcher(_) | E::SplitLeak(_) => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<dfr_net::Error> for CliError {
    fn from(e: dfr_net::Error) -> Self {
        use dfr_net::Error as E;
        match e {
            E::Core(c) => c.into(),
            E::Config(_) | E::InvalidArgument(_) => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::Runtime(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        Self::Runtime(e.to_string())
    }
}

/// Fail with exit code 2 unless `path` exists.
pub fn require(path: &std::path::Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::validation(format!("{what} {} does not exist", path.display())))
    }
}
