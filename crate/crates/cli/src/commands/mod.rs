pub mod dataset;
pub mod evaluate;
pub mod fit;
pub mod preprocess;
pub mod rectify;
pub mod synth;
pub mod train;

use std::path::Path;

use crate::error::{CliError, Result};

/// Read a key-value config file, mapping a missing file to exit code 2.
pub(crate) fn read_config(path: &Path) -> Result<String> {
    crate::error::require(path, "config file")?;
    std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}
