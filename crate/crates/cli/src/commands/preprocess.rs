use std::fs;
use std::path::{Path, PathBuf};

use log::{error, info, warn};

use dfr_core::eval::extract_minutiae;
use dfr_core::par;
use dfr_core::preprocess::{preprocess, PreprocessMode};
use dfr_core::raster::{load_gray, BitImage};

use super::create_dir;
use crate::error::{CliError, Result};
use crate::provenance::{list_files, save_png, Provenance};

/// Minutiae this close to the mask edge are dropped.
const MINUTIAE_BORDER: usize = 8;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Directory of `.png` images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = PreprocessMode::Thin)]
    pub mode: PreprocessMode,
}

/// Writes `<stem>.png` (network input), `<stem>.mask.png` and
/// `<stem>.offset.txt`, plus `<stem>.minutiae.txt` in thinning mode. Failed
/// files are listed in `errors.log` and make the command exit with 2.
pub fn run(a: &Args) -> Result<()> {
    let files = list_files(&a.input, "png")?;
    if files.is_empty() {
        warn!("no .png files in {}", a.input.display());
        return Ok(());
    }
    create_dir(&a.output)?;
    let outcomes = par::map(&files, |p| process(p, a).map_err(|e| format!("{}: {e}", p.display())));
    let failures: Vec<String> = outcomes.into_iter().filter_map(|r| r.err()).collect();
    let log_path = a.output.join("errors.log");
    if failures.is_empty() {
        let _ = fs::remove_file(&log_path);
        info!("preprocessed {} images", files.len());
        return Ok(());
    }
    for f in &failures {
        error!("{f}");
    }
    fs::write(&log_path, failures.join("\n") + "\n")?;
    Err(CliError::validation(format!("{} of {} images failed, see {}", failures.len(), files.len(), log_path.display())))
}

fn process(path: &Path, a: &Args) -> Result<()> {
    let raw = load_gray(path)?;
    let s = preprocess(&raw, a.mode)?;
    let stem = path.file_stem().expect("listed files have names").to_string_lossy();
    let prov = Provenance::new("preprocess").input("image", path)?.set("mode", a.mode);
    save_png(&s.image, &a.output.join(format!("{stem}.png")), &prov)?;
    save_png(&s.mask.bits.to_gray(255, 0), &a.output.join(format!("{stem}.mask.png")), &prov)?;
    let (dx, dy) = s.centering_offset;
    fs::write(a.output.join(format!("{stem}.offset.txt")), format!("{}{dx} {dy}\n", prov.header()))?;
    if a.mode == PreprocessMode::Thin {
        let skeleton = BitImage::from_gray_below(&s.image, 128);
        let m = extract_minutiae(&skeleton, Some(&s.mask.bits), MINUTIAE_BORDER);
        fs::write(a.output.join(format!("{stem}.minutiae.txt")), prov.header() + &m.to_text())?;
    }
    Ok(())
}
