use std::path::PathBuf;

use log::info;

use dfr_core::preprocess::{preprocess, PreprocessMode};
use dfr_core::raster::{load_gray, Mask};
use dfr_net::checkpoint::load_checkpoint;
use dfr_net::rectify::rectify;

use crate::error::{require, CliError, Result};
use crate::provenance::{save_png, Provenance};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Raw impression, or a preprocessed one when `--mask` is given.
    #[arg(long)]
    pub image: PathBuf,
    /// Foreground mask of an already preprocessed image.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Preprocessing of raw input; defaults to the training data's.
    #[arg(long)]
    pub mode: Option<PreprocessMode>,
    #[arg(long)]
    pub output_image: PathBuf,
    #[arg(long)]
    pub output_field: PathBuf,
}

pub fn run(a: &Args) -> Result<()> {
    require(&a.checkpoint, "checkpoint")?;
    require(&a.image, "image")?;
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let raw = load_gray(&a.image)?;
    let (image, mask) = match &a.mask {
        Some(m) => {
            require(m, "mask")?;
            (raw, Mask::load_png(m)?)
        }
        None => {
            let mode = match a.mode {
                Some(m) => m,
                None => meta.get("mode").map_or(Ok(PreprocessMode::Thin), |m| m.parse())?,
            };
            let s = preprocess(&raw, mode)?;
            (s.image, s.mask)
        }
    };
    let size = model.config.input_size_px;
    if (image.width() as usize, image.height() as usize) != (size, size) {
        return Err(CliError::validation(format!(
            "network takes {size}x{size} images, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let (field, out) = rectify(&model, &image, &mask)?;
    let mut prov = Provenance::new("rectify").input("checkpoint", &a.checkpoint)?.input("image", &a.image)?;
    if let Some(m) = &a.mask {
        prov = prov.input("mask", m)?;
    }
    save_png(&out, &a.output_image, &prov)?;
    field.save(&a.output_field)?;
    prov.write_sidecar(&a.output_field)?;
    info!("largest estimated displacement {:.2} px", field.max_abs());
    Ok(())
}
