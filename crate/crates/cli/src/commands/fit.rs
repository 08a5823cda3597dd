use std::path::PathBuf;

use log::info;

use dfr_core::field::{remove_dc, DistortionField};
use dfr_core::pca::PcaDistortionModel;
use dfr_core::raster::{BitImage, Mask};

use crate::error::{CliError, Result};
use crate::provenance::{list_files, Provenance};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Directory of `.dfield` files.
    #[arg(long)]
    pub fields: PathBuf,
    /// Principal components kept.
    #[arg(long, default_value_t = 8)]
    pub components: usize,
    #[arg(long)]
    pub output: PathBuf,
}

/// Fields lose their rigid part over the whole grid before fitting.
pub fn run(a: &Args) -> Result<()> {
    let files = list_files(&a.fields, "dfield")?;
    if files.is_empty() {
        return Err(CliError::validation(format!("no .dfield files in {}", a.fields.display())));
    }
    let fields = files
        .iter()
        .map(|p| {
            let f = DistortionField::load(p)?;
            let g = f.geometry;
            let all = Mask::block(BitImage::filled(g.width_blocks, g.height_blocks, true), g.block_size_px as u32);
            Ok(remove_dc(&f, &all)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let model = PcaDistortionModel::fit(&fields, a.components)?;
    let explained = model.cumulative_variance()?.last().copied().unwrap_or(0.0);
    model.save(&a.output)?;
    Provenance::new("fit-model")
        .input("fields", &a.fields)?
        .set("components", a.components)
        .set("samples", fields.len())
        .set("cumulative_variance", explained)
        .write_sidecar(&a.output)?;
    info!("fitted {} components on {} fields, cumulative variance {explained:.4}", a.components, fields.len());
    Ok(())
}
