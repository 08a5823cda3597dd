use std::path::PathBuf;

use log::info;

use dfr_core::field::FieldGeometry;
use dfr_core::par;
use dfr_core::synth::{render_impression, DistortionSimulator, FingerPattern};

use super::create_dir;
use crate::error::{CliError, Result};
use crate::provenance::{save_png, Provenance};

#[derive(Debug, clap::Args)]
pub struct NormalsArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub fingers: u64,
    /// Impressions per finger.
    #[arg(long, default_value_t = 1)]
    pub impressions: u64,
    /// Square image side, pixels.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct FieldsArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub count: u64,
    /// Square image side the fields cover, pixels (block 16).
    #[arg(long, default_value_t = 512)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Independent stream per (seed, index).
fn derive(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
}

fn check_size(size: usize) -> Result<()> {
    if size < 32 || size % 16 != 0 {
        return Err(CliError::validation(format!("--size {size} must be a multiple of 16, at least 32")));
    }
    Ok(())
}

pub fn normals(a: &NormalsArgs) -> Result<()> {
    check_size(a.size)?;
    create_dir(&a.output)?;
    let jobs: Vec<(u64, u64)> = (0..a.fingers).flat_map(|k| (0..a.impressions).map(move |i| (k, i))).collect();
    par::map(&jobs, |&(k, i)| -> Result<()> {
        let pattern = FingerPattern::random(derive(a.seed, k), a.size);
        let img = render_impression(&pattern, a.size, derive(a.seed ^ 1, k * a.impressions + i));
        let prov = Provenance::new("synth-normals").seed(a.seed).set("finger", k).set("impression", i);
        save_png(&img, &a.output.join(format!("f{k:04}_{i}.png")), &prov)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    info!("wrote {} impressions of {} fingers", jobs.len(), a.fingers);
    Ok(())
}

pub fn fields(a: &FieldsArgs) -> Result<()> {
    check_size(a.size)?;
    create_dir(&a.output)?;
    let g = FieldGeometry::new(a.size / 16, a.size / 16, 16);
    let sim = DistortionSimulator::default();
    for k in 0..a.count {
        let path = a.output.join(format!("field_{k:05}.dfield"));
        sim.simulate(g, derive(a.seed, k)).save(&path)?;
        Provenance::new("synth-fields").seed(a.seed).set("index", k).write_sidecar(&path)?;
    }
    info!("wrote {} fields on a {}x{} grid", a.count, g.width_blocks, g.height_blocks);
    Ok(())
}
