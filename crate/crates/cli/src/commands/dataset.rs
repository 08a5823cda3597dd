use std::collections::BTreeMap;
use std::path::PathBuf;

use log::info;

use dfr_core::datagen::{build_dataset, FingerImages, GenerationRecipe, Split};
use dfr_core::pca::PcaDistortionModel;
use dfr_core::preprocess::PreprocessMode;
use dfr_core::raster::load_gray;

use super::read_config;
use crate::error::{require, CliError, Result};
use crate::provenance::{list_files, Provenance};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Directory of `<finger>_<index>.png` normal impressions.
    #[arg(long)]
    pub normals: PathBuf,
    /// PCA model from `fit-model`.
    #[arg(long)]
    pub model: PathBuf,
    /// `key = value` recipe; flags below override it.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images_per_finger: Option<usize>,
    #[arg(long)]
    pub fields_per_image: Option<usize>,
    /// Comma-separated multiples of 90.
    #[arg(long, value_delimiter = ',')]
    pub rotations: Option<Vec<u32>>,
    #[arg(long)]
    pub mirror: Option<bool>,
    #[arg(long)]
    pub coeff_max: Option<f64>,
    #[arg(long)]
    pub mode: Option<PreprocessMode>,
    /// Share of fingers, last in name order, held out for validation.
    #[arg(long, default_value_t = 0.1)]
    pub valid_fraction: f64,
}

impl Args {
    fn recipe(&self) -> Result<GenerationRecipe> {
        let mut r = match &self.recipe {
            Some(p) => GenerationRecipe::parse(&read_config(p)?, p).map_err(|e| CliError::validation(e.to_string()))?,
            None => GenerationRecipe::default(),
        };
        if let Some(v) = self.seed {
            r.seed = v;
        }
        if let Some(v) = self.images_per_finger {
            r.images_per_finger = v;
        }
        if let Some(v) = self.fields_per_image {
            r.fields_per_image = v;
        }
        if let Some(v) = &self.rotations {
            r.rotations_deg = v.clone();
        }
        if let Some(v) = self.mirror {
            r.mirror = v;
        }
        if let Some(v) = self.coeff_max {
            r.coeff_max = v;
        }
        if let Some(v) = self.mode {
            r.mode = v;
        }
        r.validate().map_err(|e| CliError::validation(e.to_string()))?;
        Ok(r)
    }
}

/// Finger name of `<finger>_<index>.png`: everything before the last `_`.
pub fn finger_of(stem: &str) -> &str {
    stem.rsplit_once('_').map_or(stem, |(f, _)| f)
}

pub fn run(a: &Args) -> Result<()> {
    if !(0.0..1.0).contains(&a.valid_fraction) {
        return Err(CliError::validation(format!("--valid-fraction {} outside [0, 1)", a.valid_fraction)));
    }
    require(&a.model, "model")?;
    let recipe = a.recipe()?;
    let files = list_files(&a.normals, "png")?;
    let mut by_finger: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for f in files {
        let stem = f.file_stem().expect("listed files have names").to_string_lossy().into_owned();
        by_finger.entry(finger_of(&stem).to_string()).or_default().push(f);
    }
    if by_finger.is_empty() {
        return Err(CliError::validation(format!("no .png files in {}", a.normals.display())));
    }
    let n = by_finger.len();
    let n_valid = (a.valid_fraction * n as f64).round() as usize;
    let mut fingers = Vec::with_capacity(n);
    for (k, (finger, paths)) in by_finger.into_iter().enumerate() {
        if paths.len() < recipe.images_per_finger {
            return Err(CliError::validation(format!(
                "finger {finger} has {} images, recipe needs {}",
                paths.len(),
                recipe.images_per_finger
            )));
        }
        let images = paths[..recipe.images_per_finger].iter().map(|p| load_gray(p)).collect::<dfr_core::Result<Vec<_>>>()?;
        let split = if k + n_valid >= n { Split::Valid } else { Split::Train };
        fingers.push(FingerImages { finger, split, images });
    }
    let model = PcaDistortionModel::load(&a.model)?;
    let mut manifest = build_dataset(&fingers, &model, &recipe, &a.output)?;
    let prov = Provenance::new("make-dataset").seed(recipe.seed).input("normals", &a.normals)?.input("model", &a.model)?;
    for (k, v) in &prov.entries {
        manifest.set_meta(k, v.clone());
    }
    manifest.save(&a.output.join("manifest.tsv"))?;
    info!(
        "{} samples ({} train, {} valid) from {n} fingers",
        manifest.entries.len(),
        manifest.split(Split::Train).count(),
        manifest.split(Split::Valid).count()
    );
    Ok(())
}
