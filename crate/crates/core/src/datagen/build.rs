use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::GrayImage;
use log::{debug, info};

use super::manifest::{DatasetManifest, ManifestEntry, Provenance, Split};
use super::recipe::{derive_seed, GenerationRecipe};
use super::{augmentations, synthesize_pair, Augmentation, NormalSample};
use crate::error::{Error, Result};
use crate::par;
use crate::pca::{sample_coefficients, PcaDistortionModel};

/// Source impressions of one finger.
#[derive(Debug, Clone)]
pub struct FingerImages {
    pub finger: String,
    pub split: Split,
    pub images: Vec<GrayImage>,
}

/// Coefficient draws per sample before giving up on fold-free fields.
pub const MAX_FIELD_ATTEMPTS: u32 = 20;

fn check_fingers(fingers: &[FingerImages], recipe: &GenerationRecipe, size: (usize, usize)) -> Result<()> {
    let mut splits: BTreeMap<&str, Split> = BTreeMap::new();
    for f in fingers {
        let valid = !f.finger.is_empty()
            && f.finger.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
        if !valid {
            return Err(Error::InvalidArgument(format!("finger id {:?} is not a plain file stem", f.finger)));
        }
        match splits.insert(&f.finger, f.split) {
            Some(s) if s != f.split => return Err(Error::SplitLeak(f.finger.clone())),
            Some(_) => return Err(Error::InvalidArgument(format!("finger {} listed twice", f.finger))),
            None => {}
        }
    }
    for f in fingers {
        if f.images.len() < recipe.images_per_finger {
            return Err(Error::InsufficientSamples { needed: recipe.images_per_finger, got: f.images.len() });
        }
        for img in &f.images[..recipe.images_per_finger] {
            let got = (img.width() as usize, img.height() as usize);
            if got != size {
                return Err(Error::ShapeMismatch(format!(
                    "finger {} has a {}x{} image, the model expects {}x{}",
                    f.finger, got.0, got.1, size.0, size.1
                )));
            }
        }
    }
    Ok(())
}

struct NormalJob<'a> {
    finger: &'a FingerImages,
    image_index: usize,
    augmentation: Augmentation,
}

impl NormalJob<'_> {
    fn name(&self) -> String {
        format!("{}_{}_{}", self.finger.finger, self.image_index, self.augmentation.tag())
    }
}

struct NormalFiles {
    image: PathBuf,
    mask: PathBuf,
    minutiae: PathBuf,
}

fn write_normal(out_dir: &Path, name: &str, n: &NormalSample) -> Result<NormalFiles> {
    let files = NormalFiles {
        image: PathBuf::from(format!("normals/{name}.png")),
        mask: PathBuf::from(format!("normals/{name}_mask.png")),
        minutiae: PathBuf::from(format!("normals/{name}.min.txt")),
    };
    n.image.save(out_dir.join(&files.image))?;
    n.mask.save_png(&out_dir.join(&files.mask))?;
    n.minutiae.save(&out_dir.join(&files.minutiae))?;
    Ok(files)
}

/// Generate every distorted sample of the recipe and write the dataset
/// under `out_dir` (`normals/`, `samples/`, `manifest.tsv`).
///
/// Each augmented normal impression receives `fields_per_image` fields from
/// the model. Coefficients come from a seed derived from the recipe seed and
/// the sample id, so the output does not depend on scheduling. Draws whose
/// field folds over inside the warped mask, or pushes the print out of the
/// frame, are redrawn up to [`MAX_FIELD_ATTEMPTS`] times.
pub fn build_dataset(
    fingers: &[FingerImages],
    model: &PcaDistortionModel,
    recipe: &GenerationRecipe,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    recipe.validate()?;
    let g = model.geometry();
    check_fingers(fingers, recipe, (g.width_px(), g.height_px()))?;
    std::fs::create_dir_all(out_dir.join("normals"))?;
    std::fs::create_dir_all(out_dir.join("samples"))?;

    let augs = augmentations(recipe);
    let jobs: Vec<NormalJob> = fingers
        .iter()
        .flat_map(|f| {
            let augs = &augs;
            (0..recipe.images_per_finger).flat_map(move |i| {
                augs.iter().map(move |&a| NormalJob { finger: f, image_index: i, augmentation: a })
            })
        })
        .collect();
    info!("preparing {} normal impressions", jobs.len());
    let normals = par::map(&jobs, |j| -> Result<(NormalSample, NormalFiles)> {
        let raw = j.augmentation.apply(&j.finger.images[j.image_index]);
        let n = NormalSample::new(&raw, recipe.mode)?;
        let files = write_normal(out_dir, &j.name(), &n)?;
        Ok((n, files))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let samples: Vec<(usize, usize)> =
        (0..jobs.len()).flat_map(|j| (0..recipe.fields_per_image).map(move |k| (j, k))).collect();
    info!("synthesizing {} distorted samples", samples.len());
    let t = model.num_components();
    let entries = par::map(&samples, |&(j, k)| -> Result<ManifestEntry> {
        let job = &jobs[j];
        let (normal, files) = &normals[j];
        let id = format!("{}_f{k}", job.name());
        let mut last = None;
        for attempt in 0..MAX_FIELD_ATTEMPTS {
            let coeffs = sample_coefficients(derive_seed(recipe.seed, &format!("{id}/{attempt}")), t, recipe.coeff_max)?;
            let field = model.synthesize(&coeffs)?;
            let pair = match synthesize_pair(normal, &field) {
                Ok(p) => p,
                Err(e @ (Error::FoldoverDetected { .. } | Error::EmptyForeground | Error::DegenerateInput(_))) => {
                    debug!("{id}: redrawing field after {e}");
                    last = Some(e);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let e = ManifestEntry {
                id: id.clone(),
                split: job.finger.split,
                finger: job.finger.finger.clone(),
                provenance: Provenance {
                    image_index: job.image_index,
                    augmentation: job.augmentation,
                    field_index: k,
                    attempts: attempt + 1,
                    coefficients: coeffs.0,
                },
                normal_image: files.image.clone(),
                normal_mask: files.mask.clone(),
                normal_minutiae: files.minutiae.clone(),
                image: format!("samples/{id}.png").into(),
                mask: format!("samples/{id}_mask.png").into(),
                gt_field: format!("samples/{id}.dfld").into(),
                orientation: format!("samples/{id}.ornt").into(),
                minutiae: format!("samples/{id}.min.txt").into(),
            };
            let s = &pair.sample;
            s.image.save(out_dir.join(&e.image))?;
            s.mask.save_png(&out_dir.join(&e.mask))?;
            s.gt_field.as_ref().expect("synthesized samples carry ground truth").save(&out_dir.join(&e.gt_field))?;
            pair.orientation.save(&out_dir.join(&e.orientation))?;
            s.minutiae.as_ref().expect("synthesized samples carry minutiae").save(&out_dir.join(&e.minutiae))?;
            return Ok(e);
        }
        Err(last.expect("at least one attempt"))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let count = |s: Split| entries.iter().filter(|e| e.split == s).count();
    let meta = vec![
        ("generator".into(), format!("dfr-core {}", env!("CARGO_PKG_VERSION"))),
        ("recipe_hash".into(), recipe.hash(model)?),
        ("seed".into(), recipe.seed.to_string()),
        ("mode".into(), recipe.mode.to_string()),
        ("components".into(), t.to_string()),
        ("train".into(), count(Split::Train).to_string()),
        ("valid".into(), count(Split::Valid).to_string()),
    ];
    let manifest = DatasetManifest { meta, entries, root: out_dir.to_path_buf() };
    manifest.check_consistency()?;
    manifest.save(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}
