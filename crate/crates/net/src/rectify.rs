//! Rectification with a trained model and its held-out evaluation.

use image::GrayImage;

use dfr_core::datagen::{DatasetManifest, Split};
use dfr_core::eval::{mre_ap, GroundTruthMatcher, MatchSample, Matcher, MinutiaeSet, MreAp, PairedMinutiae};
use dfr_core::field::{rectify_image, DistortionField};
use dfr_core::par;
use dfr_core::raster::Mask;

use crate::error::Result;
use crate::model::Model;

/// Estimated field of a distorted sample and the rectified image.
pub fn rectify(model: &Model, image: &GrayImage, mask: &Mask) -> Result<(DistortionField, GrayImage)> {
    let field = model.forward(image, mask)?.field_est;
    let out = rectify_image(image, &field, Some(mask), 255)?;
    Ok((field, out))
}

/// MRE/AP of a split before rectification, after rectification with the
/// model's field, and with the ground-truth field.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RectificationReport {
    pub samples: usize,
    pub unrectified: MreAp,
    pub rectified: MreAp,
    pub ground_truth: MreAp,
}

fn pair(matcher: &dyn Matcher, id: String, normal_id: &str, distorted: &MinutiaeSet, normal: &MinutiaeSet) -> Result<PairedMinutiae> {
    let r = matcher.match_pair(
        &MatchSample { id, minutiae: distorted.clone() },
        &MatchSample { id: normal_id.to_string(), minutiae: normal.clone() },
    )?;
    Ok(PairedMinutiae { distorted: distorted.clone(), normal: normal.clone(), pairing: r.paired })
}

/// Evaluate a split with the ground-truth correspondence matcher: rectified
/// minutiae are the distorted ones moved by the estimated field.
pub fn evaluate_rectification(model: &Model, manifest: &DatasetManifest, split: Split) -> Result<RectificationReport> {
    evaluate_rectification_with(model, manifest, split, &GroundTruthMatcher::default())
}

/// [`evaluate_rectification`] with any matcher. Probe ids are the sample id
/// with `/rectified` or `/gt` appended for the moved sets; the gallery id is
/// the sample id with `/normal`.
pub fn evaluate_rectification_with(
    model: &Model,
    manifest: &DatasetManifest,
    split: Split,
    matcher: &dyn Matcher,
) -> Result<RectificationReport> {
    let entries: Vec<_> = manifest.split(split).collect();
    let rows = par::map(&entries, |e| -> Result<[PairedMinutiae; 3]> {
        let (d, _) = manifest.load_distorted(e)?;
        let normal = manifest.load_normal(e)?.minutiae.expect("normal samples carry minutiae");
        let dm = d.minutiae.as_ref().expect("distorted samples carry minutiae");
        let est = model.forward(&d.image, &d.mask)?.field_est;
        let gt = d.gt_field.as_ref().expect("distorted samples carry ground truth");
        let n = format!("{}/normal", e.id);
        Ok([
            pair(matcher, e.id.clone(), &n, dm, &normal)?,
            pair(matcher, format!("{}/rectified", e.id), &n, &dm.mapped(&est), &normal)?,
            pair(matcher, format!("{}/gt", e.id), &n, &dm.mapped(gt), &normal)?,
        ])
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let col = |k: usize| rows.iter().map(|r| r[k].clone()).collect::<Vec<_>>();
    Ok(RectificationReport {
        samples: rows.len(),
        unrectified: mre_ap(&col(0))?,
        rectified: mre_ap(&col(1))?,
        ground_truth: mre_ap(&col(2))?,
    })
}
