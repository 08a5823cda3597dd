//! Synthetic training pairs: augmentation of normal impressions, field
//! application with rigid-free ground truth, and dataset persistence.

mod build;
mod manifest;
mod recipe;

use image::GrayImage;
use nalgebra::{Point2, Vector2};

pub use build::{build_dataset, FingerImages, MAX_FIELD_ATTEMPTS};
pub use manifest::{DatasetManifest, ManifestEntry, Provenance, Split};
pub use recipe::GenerationRecipe;

use crate::error::{Error, Result};
use crate::eval::{extract_minutiae, Minutia, MinutiaeSet, DIRECTION_STEP};
use crate::field::{remove_dc, upsample_field, warp_bits, warp_image, warp_rigid, DistortionField, RigidTransform};
use crate::orientation::{estimate_orientation, OrientationField};
use crate::preprocess::{center, preprocess, render_mode, ridges, thin, PreprocessMode};
use crate::raster::Mask;

/// Minutiae closer than this to the mask edge are not used.
pub const MINUTIA_BORDER: usize = 8;

/// One augmentation of a source image: optional horizontal mirror followed
/// by a counter-clockwise rotation about the image center.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Augmentation {
    pub mirrored: bool,
    pub rotation_deg: u32,
}

impl Augmentation {
    pub const IDENTITY: Self = Self { mirrored: false, rotation_deg: 0 };

    /// Short tag such as `m1r90`.
    pub fn tag(&self) -> String {
        format!("m{}r{}", self.mirrored as u8, self.rotation_deg)
    }

    pub fn parse_tag(tag: &str) -> Option<Self> {
        let rest = tag.strip_prefix('m')?;
        let (m, r) = rest.split_once('r')?;
        let mirrored = match m {
            "0" => false,
            "1" => true,
            _ => return None,
        };
        Some(Self { mirrored, rotation_deg: r.parse().ok()? })
    }

    /// White is exposed where the rotation uncovers the frame.
    pub fn apply(&self, image: &GrayImage) -> GrayImage {
        let flipped = if self.mirrored { image::imageops::flip_horizontal(image) } else { image.clone() };
        if self.rotation_deg == 0 {
            return flipped;
        }
        let c = Vector2::new((image.width() as f64 - 1.0) / 2.0, (image.height() as f64 - 1.0) / 2.0);
        // counter-clockwise on screen is clockwise in y-down coordinates
        let rot = RigidTransform::from_angle(-(self.rotation_deg as f64).to_radians(), Vector2::zeros());
        let t = RigidTransform { translation: c - rot.rotation * c, ..rot };
        warp_rigid(&flipped, &t, 255)
    }
}

/// Augmentations of a recipe: every rotation without mirroring, then every
/// rotation of the mirror image.
pub fn augmentations(recipe: &GenerationRecipe) -> Vec<Augmentation> {
    let mirrors: &[bool] = if recipe.mirror { &[false, true] } else { &[false] };
    mirrors
        .iter()
        .flat_map(|&mirrored| {
            recipe.rotations_deg.iter().map(move |&rotation_deg| Augmentation { mirrored, rotation_deg })
        })
        .collect()
}

/// All augmented copies of `images`, as `(source index, augmentation, image)`.
pub fn augment(images: &[GrayImage], recipe: &GenerationRecipe) -> Vec<(usize, Augmentation, GrayImage)> {
    let augs = augmentations(recipe);
    images
        .iter()
        .enumerate()
        .flat_map(|(i, img)| augs.iter().map(move |a| (i, *a, a.apply(img))))
        .collect()
}

/// Image, mask and optional annotations as stored in a dataset.
#[derive(Debug, Clone)]
pub struct FingerprintSample {
    pub image: GrayImage,
    pub mask: Mask,
    pub minutiae: Option<MinutiaeSet>,
    pub gt_field: Option<DistortionField>,
}

/// Normal impression ready for synthesis, in the centered frame.
#[derive(Debug, Clone)]
pub struct NormalSample {
    pub enhanced: GrayImage,
    pub mask: Mask,
    pub mode: PreprocessMode,
    /// Network input rendered from `enhanced`.
    pub image: GrayImage,
    /// Minutiae of the skeleton, tagged with ids `0..n`.
    pub minutiae: MinutiaeSet,
}

impl NormalSample {
    pub fn new(raw: &GrayImage, mode: PreprocessMode) -> Result<Self> {
        let p = preprocess(raw, PreprocessMode::Enhance)?;
        Ok(Self::from_enhanced(p.enhanced, p.mask, mode))
    }

    /// From an already centered enhanced image and pixel mask.
    pub fn from_enhanced(enhanced: GrayImage, mask: Mask, mode: PreprocessMode) -> Self {
        let image = render_mode(&enhanced, &mask.bits, mode);
        let skeleton = thin(&ridges(&enhanced, &mask.bits));
        let mut minutiae = extract_minutiae(&skeleton, Some(&mask.bits), MINUTIA_BORDER);
        for (i, m) in minutiae.points.iter_mut().enumerate() {
            m.id = Some(i as u32);
        }
        Self { enhanced, mask, mode, image, minutiae }
    }

    pub fn to_sample(&self) -> FingerprintSample {
        FingerprintSample {
            image: self.image.clone(),
            mask: self.mask.clone(),
            minutiae: Some(self.minutiae.clone()),
            gt_field: None,
        }
    }
}

/// Output of [`synthesize_pair`]. `sample.gt_field` holds the rigid-free
/// field from the distorted sample to the normal one.
#[derive(Debug, Clone)]
pub struct SynthesizedPair {
    pub sample: FingerprintSample,
    /// Centered enhanced distorted image.
    pub enhanced: GrayImage,
    /// Orientation of the distorted ridges, the orientation-branch label.
    pub orientation: OrientationField,
    /// Shift from the warped frame to the centered one.
    pub centering_offset: (i64, i64),
}

/// Fixed-point residual above which a projected minutia is dropped.
const INVERSE_TOLERANCE: f64 = 0.05;
/// Step used to carry minutia directions through the field, px.

/// Distort a normal sample by `field`, given on the distorted grid in the
/// rectification direction: distorted pixel `x` shows normal pixel
/// `x + F(x)`. The enhanced image and mask are backward-warped, the result
/// is re-centered and the network input re-rendered. The ground truth is the
/// non-DC part of the field in the centered frame over the warped mask's
/// blocks. Normal minutiae are carried over through the inverse map and keep
/// their ids.
pub fn synthesize_pair(normal: &NormalSample, field: &DistortionField) -> Result<SynthesizedPair> {
    let g = field.geometry;
    let (w, h) = (normal.enhanced.width() as usize, normal.enhanced.height() as usize);
    if g.width_px() != w || g.height_px() != h {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} field of {} px blocks for a {w}x{h} image",
            g.width_blocks, g.height_blocks, g.block_size_px
        )));
    }
    let up = upsample_field(field, w, h)?;
    let warped_mask = Mask::pixel(warp_bits(&normal.mask.bits, &up)?);
    if warped_mask.bits.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let block = g.block_size_px as u32;
    field.check_foldover(Some(&warped_mask.to_blocks(block)))?;
    let warped = warp_image(&normal.enhanced, &up, 255)?;
    let c = center(&warped, &warped_mask)?;
    let offset = c.centering_offset;
    let blocks = c.mask.to_blocks(block);
    let gt = remove_dc(&field.translated(offset), &blocks)?;
    let image = render_mode(&c.enhanced, &c.mask.bits, normal.mode);
    let orientation = estimate_orientation(&c.enhanced, g.block_size_px)?;

    let o = Vector2::new(offset.0 as f64, offset.1 as f64);
    let project = |p: Point2<f64>| -> Option<Point2<f64>> {
        let z = field.map_point_inverse(p);
        ((field.map_point(z) - p).norm() < INVERSE_TOLERANCE).then(|| z + o)
    };
    let mut carried = Vec::new();
    for m in &normal.minutiae.points {
        let Some(z) = project(m.point()) else { continue };
        let (zx, zy) = (z.x.round() as i64, z.y.round() as i64);
        if !c.mask.bits.get_signed(zx, zy) {
            continue;
        }
        let t = m.theta.to_radians();
        let ahead = m.point() + DIRECTION_STEP * Vector2::new(t.cos(), -t.sin());
        let theta = match project(ahead) {
            Some(a) => (-(a.y - z.y)).atan2(a.x - z.x).to_degrees(),
            None => m.theta,
        };
        let mut d = Minutia::new(z.x, z.y, theta);
        d.id = m.id;
        carried.push(d);
    }

    Ok(SynthesizedPair {
        sample: FingerprintSample {
            image,
            mask: c.mask,
            minutiae: Some(MinutiaeSet::new(carried)),
            gt_field: Some(gt),
        },
        enhanced: c.enhanced,
        orientation,
        centering_offset: offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{field_rigid_part, fit_rigid, rectify_image, FieldGeometry, PointCorrespondences};
    use crate::pca::{sample_coefficients, PcaDistortionModel};
    use crate::raster::BitImage;
    use crate::synth::{render_impression, DistortionSimulator, FingerPattern};
    use image::Luma;

    const SIZE: usize = 128;

    fn normal(seed: u64, mode: PreprocessMode) -> NormalSample {
        let raw = render_impression(&FingerPattern::random(seed, SIZE), SIZE, seed);
        NormalSample::new(&raw, mode).unwrap()
    }

    fn model() -> PcaDistortionModel {
        let g = FieldGeometry::new(SIZE / 16, SIZE / 16, 16);
        let sim = DistortionSimulator::default();
        let fields: Vec<_> = (0..60).map(|s| sim.simulate(g, s)).collect();
        PcaDistortionModel::fit(&fields, 8).unwrap()
    }

    #[test]
    fn augmentation_counts_and_identity() {
        let imgs: Vec<GrayImage> = (0..5).map(|k| GrayImage::from_fn(20, 16, |x, y| Luma([(x * 7 + y * k) as u8]))).collect();
        assert_eq!(augment(&imgs, &GenerationRecipe::default()).len(), 40);
        let plain = GenerationRecipe { mirror: false, rotations_deg: vec![0], ..Default::default() };
        let out = augment(&imgs, &plain);
        assert_eq!(out.len(), 5);
        for (i, a, img) in &out {
            assert_eq!(*a, Augmentation::IDENTITY);
            assert_eq!(img, &imgs[*i]);
        }
    }

    #[test]
    fn rotations_move_pixels_counter_clockwise() {
        let mut img = GrayImage::from_pixel(9, 9, Luma([255]));
        // a dot right of center
        img.put_pixel(7, 4, Luma([0]));
        let at = |a: Augmentation| {
            let r = a.apply(&img);
            let p = r.enumerate_pixels().find(|(_, _, v)| v.0[0] == 0).unwrap();
            (p.0, p.1)
        };
        let rot = |d| Augmentation { mirrored: false, rotation_deg: d };
        assert_eq!(at(rot(90)), (4, 1));
        assert_eq!(at(rot(180)), (1, 4));
        assert_eq!(at(rot(270)), (4, 7));
        assert_eq!(at(Augmentation { mirrored: true, rotation_deg: 0 }), (1, 4));
        assert_eq!(at(Augmentation { mirrored: true, rotation_deg: 90 }), (4, 7));
        for a in [rot(0), rot(90), Augmentation { mirrored: true, rotation_deg: 270 }] {
            assert_eq!(Augmentation::parse_tag(&a.tag()), Some(a));
        }
        assert_eq!(Augmentation::parse_tag("m2r0"), None);
    }

    #[test]
    fn zero_field_reproduces_normal() {
        for mode in [PreprocessMode::Thin, PreprocessMode::Enhance] {
            let n = normal(3, mode);
            let zero = DistortionField::zeros(FieldGeometry::new(8, 8, 16));
            let p = synthesize_pair(&n, &zero).unwrap();
            assert_eq!(p.centering_offset, (0, 0));
            assert_eq!(p.sample.image, n.image);
            assert_eq!(p.sample.mask, n.mask);
            assert!(p.sample.gt_field.as_ref().unwrap().max_abs() < 1e-9);
            let carried = p.sample.minutiae.unwrap();
            assert_eq!(carried.len(), n.minutiae.len());
            for (a, b) in carried.points.iter().zip(&n.minutiae.points) {
                assert!((a.point() - b.point()).norm() < 1e-9 && (a.theta - b.theta).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn translation_has_no_ground_truth() {
        let n = normal(4, PreprocessMode::Thin);
        for (dx, dy) in [(5.0, -3.0), (2.5, 1.25)] {
            let f = DistortionField::constant(FieldGeometry::new(8, 8, 16), dx, dy);
            let p = synthesize_pair(&n, &f).unwrap();
            assert!(p.sample.gt_field.unwrap().max_abs() <= 1e-6);
        }
    }

    #[test]
    fn mask_is_the_warped_normal_mask() {
        let n = normal(5, PreprocessMode::Thin);
        let m = model();
        let f = m.synthesize(&sample_coefficients(11, 8, 2.0).unwrap()).unwrap();
        let p = synthesize_pair(&n, &f).unwrap();
        let up = upsample_field(&f, SIZE, SIZE).unwrap();
        let warped = warp_bits(&n.mask.bits, &up).unwrap();
        let (ox, oy) = p.centering_offset;
        assert_eq!(p.sample.mask.bits, warped.shifted(ox, oy));
        let gt = p.sample.gt_field.unwrap();
        let refit = field_rigid_part(&gt, Some(&p.sample.mask.to_blocks(16))).unwrap();
        assert!(refit.angle().abs() < 1e-6 && refit.translation.norm() < 1e-6);
    }

    /// Rectify the distorted image with its ground truth, undo the rigid
    /// part the ground truth dropped (fitted from the true field), and
    /// compare with the normal image: a pixel matches when the same value
    /// occurs within 2 px.
    #[test]
    fn ground_truth_round_trip_matches_normal() {
        let m = model();
        for seed in 0..4u64 {
            let n = normal(20 + seed, PreprocessMode::Binarize);
            let f = m.synthesize(&sample_coefficients(100 + seed, 8, 2.0).unwrap()).unwrap();
            let p = synthesize_pair(&n, &f).unwrap();
            let gt = p.sample.gt_field.clone().unwrap();
            let o = Vector2::new(p.centering_offset.0 as f64, p.centering_offset.1 as f64);
            // centered distorted x shows normal x - o + F(x - o); the
            // rectified frame puts it at x + gt(x)
            let g = gt.geometry;
            let (mut normal_pts, mut rect_pts) = (Vec::new(), Vec::new());
            for by in 0..g.height_blocks {
                for bx in 0..g.width_blocks {
                    let x = g.block_center(bx, by);
                    normal_pts.push(f.map_point(x - o));
                    rect_pts.push(x + gt.at(bx, by));
                }
            }
            let to_rect = fit_rigid(&PointCorrespondences::new(normal_pts, rect_pts).unwrap()).unwrap();
            let mask_img = p.sample.mask.bits.to_gray(0, 255);
            let rect = rectify_image(&p.sample.image, &gt, None, 255).unwrap();
            let rect_mask = rectify_image(&mask_img, &gt, None, 255).unwrap();
            // aligned(q) = rect(to_rect(q))
            let aligned = warp_rigid(&rect, &to_rect.inverse(), 255);
            let aligned_mask = BitImage::from_gray_below(&warp_rigid(&rect_mask, &to_rect.inverse(), 255), 128);
            let (a, b) = (BitImage::from_gray_below(&aligned, 128), BitImage::from_gray_below(&n.image, 128));
            let near = |img: &BitImage, x: usize, y: usize, v: bool| {
                (-2i64..=2).any(|dy| {
                    (-2i64..=2).any(|dx| {
                        let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                        dx * dx + dy * dy <= 4 && aligned_mask.get_signed(sx, sy) && img.get_signed(sx, sy) == v
                    })
                })
            };
            let inner = crate::preprocess::erode(&n.mask.bits, 8);
            let (mut hit, mut total) = (0usize, 0usize);
            for y in 0..SIZE {
                for x in 0..SIZE {
                    if inner.get(x, y) && aligned_mask.get(x, y) {
                        total += 1;
                        hit += near(&a, x, y, b.get(x, y)) as usize;
                    }
                }
            }
            let frac = hit as f64 / total as f64;
            assert!(total > 2000 && frac >= 0.9, "seed {seed}: {hit}/{total} = {frac:.3}");
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let n = normal(6, PreprocessMode::Thin);
        let f = DistortionField::zeros(FieldGeometry::new(4, 4, 16));
        assert!(matches!(synthesize_pair(&n, &f), Err(Error::ShapeMismatch(_))));
    }
}
