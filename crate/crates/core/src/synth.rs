//! Procedural fingerprints and simulated skin distortions. These stand in for
//! collected impressions and for distortion fields measured from video, so the
//! whole pipeline can run on generated data.

use std::f64::consts::PI;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::field::{DistortionField, FieldGeometry};
use crate::raster::{BitImage, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    Arch,
    Loop,
    Whorl,
}

/// Phase singularity; each one produces a ridge ending or bifurcation.
#[derive(Debug, Clone, Copy)]
struct Singularity {
    x: f64,
    y: f64,
    charge: f64,
}

/// Parameters of one synthetic finger. Impressions of the same finger share
/// them and differ by a small pose change and noise.
#[derive(Debug, Clone)]
pub struct FingerPattern {
    pub kind: PatternKind,
    /// Ridge period in pixels.
    pub period: f64,
    angle: f64,
    core: (f64, f64),
    shape: f64,
    singularities: Vec<Singularity>,
}

impl FingerPattern {
    /// Random finger for an image of `size`×`size` pixels. Coordinates are
    /// relative to the image center.
    pub fn random(seed: u64, size: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = size as f64;
        let kind = match rng.random_range(0..3) {
            0 => PatternKind::Arch,
            1 => PatternKind::Loop,
            _ => PatternKind::Whorl,
        };
        // minutia count grows with the print area
        let n = rng.random_range(size / 16..=size / 8);
        let singularities = (0..n)
            .map(|i| Singularity {
                x: rng.random_range(-0.28..0.28) * s,
                y: rng.random_range(-0.33..0.33) * s,
                charge: if i % 2 == 0 { 1.0 } else { -1.0 },
            })
            .collect();
        Self {
            kind,
            period: rng.random_range(7.5..9.0),
            angle: rng.random_range(-0.3..0.3),
            core: (rng.random_range(-0.1..0.1) * s, rng.random_range(-0.1..0.1) * s),
            shape: rng.random_range(0.1..0.35),
            singularities,
        }
    }

    /// Ridge phase in cycles at a pattern-frame position.
    fn phase(&self, u: f64, v: f64, size: f64) -> f64 {
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let (a, b) = (c * u + s * v - self.core.0, -s * u + c * v - self.core.1);
        let base = match self.kind {
            PatternKind::Arch => b + self.shape * 0.25 * size * (-a * a / (0.08 * size * size)).exp(),
            PatternKind::Loop => (a * a + b * b).sqrt() + self.shape * b,
            PatternKind::Whorl => (a * a / (1.0 + 0.4 * self.shape) + b * b).sqrt(),
        };
        let spirals: f64 = self
            .singularities
            .iter()
            .map(|q| q.charge * (v - q.y).atan2(u - q.x) / (2.0 * PI))
            .sum();
        base / self.period + spirals
    }
}

/// Semi-axes of the contact ellipse as fractions of the image side.
const MASK_AXES: (f64, f64) = (0.36, 0.44);
/// Width of the contrast fade at the contact boundary, in normalized radius.
const EDGE_FADE: f64 = 0.1;

/// Elliptical contact region shared by every synthetic impression.
pub fn canonical_mask(size: usize) -> Mask {
    let c = (size as f64 - 1.0) / 2.0;
    let (ax, ay) = (MASK_AXES.0 * size as f64, MASK_AXES.1 * size as f64);
    Mask::pixel(BitImage::from_fn(size, size, |x, y| {
        let (u, v) = ((x as f64 - c) / ax, (y as f64 - c) / ay);
        u * u + v * v <= 1.0
    }))
}

/// One impression: dark ridges on white, inside the canonical mask.
pub fn render_impression(pattern: &FingerPattern, size: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (tx, ty) = (rng.random_range(-0.03..0.03) * s, rng.random_range(-0.03..0.03) * s);
    let rot: f64 = rng.random_range(-0.08..0.08);
    let contrast = rng.random_range(80.0..110.0);
    let c = (s - 1.0) / 2.0;
    let (ax, ay) = (MASK_AXES.0 * s, MASK_AXES.1 * s);
    let (cr, sr) = (rot.cos(), rot.sin());
    let mut img = GrayImage::from_pixel(size as u32, size as u32, Luma([255]));
    for y in 0..size {
        for x in 0..size {
            let rho = (((x as f64 - c) / ax).powi(2) + ((y as f64 - c) / ay).powi(2)).sqrt();
            if rho > 1.0 {
                continue;
            }
            // contact pressure fades out towards the boundary
            let fade = ((1.0 - rho) / EDGE_FADE).min(1.0);
            let (u, v) = (x as f64 - c - tx, y as f64 - c - ty);
            let (u, v) = (cr * u + sr * v, -sr * u + cr * v);
            let ridge = (2.0 * PI * pattern.phase(u, v, s)).cos();
            let noise: f64 = rng.random_range(-20.0..20.0);
            let value = 255.0 - fade * (120.0 + contrast * ridge - noise);
            img.put_pixel(x as u32, y as u32, Luma([value.clamp(0.0, 255.0) as u8]));
        }
    }
    img
}

/// Random smooth skin distortions built from three physical modes centered
/// at a random contact point: lateral drag, torsion and pressing/stretching,
/// each fading with a Gaussian envelope. Fields are in the rectification
/// direction (distorted grid to normal counterpart), in pixels.
#[derive(Debug, Clone, Copy)]
pub struct DistortionSimulator {
    /// Peak drag displacement as a fraction of the image side.
    pub drag: f64,
    /// Peak torsion in radians.
    pub torsion: f64,
    /// Peak radial strain.
    pub pressing: f64,
}

impl Default for DistortionSimulator {
    fn default() -> Self {
        Self { drag: 0.08, torsion: 0.15, pressing: 0.12 }
    }
}

impl DistortionSimulator {
    pub fn simulate(&self, geometry: FieldGeometry, seed: u64) -> DistortionField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = geometry.width_px().min(geometry.height_px()) as f64;
        let (cx0, cy0) = (
            (geometry.width_px() as f64 - 1.0) / 2.0,
            (geometry.height_px() as f64 - 1.0) / 2.0,
        );
        let c = (
            cx0 + rng.random_range(-0.2..0.2) * s,
            cy0 + rng.random_range(-0.2..0.2) * s,
        );
        let sigma = rng.random_range(0.25..0.45) * s;
        let dir: f64 = rng.random_range(0.0..2.0 * PI);
        let drag = rng.random_range(0.3..1.0) * self.drag * s;
        let torsion = rng.random_range(-1.0..1.0) * self.torsion;
        let press = rng.random_range(-1.0..1.0) * self.pressing;
        DistortionField::from_fn(geometry, |bx, by| {
            let p = geometry.block_center(bx, by);
            let (u, v) = (p.x - c.0, p.y - c.1);
            let w = (-(u * u + v * v) / (2.0 * sigma * sigma)).exp();
            let dx = drag * dir.cos() - torsion * v + press * u;
            let dy = drag * dir.sin() + torsion * u + press * v;
            (w * dx, w * dy)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::remove_dc;
    use crate::pca::PcaDistortionModel;

    #[test]
    fn impressions_are_deterministic_and_distinct() {
        let p = FingerPattern::random(3, 96);
        let a = render_impression(&p, 96, 1);
        let b = render_impression(&p, 96, 1);
        let c = render_impression(&p, 96, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        // background outside the contact region
        assert_eq!(a.get_pixel(0, 0)[0], 255);
    }

    #[test]
    fn ridge_period_matches_pattern() {
        // count dark/bright transitions along the central row of an arch
        let mut p = FingerPattern::random(11, 128);
        p.kind = PatternKind::Arch;
        p.singularities.clear();
        p.angle = 0.0;
        p.shape = 0.0;
        let img = render_impression(&p, 128, 5);
        let col: Vec<f64> = (20..108).map(|y| img.get_pixel(64, y)[0] as f64).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let crossings = col.windows(2).filter(|w| (w[0] - mean) * (w[1] - mean) < 0.0).count();
        let expected = 2.0 * 88.0 / p.period;
        // noise adds a few spurious crossings near the mean
        assert!((crossings as f64 - expected).abs() <= 0.35 * expected, "{crossings} vs {expected}");
    }

    #[test]
    fn simulated_fields_are_smooth_and_fold_free() {
        let g = FieldGeometry::new(16, 16, 16);
        let sim = DistortionSimulator::default();
        for seed in 0..20 {
            let f = sim.simulate(g, seed);
            f.check_foldover(None).unwrap();
            assert!(f.max_abs() <= 0.25 * 256.0);
        }
    }

    #[test]
    fn simulated_fields_are_low_rank() {
        let g = FieldGeometry::new(8, 8, 16);
        let full = Mask::block(BitImage::filled(8, 8, true), 16);
        let sim = DistortionSimulator::default();
        let fields: Vec<_> = (0..200)
            .map(|s| remove_dc(&sim.simulate(g, s), &full).unwrap())
            .collect();
        let model = PcaDistortionModel::fit(&fields, 40).unwrap();
        let cum = model.cumulative_variance().unwrap();
        assert!(cum[7] > 0.85, "{:?}", &cum[..8]);
    }
}
