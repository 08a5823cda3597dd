//! Ridge orientation fields: classical block estimation, the 180-class
//! encoding used as network labels, and the orientation coherence map.
//!
//! Angles are in degrees in `[-90, 90)`, measured counter-clockwise from the
//! +x axis as the image is displayed (y pointing up on screen). They give the
//! ridge direction, so horizontal ridges are 0° and vertical ridges −90°.

use std::io::{Read, Write};
use std::path::Path;

use image::GrayImage;

use crate::error::{Error, Result};
use crate::field::{expect_magic, read_f32s, read_geometry, write_f32s, write_geometry, FieldGeometry};

pub const DEFAULT_CLASSES: usize = 180;

/// Per-block ridge angle grid.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationField {
    pub geometry: FieldGeometry,
    pub angles: Vec<f64>,
}

/// Per-cell class probabilities stored class-major: `data[(c * h + y) * w + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrientationProbs {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

/// Per-cell coherence in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceMap {
    pub width: usize,
    pub height: usize,
    pub coh: Vec<f64>,
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + 90.0).rem_euclid(180.0) - 90.0;
    if a >= 90.0 {
        a -= 180.0;
    }
    a
}

/// `floor(angle + 90)`.
pub fn angle_to_class(angle: f64) -> Result<usize> {
    if !(-90.0..90.0).contains(&angle) {
        return Err(Error::RangeError(angle));
    }
    Ok(((angle + 90.0).floor() as usize).min(DEFAULT_CLASSES - 1))
}

/// Bin center of a class.
pub fn class_to_angle(class: usize) -> f64 {
    class as f64 - 90.0 + 0.5
}

/// Structure-tensor orientation per block of an 8-bit image.
pub fn estimate_orientation(image: &GrayImage, block: usize) -> Result<OrientationField> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let geometry = FieldGeometry::for_image(w, h, block)?;
    let px: Vec<f64> = image.pixels().map(|p| p[0] as f64).collect();
    Ok(orientation_from_values(&px, w, h, geometry))
}

pub(crate) fn orientation_from_values(
    px: &[f64],
    w: usize,
    h: usize,
    geometry: FieldGeometry,
) -> OrientationField {
    let tensor = block_structure_tensor(px, w, h, geometry.block_size_px);
    let angles = tensor
        .iter()
        .map(|&(gxx, gyy, gxy)| {
            if gxx + gyy < 1e-9 {
                0.0
            } else {
                ridge_angle(gxx, gyy, gxy)
            }
        })
        .collect();
    OrientationField { geometry, angles }
}

/// Ridge angle (display convention) from gradient moments in image
/// coordinates.
pub(crate) fn ridge_angle(gxx: f64, gyy: f64, gxy: f64) -> f64 {
    let grad_img = 0.5 * (2.0 * gxy).atan2(gxx - gyy);
    // flip y to the display convention, ridges run across the gradient
    wrap_angle(-grad_img.to_degrees() + 90.0)
}

/// Sobel gradient moments `(Σgx², Σgy², Σgx·gy)` per block.
pub(crate) fn block_structure_tensor(
    px: &[f64],
    w: usize,
    h: usize,
    block: usize,
) -> Vec<(f64, f64, f64)> {
    let (gx, gy) = sobel(px, w, h);
    let (bw, bh) = (w / block, h / block);
    let mut out = vec![(0.0, 0.0, 0.0); bw * bh];
    for by in 0..bh {
        for bx in 0..bw {
            let mut acc = (0.0, 0.0, 0.0);
            for y in by * block..(by + 1) * block {
                for x in bx * block..(bx + 1) * block {
                    let (a, b) = (gx[y * w + x], gy[y * w + x]);
                    acc.0 += a * a;
                    acc.1 += b * b;
                    acc.2 += a * b;
                }
            }
            out[by * bw + bx] = acc;
        }
    }
    out
}

/// 3×3 Sobel with clamped borders.
pub(crate) fn sobel(px: &[f64], w: usize, h: usize) -> (Vec<f64>, Vec<f64>) {
    let at = |x: i64, y: i64| {
        let x = x.clamp(0, w as i64 - 1) as usize;
        let y = y.clamp(0, h as i64 - 1) as usize;
        px[y * w + x]
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

impl OrientationField {
    /// Hard one-hot labels at each angle's class.
    pub fn one_hot(&self, classes: usize) -> Result<OrientationProbs> {
        let (w, h) = (self.geometry.width_blocks, self.geometry.height_blocks);
        let mut probs = OrientationProbs::zeros(w, h, classes);
        for (i, &a) in self.angles.iter().enumerate() {
            let c = if classes == DEFAULT_CLASSES {
                angle_to_class(a)?
            } else {
                (((a + 90.0) / 180.0 * classes as f64).floor() as usize).min(classes - 1)
            };
            probs.data[c * w * h + i] = 1.0;
        }
        Ok(probs)
    }

    pub fn classes(&self) -> Result<Vec<usize>> {
        self.angles.iter().map(|&a| angle_to_class(a)).collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"ORNT1")?;
        write_geometry(&mut w, self.geometry)?;
        write_f32s(&mut w, &self.angles)
    }

    pub fn read_from(mut r: impl Read, path: &Path) -> Result<Self> {
        expect_magic(&mut r, b"ORNT1", path)?;
        let geometry = read_geometry(&mut r, path)?;
        let angles = read_f32s(&mut r, geometry.len(), path)?;
        if let Some(a) = angles.iter().find(|a| !(-90.0..90.0).contains(*a)) {
            return Err(Error::format(path, format!("angle {a} out of range")));
        }
        Ok(Self { geometry, angles })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice(), path)
    }
}

impl OrientationProbs {
    pub fn zeros(width: usize, height: usize, classes: usize) -> Self {
        Self {
            width,
            height,
            classes,
            data: vec![0.0; width * height * classes],
        }
    }

    #[inline]
    pub fn get(&self, class: usize, x: usize, y: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    /// Most probable angle per cell.
    pub fn argmax_angles(&self) -> Vec<f64> {
        let n = self.width * self.height;
        (0..n)
            .map(|i| {
                let best = (0..self.classes)
                    .max_by(|&a, &b| self.data[a * n + i].total_cmp(&self.data[b * n + i]))
                    .unwrap_or(0);
                -90.0 + (best as f64 + 0.5) * 180.0 / self.classes as f64
            })
            .collect()
    }
}

/// Double-angle unit vectors `(cos(360 t / T), sin(360 t / T))` for classes
/// `t = 1..=T` (class index `c` maps to `t = c + 1`). The doubling makes
/// orthogonal orientations antipodal.
pub fn class_basis(classes: usize) -> Vec<(f64, f64)> {
    (0..classes)
        .map(|c| {
            let a = (360.0 * (c + 1) as f64 / classes as f64).to_radians();
            (a.cos(), a.sin())
        })
        .collect()
}

/// Per-cell mean double-angle vector `(d̄_cos, d̄_sin)` including the `1/T`
/// factor.
pub fn mean_vectors(probs: &OrientationProbs) -> (Vec<f64>, Vec<f64>) {
    let n = probs.width * probs.height;
    let basis = class_basis(probs.classes);
    let t = probs.classes as f64;
    let mut dc = vec![0.0; n];
    let mut ds = vec![0.0; n];
    for (c, &(cs, sn)) in basis.iter().enumerate() {
        let plane = &probs.data[c * n..(c + 1) * n];
        for i in 0..n {
            dc[i] += plane[i] * cs / t;
            ds[i] += plane[i] * sn / t;
        }
    }
    (dc, ds)
}

/// Cells whose aggregated magnitude `d̄ ⊛ K` is below this are treated as
/// coherent.
pub const COHERENCE_GUARD: f64 = 1e-12;

/// `Coh = ‖(d̄_cos, d̄_sin) ⊛ K‖ / (d̄ ⊛ K)` with a 3×3 all-ones kernel and
/// clamp-to-edge borders.
pub fn coherence(probs: &OrientationProbs) -> CoherenceMap {
    let (w, h) = (probs.width, probs.height);
    let (dc, ds) = mean_vectors(probs);
    let mag: Vec<f64> = dc.iter().zip(&ds).map(|(a, b)| a.hypot(*b)).collect();
    let mut coh = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let (mut sc, mut ss, mut sm) = (0.0, 0.0, 0.0);
            for k in neighbourhood(x, y, w, h) {
                sc += dc[k];
                ss += ds[k];
                sm += mag[k];
            }
            if sm >= COHERENCE_GUARD {
                coh[y * w + x] = sc.hypot(ss) / sm;
            }
        }
    }
    CoherenceMap {
        width: w,
        height: h,
        coh,
    }
}

/// Indices of the clamp-to-edge 3×3 neighbourhood (repeats at borders).
pub fn neighbourhood(x: usize, y: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    (-1i64..=1).flat_map(move |oy| {
        (-1i64..=1).map(move |ox| {
            let nx = (x as i64 + ox).clamp(0, w as i64 - 1) as usize;
            let ny = (y as i64 + oy).clamp(0, h as i64 - 1) as usize;
            ny * w + nx
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Luma;

    /// Grating whose ridges run at `ridge_deg` (display convention).
    fn grating(size: u32, ridge_deg: f64, period: f64) -> GrayImage {
        let a = ridge_deg.to_radians();
        // ridge direction in image coordinates (y down)
        let (rx, ry) = (a.cos(), -a.sin());
        GrayImage::from_fn(size, size, |x, y| {
            // distance across ridges
            let d = -(x as f64) * ry + y as f64 * rx;
            Luma([(127.5 + 120.0 * (std::f64::consts::TAU * d / period).cos()) as u8])
        })
    }

    fn angle_err(a: f64, b: f64) -> f64 {
        let d = (a - b).rem_euclid(180.0);
        d.min(180.0 - d)
    }

    #[test]
    fn grating_angles() {
        for deg in [0.0, 30.0, -45.0, 60.0, -90.0] {
            let img = grating(128, deg, 9.0);
            let f = estimate_orientation(&img, 16).unwrap();
            for by in 1..7 {
                for bx in 1..7 {
                    let a = f.angles[by * 8 + bx];
                    assert!(angle_err(a, deg) <= 2.0, "{deg}: got {a}");
                }
            }
        }
    }

    #[test]
    fn uniform_image_falls_back_to_zero() {
        let img = GrayImage::from_pixel(64, 64, Luma([128]));
        let f = estimate_orientation(&img, 16).unwrap();
        assert!(f.angles.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn class_mapping() {
        assert_eq!(angle_to_class(-90.0).unwrap(), 0);
        assert_eq!(angle_to_class(0.0).unwrap(), 90);
        assert_eq!(angle_to_class(89.5).unwrap(), 179);
        assert!(matches!(angle_to_class(90.0), Err(Error::RangeError(_))));
        assert!(angle_to_class(-90.01).is_err());
        for c in 0..180 {
            assert_eq!(angle_to_class(class_to_angle(c)).unwrap(), c);
        }
    }

    fn one_hot_grid(w: usize, h: usize, class_of: impl Fn(usize, usize) -> usize) -> OrientationProbs {
        let mut p = OrientationProbs::zeros(w, h, 180);
        for y in 0..h {
            for x in 0..w {
                p.data[(class_of(x, y) * h + y) * w + x] = 1.0;
            }
        }
        p
    }

    #[test]
    fn uniform_one_hot_is_coherent() {
        let p = one_hot_grid(5, 4, |_, _| 37);
        assert!(coherence(&p).coh.iter().all(|c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn flat_distribution_hits_guard() {
        let mut p = OrientationProbs::zeros(3, 3, 180);
        p.data.iter_mut().for_each(|v| *v = 1.0 / 180.0);
        assert!(coherence(&p).coh.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn orthogonal_checkerboard_by_hand() {
        // classes 0 and 90 are orthogonal orientations; under angle doubling
        // their unit vectors are opposite, each with magnitude 1/T.
        let p = one_hot_grid(4, 4, |x, y| if (x + y) % 2 == 0 { 0 } else { 90 });
        let coh = coherence(&p);
        // interior 3×3: 5 of one parity and 4 of the other → |5 − 4| / 9
        for (x, y) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            assert!((coh.coh[y * 4 + x] - 1.0 / 9.0).abs() < 1e-12);
        }
        // corner (0,0) with clamping: neighbourhood cells (with multiplicity)
        // (0,0)x4, (1,0)x2, (0,1)x2, (1,1)x1 → even parity 5, odd 4
        assert!((coh.coh[0] - 1.0 / 9.0).abs() < 1e-12);
        // edge (1,0): rows y=0 twice and y=1 once, columns 0..=2
        // even cells: (0,0)x2,(2,0)x2,(1,1)x1 = 5; odd: (1,0)x2,(0,1),(2,1) = 4
        assert!((coh.coh[1] - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn coherence_invariant_to_global_rotation() {
        let p = one_hot_grid(6, 6, |x, y| (x * 17 + y * 29) % 180);
        let q = one_hot_grid(6, 6, |x, y| ((x * 17 + y * 29) % 180 + 33) % 180);
        let (a, b) = (coherence(&p), coherence(&q));
        for (u, v) in a.coh.iter().zip(&b.coh) {
            assert!((u - v).abs() < 1e-6);
            assert!(*u >= 0.0 && *u <= 1.0 + 1e-6);
        }
    }

    #[test]
    fn ornt_round_trip() {
        let f = OrientationField {
            geometry: FieldGeometry::new(3, 2, 16),
            angles: vec![-90.0, -45.5, 0.0, 12.25, 60.0, 89.0],
        };
        let mut a = Vec::new();
        f.write_to(&mut a).unwrap();
        assert_eq!(&a[..5], b"ORNT1");
        let back = OrientationField::read_from(a.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, f);
    }
}
