//! Dense displacement fields at block resolution and the geometry around them:
//! rigid fitting, thin-plate-spline construction, non-DC extraction, inversion,
//! resampling and image warping.
//!
//! Convention: a field stored with image A gives, for every location `x` of A,
//! the displacement to the corresponding location in its counterpart B, i.e.
//! `x` in A corresponds to `x + F(x)` in B. For a distorted fingerprint the
//! counterpart is its rectification target.
//!
//! Pixel centers sit at integer coordinates; block `b` has its center at
//! `b * block_size + (block_size - 1) / 2`.

use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, Luma};
use nalgebra::{DMatrix, Matrix2, Point2, Vector2};

use crate::error::{Error, Result};
use crate::par;
use crate::raster::{BitImage, Mask, Resolution};

/// Block grid geometry shared by fields, models and orientation maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FieldGeometry {
    pub width_blocks: usize,
    pub height_blocks: usize,
    pub block_size_px: usize,
}

impl FieldGeometry {
    pub fn new(width_blocks: usize, height_blocks: usize, block_size_px: usize) -> Self {
        assert!(block_size_px >= 1, "block size must be positive");
        Self {
            width_blocks,
            height_blocks,
            block_size_px,
        }
    }

    /// Geometry covering an image of the given pixel size.
    pub fn for_image(width_px: usize, height_px: usize, block_size_px: usize) -> Result<Self> {
        if block_size_px == 0 || width_px % block_size_px != 0 || height_px % block_size_px != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{width_px}x{height_px} image is not divisible into {block_size_px}px blocks"
            )));
        }
        Ok(Self::new(
            width_px / block_size_px,
            height_px / block_size_px,
            block_size_px,
        ))
    }

    pub fn len(&self) -> usize {
        self.width_blocks * self.height_blocks
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width_px(&self) -> usize {
        self.width_blocks * self.block_size_px
    }

    pub fn height_px(&self) -> usize {
        self.height_blocks * self.block_size_px
    }

    #[inline]
    pub fn block_center(&self, bx: usize, by: usize) -> Point2<f64> {
        let off = (self.block_size_px as f64 - 1.0) / 2.0;
        let bs = self.block_size_px as f64;
        Point2::new(bx as f64 * bs + off, by as f64 * bs + off)
    }

    /// Continuous block coordinates of a pixel position.
    #[inline]
    fn to_block_coords(&self, x: f64, y: f64) -> (f64, f64) {
        let off = (self.block_size_px as f64 - 1.0) / 2.0;
        let bs = self.block_size_px as f64;
        ((x - off) / bs, (y - off) / bs)
    }
}

/// Dense two-channel displacement grid in pixel units, row-major (row = y).
#[derive(Clone, Debug, PartialEq)]
pub struct DistortionField {
    pub geometry: FieldGeometry,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl DistortionField {
    pub fn zeros(geometry: FieldGeometry) -> Self {
        Self {
            geometry,
            dx: vec![0.0; geometry.len()],
            dy: vec![0.0; geometry.len()],
        }
    }

    pub fn constant(geometry: FieldGeometry, dx: f64, dy: f64) -> Self {
        Self {
            geometry,
            dx: vec![dx; geometry.len()],
            dy: vec![dy; geometry.len()],
        }
    }

    pub fn from_fn(geometry: FieldGeometry, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut field = Self::zeros(geometry);
        for by in 0..geometry.height_blocks {
            for bx in 0..geometry.width_blocks {
                let (u, v) = f(bx, by);
                let i = by * geometry.width_blocks + bx;
                field.dx[i] = u;
                field.dy[i] = v;
            }
        }
        field
    }

    pub fn new(geometry: FieldGeometry, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if dx.len() != geometry.len() || dy.len() != geometry.len() {
            return Err(Error::ShapeMismatch(format!(
                "field channels of length {} and {} for a {}x{} grid",
                dx.len(),
                dy.len(),
                geometry.width_blocks,
                geometry.height_blocks
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite displacement".into()));
        }
        Ok(Self { geometry, dx, dy })
    }

    #[inline]
    pub fn at(&self, bx: usize, by: usize) -> Vector2<f64> {
        let i = by * self.geometry.width_blocks + bx;
        Vector2::new(self.dx[i], self.dy[i])
    }

    /// Bilinear interpolation at a pixel position, clamped to the edge blocks.
    pub fn sample(&self, x: f64, y: f64) -> Vector2<f64> {
        let g = &self.geometry;
        let (u, v) = g.to_block_coords(x, y);
        let u = u.clamp(0.0, (g.width_blocks - 1) as f64);
        let v = v.clamp(0.0, (g.height_blocks - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let x1 = (x0 + 1).min(g.width_blocks - 1);
        let y1 = (y0 + 1).min(g.height_blocks - 1);
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let w = g.width_blocks;
        let lerp = |c: &[f64]| {
            let top = c[y0 * w + x0] * (1.0 - fx) + c[y0 * w + x1] * fx;
            let bot = c[y1 * w + x0] * (1.0 - fx) + c[y1 * w + x1] * fx;
            top * (1.0 - fy) + bot * fy
        };
        Vector2::new(lerp(&self.dx), lerp(&self.dy))
    }

    /// Position in the counterpart image of pixel position `p`.
    pub fn map_point(&self, p: Point2<f64>) -> Point2<f64> {
        p + self.sample(p.x, p.y)
    }

    /// Solve `z + F(z) = q` for `z` by fixed-point iteration.
    pub fn map_point_inverse(&self, q: Point2<f64>) -> Point2<f64> {
        let mut z = q;
        for _ in 0..100 {
            let next = q - self.sample(z.x, z.y);
            let step = (next - z).norm();
            z = next;
            if step < 1e-10 {
                break;
            }
        }
        z
    }

    pub fn max_abs(&self) -> f64 {
        self.dx
            .iter()
            .chain(&self.dy)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            geometry: self.geometry,
            dx: self.dx.iter().map(|v| v * s).collect(),
            dy: self.dy.iter().map(|v| v * s).collect(),
        }
    }

    /// Flattened `dx ‖ dy`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.dx.clone();
        v.extend_from_slice(&self.dy);
        v
    }

    pub fn from_vector(geometry: FieldGeometry, v: &[f64]) -> Result<Self> {
        let n = geometry.len();
        if v.len() != 2 * n {
            return Err(Error::LengthMismatch {
                expected: 2 * n,
                got: v.len(),
            });
        }
        Self::new(geometry, v[..n].to_vec(), v[n..].to_vec())
    }

    /// The field of the same content after its image is translated by an
    /// integer offset: `G(x) = F(x - offset)`, clamped at the border.
    pub fn translated(&self, offset: (i64, i64)) -> Self {
        let g = self.geometry;
        DistortionField::from_fn(g, |bx, by| {
            let c = g.block_center(bx, by);
            let d = self.sample(c.x - offset.0 as f64, c.y - offset.1 as f64);
            (d.x, d.y)
        })
    }

    /// Jacobian determinant of `x ↦ x + F(x)` at every block (central
    /// differences, one-sided at the border).
    pub fn jacobian_determinants(&self) -> Vec<f64> {
        let g = self.geometry;
        let (w, h) = (g.width_blocks, g.height_blocks);
        let bs = g.block_size_px as f64;
        let deriv = |c: &[f64], bx: usize, by: usize, along_x: bool| -> f64 {
            let (lo, hi, n) = if along_x {
                (bx.saturating_sub(1), (bx + 1).min(w - 1), w)
            } else {
                (by.saturating_sub(1), (by + 1).min(h - 1), h)
            };
            if n < 2 {
                return 0.0;
            }
            let idx = |k: usize| {
                if along_x {
                    by * w + k
                } else {
                    k * w + bx
                }
            };
            (c[idx(hi)] - c[idx(lo)]) / ((hi - lo) as f64 * bs)
        };
        let mut out = Vec::with_capacity(g.len());
        for by in 0..h {
            for bx in 0..w {
                let a = 1.0 + deriv(&self.dx, bx, by, true);
                let b = deriv(&self.dx, bx, by, false);
                let c = deriv(&self.dy, bx, by, true);
                let d = 1.0 + deriv(&self.dy, bx, by, false);
                out.push(a * d - b * c);
            }
        }
        out
    }

    /// Fails when the Jacobian determinant is ≤ 0 on more than 1% of the
    /// considered blocks (mask blocks, or all blocks without a mask).
    pub fn check_foldover(&self, mask: Option<&Mask>) -> Result<()> {
        let dets = self.jacobian_determinants();
        let inside = block_selection(self.geometry, mask)?;
        let total = inside.iter().filter(|&&b| b).count();
        let bad = dets
            .iter()
            .zip(&inside)
            .filter(|(d, &m)| m && **d <= 0.0)
            .count();
        if total > 0 && bad as f64 > 0.01 * total as f64 {
            return Err(Error::FoldoverDetected { bad, total });
        }
        Ok(())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"DFLD1")?;
        write_geometry(&mut w, self.geometry)?;
        write_f32s(&mut w, &self.dx)?;
        write_f32s(&mut w, &self.dy)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read, path: &Path) -> Result<Self> {
        expect_magic(&mut r, b"DFLD1", path)?;
        let geometry = read_geometry(&mut r, path)?;
        let dx = read_f32s(&mut r, geometry.len(), path)?;
        let dy = read_f32s(&mut r, geometry.len(), path)?;
        Self::new(geometry, dx, dy).map_err(|e| Error::format(path, e.to_string()))
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

/// Which blocks of `geometry` a mask selects (all blocks for `None`).
pub(crate) fn block_selection(geometry: FieldGeometry, mask: Option<&Mask>) -> Result<Vec<bool>> {
    let Some(mask) = mask else {
        return Ok(vec![true; geometry.len()]);
    };
    let blocks = match mask.resolution {
        Resolution::Pixel => mask.to_blocks(geometry.block_size_px as u32),
        Resolution::Block(_) => mask.clone(),
    };
    if blocks.width() != geometry.width_blocks || blocks.height() != geometry.height_blocks {
        return Err(Error::ShapeMismatch(format!(
            "mask of {}x{} blocks for a {}x{} field",
            blocks.width(),
            blocks.height(),
            geometry.width_blocks,
            geometry.height_blocks
        )));
    }
    Ok(blocks.bits.data)
}

pub(crate) fn write_geometry(w: &mut impl Write, g: FieldGeometry) -> Result<()> {
    for v in [g.width_blocks, g.height_blocks, g.block_size_px] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_geometry(r: &mut impl Read, path: &Path) -> Result<FieldGeometry> {
    let w = read_u32(r, path)? as usize;
    let h = read_u32(r, path)? as usize;
    let bs = read_u32(r, path)? as usize;
    if bs == 0 {
        return Err(Error::format(path, "block size 0"));
    }
    if w.saturating_mul(h) > 1 << 26 {
        return Err(Error::format(path, format!("implausible grid {w}x{h}")));
    }
    Ok(FieldGeometry::new(w, h, bs))
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8], path: &Path) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if buf != magic {
        return Err(Error::format(
            path,
            format!("bad magic, expected {}", String::from_utf8_lossy(magic)),
        ));
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format(path, "truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn write_f32s(w: &mut impl Write, v: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize, path: &Path) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(path, format!("payload shorter than {n} floats")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Proper 2-D rigid transform `p ↦ R·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix2<f64>,
    pub translation: Vector2<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix2::identity(),
            translation: Vector2::zeros(),
        }
    }

    pub fn from_angle(theta: f64, translation: Vector2<f64>) -> Self {
        let (s, c) = theta.sin_cos();
        Self {
            rotation: Matrix2::new(c, -s, s, c),
            translation,
        }
    }

    pub fn angle(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    #[inline]
    pub fn apply(&self, p: Point2<f64>) -> Point2<f64> {
        Point2::from(self.rotation * p.coords + self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }
}

/// Paired point sets: `source[i]` corresponds to `target[i]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCorrespondences {
    pub source: Vec<Point2<f64>>,
    pub target: Vec<Point2<f64>>,
}

impl PointCorrespondences {
    pub fn new(source: Vec<Point2<f64>>, target: Vec<Point2<f64>>) -> Result<Self> {
        if source.len() != target.len() {
            return Err(Error::LengthMismatch {
                expected: source.len(),
                got: target.len(),
            });
        }
        Ok(Self { source, target })
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Mean Euclidean residual `‖T(source) − target‖` under `t`.
    pub fn mean_residual(&self, t: &RigidTransform) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.source
            .iter()
            .zip(&self.target)
            .map(|(s, q)| (t.apply(*s) - q).norm())
            .sum::<f64>()
            / self.len() as f64
    }
}

/// Closed-form least-squares rigid fit mapping `source` onto `target`.
///
/// In 2-D the optimal rotation of the cross-covariance problem is
/// `atan2(Σ p×q, Σ p·q)` over centered points, which is always proper, so the
/// mirror branch never arises.
pub fn fit_rigid(corr: &PointCorrespondences) -> Result<RigidTransform> {
    let n = corr.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!(
            "rigid fit needs 2 pairs, got {n}"
        )));
    }
    if corr.source.len() != corr.target.len() {
        return Err(Error::LengthMismatch {
            expected: corr.source.len(),
            got: corr.target.len(),
        });
    }
    let inv = 1.0 / n as f64;
    let cs = corr.source.iter().fold(Vector2::zeros(), |a, p| a + p.coords) * inv;
    let ct = corr.target.iter().fold(Vector2::zeros(), |a, p| a + p.coords) * inv;
    let (mut dot, mut cross, mut spread) = (0.0, 0.0, 0.0);
    for (s, t) in corr.source.iter().zip(&corr.target) {
        let p = s.coords - cs;
        let q = t.coords - ct;
        dot += p.x * q.x + p.y * q.y;
        cross += p.x * q.y - p.y * q.x;
        spread += p.norm_squared();
    }
    let scale = corr
        .source
        .iter()
        .fold(0.0f64, |m, p| m.max(p.coords.norm()))
        .max(1.0);
    if spread <= 1e-20 * scale * scale {
        return Err(Error::DegenerateInput("all source points coincide".into()));
    }
    let theta = cross.atan2(dot);
    let mut t = RigidTransform::from_angle(theta, Vector2::zeros());
    t.translation = ct - t.rotation * cs;
    Ok(t)
}

/// A fitted thin-plate spline interpolating 2-D displacements.
#[derive(Clone, Debug)]
pub struct ThinPlateSpline {
    centers: Vec<Point2<f64>>,
    /// Kernel weights, one row per center, columns (x, y).
    weights: Vec<[f64; 2]>,
    /// Affine coefficients `[a0, ax, ay]` per output channel.
    affine: [[f64; 3]; 2],
}

#[inline]
fn tps_kernel(r2: f64) -> f64 {
    // r² log r = ½ r² log r²
    if r2 <= 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Default diagonal loading of the TPS kernel matrix.
pub const DEFAULT_TPS_REGULARIZATION: f64 = 1e-6;

impl ThinPlateSpline {
    /// Fit to the displacements `target − source` at the source points.
    pub fn fit(corr: &PointCorrespondences, regularization: f64) -> Result<Self> {
        let n = corr.len();
        if n < 3 {
            return Err(Error::SingularSystem(format!(
                "TPS needs at least 3 control points, got {n}"
            )));
        }
        if regularization < 0.0 || !regularization.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "regularization {regularization}"
            )));
        }
        check_spread(&corr.source)?;
        if regularization == 0.0 {
            for i in 0..n {
                for j in 0..i {
                    if (corr.source[i] - corr.source[j]).norm_squared() < 1e-18 {
                        return Err(Error::SingularSystem(format!(
                            "control points {j} and {i} coincide"
                        )));
                    }
                }
            }
        }
        let m = n + 3;
        let mut a = DMatrix::<f64>::zeros(m, m);
        let mut rhs = DMatrix::<f64>::zeros(m, 2);
        for i in 0..n {
            let pi = corr.source[i];
            for j in 0..n {
                a[(i, j)] = tps_kernel((pi - corr.source[j]).norm_squared());
            }
            a[(i, i)] += regularization;
            for (k, v) in [1.0, pi.x, pi.y].into_iter().enumerate() {
                a[(i, n + k)] = v;
                a[(n + k, i)] = v;
            }
            let d = corr.target[i] - pi;
            rhs[(i, 0)] = d.x;
            rhs[(i, 1)] = d.y;
        }
        let sol = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::SingularSystem("TPS system is singular".into()))?;
        if sol.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem("TPS solution is not finite".into()));
        }
        Ok(Self {
            centers: corr.source.clone(),
            weights: (0..n).map(|i| [sol[(i, 0)], sol[(i, 1)]]).collect(),
            affine: [
                [sol[(n, 0)], sol[(n + 1, 0)], sol[(n + 2, 0)]],
                [sol[(n, 1)], sol[(n + 1, 1)], sol[(n + 2, 1)]],
            ],
        })
    }

    pub fn evaluate(&self, p: Point2<f64>) -> Vector2<f64> {
        let mut out = Vector2::new(
            self.affine[0][0] + self.affine[0][1] * p.x + self.affine[0][2] * p.y,
            self.affine[1][0] + self.affine[1][1] * p.x + self.affine[1][2] * p.y,
        );
        for (c, w) in self.centers.iter().zip(&self.weights) {
            let u = tps_kernel((p - c).norm_squared());
            out.x += w[0] * u;
            out.y += w[1] * u;
        }
        out
    }

    /// Sample at block centers.
    pub fn to_field(&self, geometry: FieldGeometry) -> DistortionField {
        DistortionField::from_fn(geometry, |bx, by| {
            let d = self.evaluate(geometry.block_center(bx, by));
            (d.x, d.y)
        })
    }
}

fn check_spread(points: &[Point2<f64>]) -> Result<()> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector2::zeros(), |a, p| a + p.coords) / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let d = p.coords - c;
        sxx += d.x * d.x;
        sxy += d.x * d.y;
        syy += d.y * d.y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    // smallest eigenvalue of the scatter matrix, relative to its trace
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let lmin = 0.5 * (tr - disc);
    if tr <= 0.0 || lmin <= 1e-10 * tr || det <= 0.0 {
        return Err(Error::SingularSystem(
            "control points are collinear or coincident".into(),
        ));
    }
    Ok(())
}

/// Interpolate the correspondence displacements with a thin-plate spline and
/// sample the result at block centers.
pub fn fit_tps_field(
    corr: &PointCorrespondences,
    geometry: FieldGeometry,
    regularization: f64,
) -> Result<DistortionField> {
    Ok(ThinPlateSpline::fit(corr, regularization)?.to_field(geometry))
}

/// Block-center correspondences `(x, x + F(x))` for blocks selected by `mask`.
fn field_correspondences(field: &DistortionField, inside: &[bool]) -> PointCorrespondences {
    let g = field.geometry;
    let mut corr = PointCorrespondences::default();
    for by in 0..g.height_blocks {
        for bx in 0..g.width_blocks {
            if inside[by * g.width_blocks + bx] {
                let p2 = g.block_center(bx, by);
                corr.source.push(p2 + field.at(bx, by));
                corr.target.push(p2);
            }
        }
    }
    corr
}

/// Best rigid transform explaining the field inside the mask, as the map from
/// counterpart positions `x + F(x)` back to grid positions `x`.
pub fn field_rigid_part(field: &DistortionField, mask: Option<&Mask>) -> Result<RigidTransform> {
    let inside = block_selection(field.geometry, mask)?;
    let corr = field_correspondences(field, &inside);
    if corr.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "mask selects {} blocks, need at least 2",
            corr.len()
        )));
    }
    fit_rigid(&corr)
}

/// Remove the rigid (DC) part of a field: with `P₂ = x` and `P₁ = x + F(x)`,
/// fit `(R, t)` mapping `P₁` to `P₂` over the mask and return
/// `F̂(x) = (R·P₁ + t) − P₂` on every block.
pub fn remove_dc(field: &DistortionField, mask: &Mask) -> Result<DistortionField> {
    let rigid = field_rigid_part(field, Some(mask))?;
    let g = field.geometry;
    Ok(DistortionField::from_fn(g, |bx, by| {
        let p2 = g.block_center(bx, by);
        let p1 = p2 + field.at(bx, by);
        let d = rigid.apply(p1) - p2;
        (d.x, d.y)
    }))
}

/// Invert a field: returns `G` with `G(x + F(x)) = −F(x)`.
///
/// The forward map is sampled at every pixel, the negated displacements are
/// splatted bilinearly onto the block grid, and blocks that receive no weight
/// take the nearest covered value followed by a 3×3 mean over their
/// neighbourhood.
pub fn invert_field(field: &DistortionField, mask: Option<&Mask>) -> Result<DistortionField> {
    field.check_foldover(mask)?;
    let g = field.geometry;
    let (w, h) = (g.width_blocks, g.height_blocks);
    let (wp, hp) = (g.width_px(), g.height_px());
    // per-row partial accumulators, reduced in row order
    let rows = par::map_range(hp, |py| {
        let mut acc = vec![[0.0f64; 3]; w * h];
        for px in 0..wp {
            let d = field.sample(px as f64, py as f64);
            let (u, v) = g.to_block_coords(px as f64 + d.x, py as f64 + d.y);
            if u < -0.5 || v < -0.5 || u > w as f64 - 0.5 || v > h as f64 - 0.5 {
                continue;
            }
            let (x0, y0) = (u.floor(), v.floor());
            let (fx, fy) = (u - x0, v - y0);
            for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                    let (bx, by) = (x0 as i64 + ox, y0 as i64 + oy);
                    let wt = wx * wy;
                    if wt <= 0.0 || bx < 0 || by < 0 || bx >= w as i64 || by >= h as i64 {
                        continue;
                    }
                    let a = &mut acc[by as usize * w + bx as usize];
                    a[0] -= wt * d.x;
                    a[1] -= wt * d.y;
                    a[2] += wt;
                }
            }
        }
        acc
    });
    let mut acc = vec![[0.0f64; 3]; w * h];
    for row in rows {
        for (a, r) in acc.iter_mut().zip(row) {
            a[0] += r[0];
            a[1] += r[1];
            a[2] += r[2];
        }
    }
    let min_weight = 0.25 * (g.block_size_px * g.block_size_px) as f64 * 0.05;
    let valid: Vec<bool> = acc.iter().map(|a| a[2] > min_weight).collect();
    if !valid.iter().any(|&v| v) {
        return Err(Error::DegenerateInput(
            "forward map leaves the grid entirely".into(),
        ));
    }
    let mut out = DistortionField::zeros(g);
    for i in 0..w * h {
        if valid[i] {
            out.dx[i] = acc[i][0] / acc[i][2];
            out.dy[i] = acc[i][1] / acc[i][2];
        }
    }
    // nearest valid infill
    let covered: Vec<(usize, usize)> = (0..w * h)
        .filter(|&i| valid[i])
        .map(|i| (i % w, i / w))
        .collect();
    for i in 0..w * h {
        if valid[i] {
            continue;
        }
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        let &(nx, ny) = covered
            .iter()
            .min_by_key(|&&(cx, cy)| {
                let (dx, dy) = (cx as i64 - x, cy as i64 - y);
                (dx * dx + dy * dy, cy, cx)
            })
            .expect("at least one covered block");
        out.dx[i] = out.dx[ny * w + nx];
        out.dy[i] = out.dy[ny * w + nx];
    }
    let filled = out.clone();
    for i in 0..w * h {
        if valid[i] {
            continue;
        }
        let (x, y) = (i % w, i / w);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                sx += filled.dx[ny * w + nx];
                sy += filled.dy[ny * w + nx];
                n += 1.0;
            }
        }
        out.dx[i] = sx / n;
        out.dy[i] = sy / n;
    }
    Ok(out)
}

/// Displacement field at pixel resolution, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelField {
    pub width: usize,
    pub height: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl PixelField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            dx: vec![0.0; width * height],
            dy: vec![0.0; width * height],
        }
    }

    /// Mean displacement over each block.
    pub fn block_average(&self, block_size: usize) -> DistortionField {
        let g = FieldGeometry::new(self.width / block_size, self.height / block_size, block_size);
        DistortionField::from_fn(g, |bx, by| {
            let (mut sx, mut sy) = (0.0, 0.0);
            for y in by * block_size..(by + 1) * block_size {
                for x in bx * block_size..(bx + 1) * block_size {
                    sx += self.dx[y * self.width + x];
                    sy += self.dy[y * self.width + x];
                }
            }
            let n = (block_size * block_size) as f64;
            (sx / n, sy / n)
        })
    }
}

/// Bilinear upsampling from block centers to pixel centers, clamped at the
/// border.
pub fn upsample_field(
    field: &DistortionField,
    out_width_px: usize,
    out_height_px: usize,
) -> Result<PixelField> {
    let g = field.geometry;
    if out_width_px != g.width_px() || out_height_px != g.height_px() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} blocks of {} px cannot be upsampled to {out_width_px}x{out_height_px}",
            g.width_blocks, g.height_blocks, g.block_size_px
        )));
    }
    let rows = par::map_range(out_height_px, |y| {
        let mut dx = Vec::with_capacity(out_width_px);
        let mut dy = Vec::with_capacity(out_width_px);
        for x in 0..out_width_px {
            let d = field.sample(x as f64, y as f64);
            dx.push(d.x);
            dy.push(d.y);
        }
        (dx, dy)
    });
    let mut out = PixelField::zeros(out_width_px, out_height_px);
    for (y, (dx, dy)) in rows.into_iter().enumerate() {
        out.dx[y * out_width_px..(y + 1) * out_width_px].copy_from_slice(&dx);
        out.dy[y * out_width_px..(y + 1) * out_width_px].copy_from_slice(&dy);
    }
    Ok(out)
}

#[inline]
fn nearest(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Backward warp with nearest-neighbour sampling:
/// `out(x, y) = in(x + dx(x, y), y + dy(x, y))`, `fill` outside the input.
pub fn warp_image(image: &GrayImage, field: &PixelField, fill: u8) -> Result<GrayImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if field.width != w || field.height != h {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} field for a {w}x{h} image",
            field.width, field.height
        )));
    }
    let src = image.as_raw();
    let mut out = vec![fill; w * h];
    par::for_each_chunk_mut(&mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let i = y * w + x;
            let sx = nearest(x as f64 + field.dx[i]);
            let sy = nearest(y as f64 + field.dy[i]);
            if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                *o = src[sy as usize * w + sx as usize];
            }
        }
    });
    Ok(GrayImage::from_raw(w as u32, h as u32, out).expect("buffer size"))
}

/// Backward warp of a binary image, background outside.
pub fn warp_bits(bits: &BitImage, field: &PixelField) -> Result<BitImage> {
    if field.width != bits.width || field.height != bits.height {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} field for a {}x{} mask",
            field.width, field.height, bits.width, bits.height
        )));
    }
    Ok(BitImage::from_fn(bits.width, bits.height, |x, y| {
        let i = y * bits.width + x;
        bits.get_signed(
            nearest(x as f64 + field.dx[i]),
            nearest(y as f64 + field.dy[i]),
        )
    }))
}

/// Resample an image under a rigid map: `out(p) = in(T⁻¹(p))`.
pub fn warp_rigid(image: &GrayImage, transform: &RigidTransform, fill: u8) -> GrayImage {
    let inv = transform.inverse();
    let (w, h) = (image.width() as i64, image.height() as i64);
    GrayImage::from_fn(image.width(), image.height(), |x, y| {
        let q = inv.apply(Point2::new(x as f64, y as f64));
        let (sx, sy) = (nearest(q.x), nearest(q.y));
        if sx >= 0 && sy >= 0 && sx < w && sy < h {
            *image.get_pixel(sx as u32, sy as u32)
        } else {
            Luma([fill])
        }
    })
}

/// Rectify an image given its field towards the rectification target:
/// `out(y) = in(y + G(y))` with `G` the inverse of `field`.
pub fn rectify_image(
    image: &GrayImage,
    field: &DistortionField,
    mask: Option<&Mask>,
    fill: u8,
) -> Result<GrayImage> {
    let inverse = invert_field(field, mask)?;
    let up = upsample_field(&inverse, image.width() as usize, image.height() as usize)?;
    warp_image(image, &up, fill)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[(f64, f64)]) -> Vec<Point2<f64>> {
        v.iter().map(|&(x, y)| Point2::new(x, y)).collect()
    }

    /// Smooth field from a few low-frequency sinusoids, amplitude ≤ `amp`.
    pub(crate) fn smooth_field(g: FieldGeometry, amp: f64, seed: u64) -> DistortionField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let terms: Vec<[f64; 6]> = (0..3)
            .map(|_| {
                [
                    rng.random_range(0.3..1.2),
                    rng.random_range(0.3..1.2),
                    rng.random_range(0.0..6.3),
                    rng.random_range(0.0..6.3),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]
            })
            .collect();
        let (wp, hp) = (g.width_px() as f64, g.height_px() as f64);
        DistortionField::from_fn(g, |bx, by| {
            let c = g.block_center(bx, by);
            let (u, v) = (c.x / wp * std::f64::consts::TAU, c.y / hp * std::f64::consts::TAU);
            let mut d = (0.0, 0.0);
            for t in &terms {
                let s = (t[0] * u + t[2]).sin() * (t[1] * v + t[3]).cos();
                d.0 += amp / 3.0 * t[4] * s;
                d.1 += amp / 3.0 * t[5] * (t[1] * u - t[3]).cos();
            }
            d
        })
    }

    #[test]
    fn rigid_identity_and_translation() {
        let src = pts(&[(0.0, 0.0), (10.0, 0.0), (3.0, 7.0)]);
        let t = fit_rigid(&PointCorrespondences::new(src.clone(), src.clone()).unwrap()).unwrap();
        assert_abs_diff_eq!(t.rotation, Matrix2::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.translation, Vector2::zeros(), epsilon = 1e-12);

        let dst: Vec<_> = src.iter().map(|p| p + Vector2::new(5.0, 0.0)).collect();
        let t = fit_rigid(&PointCorrespondences::new(src, dst).unwrap()).unwrap();
        assert_abs_diff_eq!(t.rotation, Matrix2::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(t.translation, Vector2::new(5.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn rigid_angle_matches_brute_force_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let src: Vec<_> = (0..5)
            .map(|_| Point2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)))
            .collect();
        let theta_true = 0.7318;
        let truth = RigidTransform::from_angle(theta_true, Vector2::zeros());
        let dst: Vec<_> = src.iter().map(|p| truth.apply(*p)).collect();
        let corr = PointCorrespondences::new(src.clone(), dst.clone()).unwrap();
        let fitted = fit_rigid(&corr).unwrap();
        assert!((fitted.angle() - theta_true).abs() < 1e-9);

        // brute force over rotation angle on a 1e-5 grid; translation is
        // centroid-optimal for each angle
        let n = src.len() as f64;
        let cs = src.iter().fold(Vector2::zeros(), |a, p| a + p.coords) / n;
        let ct = dst.iter().fold(Vector2::zeros(), |a, p| a + p.coords) / n;
        let cost = |th: f64| {
            let r = RigidTransform::from_angle(th, Vector2::zeros());
            let t = RigidTransform {
                translation: ct - r.rotation * cs,
                ..r
            };
            corr.mean_residual(&t)
        };
        let steps = (2.0 * std::f64::consts::PI / 1e-5) as usize;
        let (mut best, mut best_cost) = (0.0, f64::INFINITY);
        for k in 0..steps {
            let th = -std::f64::consts::PI + k as f64 * 1e-5;
            let c = cost(th);
            if c < best_cost {
                best_cost = c;
                best = th;
            }
        }
        assert!((best - fitted.angle()).abs() <= 1e-5);
        assert!(cost(fitted.angle()) <= best_cost + 1e-12);
    }

    #[test]
    fn rigid_rejects_coincident_sources() {
        let src = pts(&[(1.0, 1.0), (1.0, 1.0), (1.0, 1.0)]);
        let dst = pts(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        assert!(matches!(
            fit_rigid(&PointCorrespondences::new(src, dst).unwrap()),
            Err(Error::DegenerateInput(_))
        ));
    }

    proptest! {
        #[test]
        fn rigid_recovers_any_proper_transform(
            theta in -3.1f64..3.1,
            tx in -100.0f64..100.0,
            ty in -100.0f64..100.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src: Vec<_> = (0..6)
                .map(|_| Point2::new(rng.random_range(-200.0..200.0), rng.random_range(-200.0..200.0)))
                .collect();
            let truth = RigidTransform::from_angle(theta, Vector2::new(tx, ty));
            let dst = src.iter().map(|p| truth.apply(*p)).collect();
            let t = fit_rigid(&PointCorrespondences::new(src, dst).unwrap()).unwrap();
            prop_assert!((t.rotation - truth.rotation).abs().max() < 1e-9);
            prop_assert!((t.translation - truth.translation).abs().max() < 1e-9);
            prop_assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn tps_reproduces_controls(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src: Vec<_> = (0..6)
                .map(|_| Point2::new(rng.random_range(0.0..512.0), rng.random_range(0.0..512.0)))
                .collect();
            let dst: Vec<_> = src
                .iter()
                .map(|p| p + Vector2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
                .collect();
            let corr = PointCorrespondences::new(src, dst).unwrap();
            match ThinPlateSpline::fit(&corr, 0.0) {
                Ok(tps) => {
                    for (s, t) in corr.source.iter().zip(&corr.target) {
                        prop_assert!((tps.evaluate(*s) - (t - s)).norm() < 1e-6);
                    }
                }
                Err(Error::SingularSystem(_)) => {} // nearly collinear draw
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }

    #[test]
    fn tps_zero_and_constant() {
        let g = FieldGeometry::new(8, 8, 16);
        let src = pts(&[(10.0, 10.0), (100.0, 20.0), (40.0, 90.0)]);
        let f = fit_tps_field(&PointCorrespondences::new(src.clone(), src).unwrap(), g, 0.0).unwrap();
        assert!(f.max_abs() < 1e-12);

        let src = pts(&[(10.0, 10.0), (100.0, 20.0), (40.0, 90.0), (80.0, 110.0)]);
        let dst = src.iter().map(|p| p + Vector2::new(3.0, -2.0)).collect();
        let f = fit_tps_field(&PointCorrespondences::new(src, dst).unwrap(), g, 0.0).unwrap();
        for i in 0..g.len() {
            assert_abs_diff_eq!(f.dx[i], 3.0, epsilon = 1e-9);
            assert_abs_diff_eq!(f.dy[i], -2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn tps_exact_at_block_centers() {
        let g = FieldGeometry::new(8, 8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blocks = [(1, 1), (6, 2), (3, 5), (7, 7), (0, 6), (4, 3)];
        let src: Vec<_> = blocks.iter().map(|&(x, y)| g.block_center(x, y)).collect();
        let disp: Vec<Vector2<f64>> = (0..6)
            .map(|_| Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let dst = src.iter().zip(&disp).map(|(p, d)| p + d).collect();
        let f = fit_tps_field(&PointCorrespondences::new(src, dst).unwrap(), g, 0.0).unwrap();
        for (&(x, y), d) in blocks.iter().zip(&disp) {
            assert!((f.at(x, y) - d).norm() < 1e-6);
        }
    }

    #[test]
    fn tps_rejects_collinear() {
        let src = pts(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (5.0, 5.0)]);
        let corr = PointCorrespondences::new(src.clone(), src).unwrap();
        assert!(matches!(
            ThinPlateSpline::fit(&corr, 0.0),
            Err(Error::SingularSystem(_))
        ));
    }

    fn full_mask(g: FieldGeometry) -> Mask {
        Mask::block(BitImage::filled(g.width_blocks, g.height_blocks, true), g.block_size_px as u32)
    }

    #[test]
    fn remove_dc_translation_and_zero() {
        let g = FieldGeometry::new(16, 16, 16);
        let m = full_mask(g);
        let f = remove_dc(&DistortionField::constant(g, 4.0, 4.0), &m).unwrap();
        assert!(f.max_abs() <= 1e-6);
        let f = remove_dc(&DistortionField::zeros(g), &m).unwrap();
        assert!(f.max_abs() <= 1e-9);
    }

    #[test]
    fn remove_dc_rotation_plus_bump() {
        let g = FieldGeometry::new(16, 16, 16);
        let m = full_mask(g);
        let c = Point2::new(127.5, 127.5);
        let rot = RigidTransform::from_angle(0.03, Vector2::zeros());
        let field = DistortionField::from_fn(g, |bx, by| {
            let p = g.block_center(bx, by);
            let r = Point2::from(rot.rotation * (p - c)) + c.coords;
            let bump = 3.0 * (-((p - Point2::new(60.0, 190.0)).norm_squared()) / 800.0).exp();
            let d = r - p;
            (d.x + bump, d.y)
        });
        let out = remove_dc(&field, &m).unwrap();
        let refit = field_rigid_part(&out, Some(&m)).unwrap();
        assert!(refit.translation.norm() <= 1e-6);
        assert!(refit.angle().abs() <= 1e-8);
        // the bump survives in the residual
        let peak = out.at(3, 11); // block center (55.5, 183.5)
        let ref_pt = out.at(14, 1);
        assert!(peak.x - ref_pt.x > 2.0, "bump lost: {peak:?} vs {ref_pt:?}");
    }

    #[test]
    fn remove_dc_needs_two_blocks() {
        let g = FieldGeometry::new(4, 4, 16);
        let mut bits = BitImage::new(4, 4);
        bits.set(1, 1, true);
        let m = Mask::block(bits, 16);
        assert!(matches!(
            remove_dc(&DistortionField::zeros(g), &m),
            Err(Error::DegenerateInput(_))
        ));
    }

    proptest! {
        #[test]
        fn remove_dc_is_idempotent(seed in 0u64..200, amp in 0.5f64..10.0) {
            let g = FieldGeometry::new(12, 10, 16);
            let mut f = smooth_field(g, amp, seed);
            let rot = RigidTransform::from_angle(0.02 * amp, Vector2::new(amp, -amp));
            for by in 0..g.height_blocks {
                for bx in 0..g.width_blocks {
                    let p = g.block_center(bx, by);
                    let d = rot.apply(p) - p;
                    let i = by * g.width_blocks + bx;
                    f.dx[i] += d.x;
                    f.dy[i] += d.y;
                }
            }
            let m = full_mask(g);
            let once = remove_dc(&f, &m).unwrap();
            let twice = remove_dc(&once, &m).unwrap();
            for i in 0..g.len() {
                prop_assert!((once.dx[i] - twice.dx[i]).abs() < 1e-9);
                prop_assert!((once.dy[i] - twice.dy[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn invert_zero_and_constant() {
        let g = FieldGeometry::new(8, 8, 16);
        let inv = invert_field(&DistortionField::zeros(g), None).unwrap();
        assert!(inv.max_abs() < 1e-12);
        let inv = invert_field(&DistortionField::constant(g, 3.0, -5.0), None).unwrap();
        for i in 0..g.len() {
            assert_abs_diff_eq!(inv.dx[i], -3.0, epsilon = 1e-9);
            assert_abs_diff_eq!(inv.dy[i], 5.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn invert_twice_is_identity_on_interior() {
        let g = FieldGeometry::new(32, 32, 16);
        for seed in 0..4 {
            let f = smooth_field(g, 8.0, seed);
            let back = invert_field(&invert_field(&f, None).unwrap(), None).unwrap();
            let mut worst = 0.0f64;
            for by in 2..30 {
                for bx in 2..30 {
                    worst = worst.max((back.at(bx, by) - f.at(bx, by)).abs().max());
                }
            }
            assert!(worst <= 0.5, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn invert_round_trip_displacement() {
        let g = FieldGeometry::new(32, 32, 16);
        let f = smooth_field(g, 8.0, 42);
        let inv = invert_field(&f, None).unwrap();
        let (mut good, mut total) = (0, 0);
        for y in (64..448).step_by(3) {
            for x in (64..448).step_by(3) {
                // warp(warp(img, f), inv)(x) = img(x + inv(x) + f(x + inv(x)))
                let p = Point2::new(x as f64, y as f64);
                let q = p + inv.sample(p.x, p.y);
                let err = (q + f.sample(q.x, q.y) - p).norm();
                total += 1;
                good += (err <= 2.0) as usize;
            }
        }
        assert!(good as f64 >= 0.95 * total as f64);
    }

    #[test]
    fn invert_detects_foldover() {
        let g = FieldGeometry::new(8, 8, 16);
        // x ↦ x − 2x: reversed orientation everywhere
        let f = DistortionField::from_fn(g, |bx, by| {
            let c = g.block_center(bx, by);
            (-2.0 * (c.x - 64.0), 0.0 * by as f64)
        });
        assert!(matches!(
            invert_field(&f, None),
            Err(Error::FoldoverDetected { .. })
        ));
    }

    #[test]
    fn upsample_constant_and_ramp() {
        let g = FieldGeometry::new(4, 4, 16);
        let up = upsample_field(&DistortionField::constant(g, 1.5, -2.0), 64, 64).unwrap();
        assert!(up.dx.iter().all(|&v| v == 1.5));
        assert!(up.dy.iter().all(|&v| v == -2.0));

        let ramp = DistortionField::from_fn(g, |bx, by| {
            let c = g.block_center(bx, by);
            (0.25 * c.x - 3.0, 0.5 * c.y)
        });
        let up = upsample_field(&ramp, 64, 64).unwrap();
        let lo = g.block_center(0, 0).x;
        let hi = g.block_center(3, 3).x;
        for y in 0..64 {
            for x in 0..64 {
                let (cx, cy) = ((x as f64).clamp(lo, hi), (y as f64).clamp(lo, hi));
                assert_abs_diff_eq!(up.dx[y * 64 + x], 0.25 * cx - 3.0, epsilon = 1e-12);
                assert_abs_diff_eq!(up.dy[y * 64 + x], 0.5 * cy, epsilon = 1e-12);
            }
        }
        assert!(upsample_field(&ramp, 60, 64).is_err());
    }

    #[test]
    fn upsample_then_block_average() {
        let g = FieldGeometry::new(32, 32, 16);
        let f = smooth_field(g, 8.0, 7);
        let back = upsample_field(&f, 512, 512).unwrap().block_average(16);
        for i in 0..g.len() {
            assert!((back.dx[i] - f.dx[i]).abs() <= 0.25);
            assert!((back.dy[i] - f.dy[i]).abs() <= 0.25);
        }
    }

    fn noise_image(w: u32, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, w, |_, _| Luma([rng.random()]))
    }

    #[test]
    fn warp_identity_and_shift() {
        let img = noise_image(64, 1);
        let out = warp_image(&img, &PixelField::zeros(64, 64), 0).unwrap();
        assert_eq!(out, img);

        let mut shift = PixelField::zeros(64, 64);
        shift.dx.iter_mut().for_each(|v| *v = 10.0);
        let out = warp_image(&img, &shift, 7).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                let expect = if x + 10 < 64 {
                    img.get_pixel(x + 10, y)[0]
                } else {
                    7
                };
                assert_eq!(out.get_pixel(x, y)[0], expect);
            }
        }
    }

    #[test]
    fn warp_grating_phase() {
        // vertical grating of period 10 px; analytic warp compares the phase at
        // which each output pixel samples the input
        let period = 10.0;
        let w = 256;
        let img = GrayImage::from_fn(w, w, |x, _| {
            Luma([(127.5 + 127.5 * (std::f64::consts::TAU * x as f64 / period).cos()) as u8])
        });
        let g = FieldGeometry::new(16, 16, 16);
        let f = smooth_field(g, 6.0, 5);
        let up = upsample_field(&f, 256, 256).unwrap();
        let out = warp_image(&img, &up, 0).unwrap();
        let mut errs = Vec::new();
        for y in 0..w as usize {
            for x in 0..w as usize {
                let i = y * w as usize + x;
                let sx = x as f64 + up.dx[i];
                let sy = y as f64 + up.dy[i];
                if sx < 0.0 || sy < 0.0 || sx > 255.0 || sy > 255.0 {
                    continue;
                }
                // nearest sampled column vs analytic continuous column
                let col = out.get_pixel(x as u32, y as u32)[0];
                let expect_col = (sx + 0.5).floor();
                let expect = img.get_pixel(expect_col as u32, 0)[0];
                assert_eq!(col, expect);
                errs.push((expect_col - sx).abs());
            }
        }
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(errs[(errs.len() as f64 * 0.95) as usize] <= 1.0);
    }

    #[test]
    fn dfld_round_trip_is_bit_exact() {
        let g = FieldGeometry::new(5, 3, 16);
        let f = smooth_field(g, 4.0, 9);
        let mut a = Vec::new();
        f.write_to(&mut a).unwrap();
        let back = DistortionField::read_from(a.as_slice(), Path::new("mem")).unwrap();
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert_eq!(&a[..5], b"DFLD1");
        assert_eq!(a.len(), 5 + 12 + 2 * 15 * 4);
        assert!(DistortionField::read_from(&a[..20], Path::new("mem")).is_err());
    }

    #[test]
    fn map_point_inverse_solves() {
        let g = FieldGeometry::new(16, 16, 16);
        let f = smooth_field(g, 6.0, 2);
        let q = Point2::new(100.0, 140.0);
        let z = f.map_point_inverse(q);
        assert!((f.map_point(z) - q).norm() < 1e-8);
    }
}
