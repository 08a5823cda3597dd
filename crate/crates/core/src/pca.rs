//! Statistical deformation model: PCA over flattened displacement fields and
//! random synthesis `F = F₀ + Σ cᵢ √λᵢ Eᵢ`.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{
    expect_magic, read_f32s, read_geometry, read_u32, write_f32s, write_geometry, DistortionField,
    FieldGeometry,
};

/// Number of retained components used for synthesis by default.
pub const DEFAULT_COMPONENTS: usize = 8;
/// Default bound on synthesis coefficients.
pub const DEFAULT_COEFF_MAX: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaDistortionModel {
    pub mean: DistortionField,
    /// Descending, non-negative.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal when flattened as `dx ‖ dy`.
    pub components: Vec<DistortionField>,
}

/// Synthesis coefficients in units of component standard deviations.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentCoefficients(pub Vec<f64>);

impl ComponentCoefficients {
    pub fn new(values: Vec<f64>, c_max: f64) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > c_max) {
            return Err(Error::InvalidArgument(format!(
                "coefficient {v} outside [-{c_max}, {c_max}]"
            )));
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// I.i.d. `Uniform(−c_max, c_max)` coefficients, deterministic in the seed.
pub fn sample_coefficients(seed: u64, t: usize, c_max: f64) -> Result<ComponentCoefficients> {
    if t == 0 || c_max <= 0.0 || !c_max.is_finite() {
        return Err(Error::InvalidArgument(format!("t = {t}, c_max = {c_max}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ComponentCoefficients(
        (0..t).map(|_| rng.random_range(-c_max..=c_max)).collect(),
    ))
}

impl PcaDistortionModel {
    /// Fit mean and the top `num_components` principal directions of the
    /// sample covariance (normalised by N − 1).
    pub fn fit(samples: &[DistortionField], num_components: usize) -> Result<Self> {
        let n = samples.len();
        if num_components == 0 {
            return Err(Error::InvalidArgument("num_components must be ≥ 1".into()));
        }
        if n < num_components + 1 {
            return Err(Error::InsufficientSamples {
                needed: num_components + 1,
                got: n,
            });
        }
        let geometry = samples[0].geometry;
        if let Some(bad) = samples.iter().find(|s| s.geometry != geometry) {
            return Err(Error::ShapeMismatch(format!(
                "sample grid {:?} differs from {:?}",
                bad.geometry, geometry
            )));
        }
        let d = 2 * geometry.len();
        if num_components > d {
            return Err(Error::InvalidArgument(format!(
                "{num_components} components for dimension {d}"
            )));
        }
        let rows: Vec<Vec<f64>> = samples.iter().map(DistortionField::to_vector).collect();
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
        let denom = (n - 1) as f64;

        let (mut eigenvalues, mut vectors): (Vec<f64>, Vec<DVector<f64>>) = if n <= d {
            let gram = (&x * x.transpose()) / denom;
            let eig = SymmetricEigen::new(gram);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let mut vals = Vec::new();
            let mut vecs = Vec::new();
            for &k in order.iter().take(num_components) {
                let lambda = eig.eigenvalues[k].max(0.0);
                let v = x.transpose() * eig.eigenvectors.column(k);
                let norm = v.norm();
                let scale = x.norm().max(1.0);
                if lambda > 1e-12 * scale * scale && norm > 0.0 {
                    vals.push(lambda);
                    vecs.push(v / norm);
                } else {
                    vals.push(0.0);
                }
            }
            (vals, vecs)
        } else {
            let cov = (x.transpose() * &x) / denom;
            let eig = SymmetricEigen::new(cov);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let vals = order
                .iter()
                .take(num_components)
                .map(|&k| eig.eigenvalues[k].max(0.0))
                .collect();
            let vecs = order
                .iter()
                .take(num_components)
                .map(|&k| eig.eigenvectors.column(k).into_owned())
                .collect();
            (vals, vecs)
        };
        // directions for null eigenvalues: complete the basis
        let mut e = 0;
        while vectors.len() < num_components {
            let mut v = DVector::<f64>::zeros(d);
            v[e % d] = 1.0;
            e += 1;
            for u in &vectors {
                let p = u.dot(&v);
                v -= u * p;
            }
            let norm = v.norm();
            if norm > 1e-6 {
                vectors.push(v / norm);
            }
        }
        eigenvalues.truncate(num_components);
        let components = vectors
            .into_iter()
            .map(|v| DistortionField::from_vector(geometry, v.as_slice()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mean: DistortionField::from_vector(geometry, &mean)?,
            eigenvalues,
            components,
        })
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn geometry(&self) -> FieldGeometry {
        self.mean.geometry
    }

    /// `F₀ + Σ cᵢ √λᵢ Eᵢ`.
    pub fn synthesize(&self, coeffs: &ComponentCoefficients) -> Result<DistortionField> {
        if coeffs.len() != self.num_components() {
            return Err(Error::LengthMismatch {
                expected: self.num_components(),
                got: coeffs.len(),
            });
        }
        let mut out = self.mean.clone();
        for ((c, lambda), comp) in coeffs.0.iter().zip(&self.eigenvalues).zip(&self.components) {
            let s = c * lambda.sqrt();
            for (o, v) in out.dx.iter_mut().zip(&comp.dx) {
                *o += s * v;
            }
            for (o, v) in out.dy.iter_mut().zip(&comp.dy) {
                *o += s * v;
            }
        }
        Ok(out)
    }

    /// Inner products `⟨F − F₀, Eᵢ⟩`.
    pub fn project(&self, field: &DistortionField) -> Result<Vec<f64>> {
        if field.geometry != self.geometry() {
            return Err(Error::ShapeMismatch("field grid differs from model".into()));
        }
        Ok(self
            .components
            .iter()
            .map(|c| {
                let mut s = 0.0;
                for i in 0..field.dx.len() {
                    s += (field.dx[i] - self.mean.dx[i]) * c.dx[i];
                    s += (field.dy[i] - self.mean.dy[i]) * c.dy[i];
                }
                s
            })
            .collect())
    }

    /// `F₀ + Σ pᵢ Eᵢ` from raw projections.
    pub fn reconstruct(&self, projections: &[f64]) -> Result<DistortionField> {
        if projections.len() != self.num_components() {
            return Err(Error::LengthMismatch {
                expected: self.num_components(),
                got: projections.len(),
            });
        }
        let mut out = self.mean.clone();
        for (p, comp) in projections.iter().zip(&self.components) {
            for (o, v) in out.dx.iter_mut().zip(&comp.dx) {
                *o += p * v;
            }
            for (o, v) in out.dy.iter_mut().zip(&comp.dy) {
                *o += p * v;
            }
        }
        Ok(out)
    }

    /// Prefix sums of `λᵢ / Σλ` over the retained components.
    pub fn cumulative_variance(&self) -> Result<Vec<f64>> {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroVariance);
        }
        let mut acc = 0.0;
        Ok(self
            .eigenvalues
            .iter()
            .map(|l| {
                acc += l;
                (acc / total).min(1.0)
            })
            .collect())
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(b"DPCA1")?;
        write_geometry(&mut w, self.geometry())?;
        w.write_all(&(self.num_components() as u32).to_le_bytes())?;
        write_f32s(&mut w, &self.mean.to_vector())?;
        write_f32s(&mut w, &self.eigenvalues)?;
        for c in &self.components {
            write_f32s(&mut w, &c.to_vector())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read, path: &Path) -> Result<Self> {
        expect_magic(&mut r, b"DPCA1", path)?;
        let g = read_geometry(&mut r, path)?;
        let t = read_u32(&mut r, path)? as usize;
        if t == 0 || t > 2 * g.len() {
            return Err(Error::format(path, format!("implausible component count {t}")));
        }
        let d = 2 * g.len();
        let fmt = |e: Error| Error::format(path, e.to_string());
        let mean = DistortionField::from_vector(g, &read_f32s(&mut r, d, path)?).map_err(fmt)?;
        let eigenvalues = read_f32s(&mut r, t, path)?;
        let components = (0..t)
            .map(|_| DistortionField::from_vector(g, &read_f32s(&mut r, d, path)?).map_err(fmt))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mean,
            eigenvalues,
            components,
        })
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
