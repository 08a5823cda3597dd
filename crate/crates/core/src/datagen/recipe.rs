use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pca::{PcaDistortionModel, DEFAULT_COEFF_MAX};
use crate::preprocess::PreprocessMode;

/// How normal impressions are multiplied into distorted training pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecipe {
    pub images_per_finger: usize,
    pub mirror: bool,
    /// Counter-clockwise, multiples of 90, identity included explicitly.
    pub rotations_deg: Vec<u32>,
    pub fields_per_image: usize,
    /// Coefficients are drawn uniformly from `[-coeff_max, coeff_max]`.
    pub coeff_max: f64,
    pub mode: PreprocessMode,
    pub seed: u64,
}

impl Default for GenerationRecipe {
    fn default() -> Self {
        Self {
            images_per_finger: 5,
            mirror: true,
            rotations_deg: vec![0, 90, 180, 270],
            fields_per_image: 5,
            coeff_max: DEFAULT_COEFF_MAX,
            mode: PreprocessMode::Thin,
            seed: 0,
        }
    }
}

impl GenerationRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.images_per_finger == 0 || self.fields_per_image == 0 {
            return bad("images_per_finger and fields_per_image must be at least 1".into());
        }
        if self.rotations_deg.is_empty() {
            return bad("rotations_deg is empty".into());
        }
        for (i, r) in self.rotations_deg.iter().enumerate() {
            if r % 90 != 0 || *r >= 360 {
                return bad(format!("rotation {r} is not one of 0, 90, 180, 270"));
            }
            if self.rotations_deg[..i].contains(r) {
                return bad(format!("rotation {r} listed twice"));
            }
        }
        if !(self.coeff_max.is_finite() && self.coeff_max > 0.0) {
            return bad(format!("coeff_max {} must be positive", self.coeff_max));
        }
        Ok(())
    }

    /// Augmented copies per source image.
    pub fn augment_factor(&self) -> usize {
        (1 + self.mirror as usize) * self.rotations_deg.len()
    }

    /// Distorted samples per finger.
    pub fn samples_per_finger(&self) -> usize {
        self.images_per_finger * self.augment_factor() * self.fields_per_image
    }

    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let rot: Vec<String> = self.rotations_deg.iter().map(u32::to_string).collect();
        let mut s = String::new();
        let _ = writeln!(s, "images_per_finger = {}", self.images_per_finger);
        let _ = writeln!(s, "mirror = {}", self.mirror);
        let _ = writeln!(s, "rotations_deg = {}", rot.join(","));
        let _ = writeln!(s, "fields_per_image = {}", self.fields_per_image);
        let _ = writeln!(s, "coeff_max = {}", self.coeff_max);
        let _ = writeln!(s, "mode = {}", self.mode);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }

    /// Keys missing from `text` keep their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut r = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: String| Error::format(path, format!("line {}: {what}", n + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad("expected `key = value`".into()))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| bad(format!("{key}: bad integer {v:?}")));
            match key {
                "images_per_finger" => r.images_per_finger = num(value)? as usize,
                "fields_per_image" => r.fields_per_image = num(value)? as usize,
                "seed" => r.seed = num(value)?,
                "mirror" => {
                    r.mirror = value.parse().map_err(|_| bad(format!("mirror: bad flag {value:?}")))?
                }
                "coeff_max" => {
                    r.coeff_max = value.parse().map_err(|_| bad(format!("coeff_max: bad number {value:?}")))?
                }
                "mode" => r.mode = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "rotations_deg" => {
                    r.rotations_deg = value
                        .split(',')
                        .map(|v| num(v.trim()).map(|x| x as u32))
                        .collect::<Result<_>>()?
                }
                _ => return Err(bad(format!("unknown key {key:?}"))),
            }
        }
        r.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Hex SHA-256 over the recipe text and the serialized model.
    pub fn hash(&self, model: &PcaDistortionModel) -> Result<String> {
        let mut bytes = self.to_text().into_bytes();
        model.write_to(&mut bytes)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// Seed for one generation step, derived from the recipe seed and a label.
pub(crate) fn derive_seed(seed: u64, label: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}/{label}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("digest is 32 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_multiply_out() {
        let r = GenerationRecipe::default();
        assert_eq!(r.augment_factor(), 8);
        assert_eq!(r.samples_per_finger(), 5 * 2 * 4 * 5);
        // validation fingers
        assert_eq!(127 * r.samples_per_finger(), 25_400);
        // training fingers: the stated total is 111,800, 200 more than this
        assert_eq!(558 * r.samples_per_finger(), 111_600);
    }

    #[test]
    fn text_round_trip() {
        let r = GenerationRecipe {
            images_per_finger: 2,
            mirror: false,
            rotations_deg: vec![0, 180],
            fields_per_image: 3,
            coeff_max: 1.5,
            mode: PreprocessMode::Binarize,
            seed: 42,
        };
        let p = Path::new("r.txt");
        assert_eq!(GenerationRecipe::parse(&r.to_text(), p).unwrap(), r);
        assert_eq!(GenerationRecipe::parse("# defaults\n", p).unwrap(), GenerationRecipe::default());
        assert!(GenerationRecipe::parse("rotations_deg = 0,45\n", p).is_err());
        assert!(GenerationRecipe::parse("rotations_deg = 0,0\n", p).is_err());
        assert!(GenerationRecipe::parse("fields_per_image = 0\n", p).is_err());
        assert!(GenerationRecipe::parse("colour = red\n", p).is_err());
        assert!(GenerationRecipe::parse("seed 3\n", p).is_err());
    }

    #[test]
    fn derived_seeds_differ_and_repeat() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }
}
