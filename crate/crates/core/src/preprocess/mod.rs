//! Ridge-image preprocessing: Gabor enhancement, adaptive binarization,
//! thinning, gradient segmentation and mask-centroid centering.

mod binarize;
mod enhance;
mod segment;
mod thin;

use std::fmt;
use std::str::FromStr;

use image::GrayImage;

pub use binarize::binarize;
pub use enhance::enhance;
#[cfg(test)]
pub(crate) use segment::erode;
pub use segment::segment;
pub use thin::thin;

use crate::error::{Error, Result};
use crate::raster::{shift_gray, BitImage, Mask, Resolution};

/// Which intermediate the network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PreprocessMode {
    Enhance,
    Binarize,
    #[default]
    Thin,
}

impl fmt::Display for PreprocessMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Enhance => "enhance",
            Self::Binarize => "binarize",
            Self::Thin => "thin",
        })
    }
}

impl FromStr for PreprocessMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enhance" => Ok(Self::Enhance),
            "binarize" => Ok(Self::Binarize),
            "thin" => Ok(Self::Thin),
            _ => Err(Error::InvalidArgument(format!("unknown preprocessing mode {s:?}"))),
        }
    }
}

/// Centered network input. `image` holds dark ridges on white: the skeleton
/// in thinning mode, the binary or enhanced image otherwise.
#[derive(Debug, Clone)]
pub struct PreprocessedSample {
    pub image: GrayImage,
    /// Centered enhanced image the other modes are rendered from.
    pub enhanced: GrayImage,
    pub mask: Mask,
    /// Translation applied to reach the centered frame, pixels.
    pub centering_offset: (i64, i64),
}

/// Offset that moves the mask centroid onto the image center.
pub fn centering_offset(mask: &Mask) -> Result<(i64, i64)> {
    let (cx, cy) = mask.bits.centroid().ok_or(Error::EmptyForeground)?;
    let scale = match mask.resolution {
        Resolution::Pixel => 1.0,
        Resolution::Block(b) => b as f64,
    };
    let centre = |n: usize| (n as f64 - 1.0) / 2.0;
    Ok((
        (centre(mask.width()) - cx).round() as i64 * scale as i64,
        (centre(mask.height()) - cy).round() as i64 * scale as i64,
    ))
}

/// Translate image and pixel mask so the mask centroid sits at the image
/// center. Uncovered image area is white.
pub fn center(image: &GrayImage, mask: &Mask) -> Result<PreprocessedSample> {
    if mask.resolution != Resolution::Pixel {
        return Err(Error::InvalidArgument("centering needs a pixel-resolution mask".into()));
    }
    crate::raster::check_same_size(
        (image.width() as usize, image.height() as usize),
        (mask.width(), mask.height()),
        "image and mask",
    )?;
    let (dx, dy) = centering_offset(mask)?;
    let image = shift_gray(image, dx, dy, 255);
    Ok(PreprocessedSample {
        enhanced: image.clone(),
        image,
        mask: Mask::pixel(mask.bits.shifted(dx, dy)),
        centering_offset: (dx, dy),
    })
}

/// Pixels of the mask rim discarded before thinning.
pub const RIM_WIDTH: usize = 4;

/// Binary ridges of an enhanced image, clipped to the mask minus its rim.
pub fn ridges(enhanced: &GrayImage, mask: &BitImage) -> BitImage {
    // the low-contrast rim along the contact boundary yields spurious ridges
    let core = segment::erode(mask, RIM_WIDTH);
    let mut b = binarize(enhanced);
    for (v, &m) in b.data.iter_mut().zip(&core.data) {
        *v &= m;
    }
    b
}

/// Network input of the given mode from an enhanced image and its mask.
pub fn render_mode(enhanced: &GrayImage, mask: &BitImage, mode: PreprocessMode) -> GrayImage {
    match mode {
        PreprocessMode::Enhance => enhanced.clone(),
        PreprocessMode::Binarize => ridges(enhanced, mask).to_gray(0, 255),
        PreprocessMode::Thin => thin(&ridges(enhanced, mask)).to_gray(0, 255),
    }
}

/// Full chain on a raw impression: enhance, segment, center, then render
/// the requested mode in the centered frame.
pub fn preprocess(raw: &GrayImage, mode: PreprocessMode) -> Result<PreprocessedSample> {
    let enhanced = enhance(raw)?;
    let mask = segment(&enhanced)?;
    let mut s = center(&enhanced, &mask)?;
    s.image = render_mode(&s.enhanced, &s.mask.bits, mode);
    Ok(s)
}
