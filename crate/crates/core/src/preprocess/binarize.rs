use image::GrayImage;

use super::segment::Integral;
use crate::raster::BitImage;

/// Half-width of the local threshold window.
pub const BINARIZE_RADIUS: usize = 8;
/// Local standard deviation below which the fixed mid-gray rule is used.
const MIN_LOCAL_STD: f64 = 4.0;

/// Local mean threshold; dark pixels (ridges) become foreground. Flat
/// neighbourhoods fall back to a fixed threshold of 128.
pub fn binarize(image: &GrayImage) -> BitImage {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let v: Vec<f64> = image.pixels().map(|p| p[0] as f64).collect();
    let sq: Vec<f64> = v.iter().map(|a| a * a).collect();
    let mean = Integral::new(&v, w, h);
    let mean_sq = Integral::new(&sq, w, h);
    let r = BINARIZE_RADIUS;
    BitImage::from_fn(w, h, |x, y| {
        let m = mean.mean(x, y, r);
        let var = (mean_sq.mean(x, y, r) - m * m).max(0.0);
        let p = v[y * w + x];
        if var.sqrt() >= MIN_LOCAL_STD {
            p < m
        } else {
            p < 128.0
        }
    })
}
