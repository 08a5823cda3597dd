use image::GrayImage;

use crate::error::{Error, Result};
use crate::orientation::sobel;
use crate::raster::{BitImage, Mask};

/// Window side for the gradient-energy average, in pixels.
pub const SEGMENT_WINDOW: usize = 12;
/// Otsu classes whose means are closer than this ratio count as one class.
const UNIMODAL_RATIO: f64 = 0.25;

/// Summed-area table with one row and column of zero padding.
pub(crate) struct Integral {
    w: usize,
    h: usize,
    sum: Vec<f64>,
}

impl Integral {
    pub(crate) fn new(v: &[f64], w: usize, h: usize) -> Self {
        let mut sum = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += v[y * w + x];
                sum[(y + 1) * (w + 1) + x + 1] = sum[y * (w + 1) + x + 1] + row;
            }
        }
        Self { w, h, sum }
    }

    /// Mean over the window of half-width `r` around `(x, y)`, clipped to the
    /// image.
    pub(crate) fn mean(&self, x: usize, y: usize, r: usize) -> f64 {
        let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
        let (x1, y1) = ((x + r + 1).min(self.w), (y + r + 1).min(self.h));
        let s = |x: usize, y: usize| self.sum[y * (self.w + 1) + x];
        let total = s(x1, y1) - s(x0, y1) - s(x1, y0) + s(x0, y0);
        total / ((x1 - x0) * (y1 - y0)) as f64
    }
}

/// Otsu split over a 256-bin histogram spanning `[min, max]`. Returns the
/// level (values strictly above are foreground) and the two class means.
pub(crate) fn otsu(values: &[f64]) -> Option<(f64, f64, f64)> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return None;
    }
    let bins = 256;
    let scale = (bins - 1) as f64 / (hi - lo);
    let mut hist = vec![0usize; bins];
    for &v in values {
        hist[((v - lo) * scale) as usize] += 1;
    }
    let n = values.len() as f64;
    let total: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut s0) = (0.0, 0.0);
    let (mut best, mut best_k, mut means) = (-1.0, 0, (0.0, 0.0));
    for (k, &c) in hist.iter().enumerate().take(bins - 1) {
        w0 += c as f64;
        s0 += k as f64 * c as f64;
        let w1 = n - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (s0 / w0, (total - s0) / w1);
        let between = w0 * w1 * (m1 - m0) * (m1 - m0);
        if between > best {
            best = between;
            best_k = k;
            means = (m0, m1);
        }
    }
    let level = |bin: f64| lo + bin / scale;
    Some((level(best_k as f64 + 1.0), level(means.0), level(means.1)))
}

/// Root-mean-square gradient magnitude over a sliding window, per pixel.
pub(crate) fn gradient_energy(image: &GrayImage) -> Vec<f64> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let px: Vec<f64> = image.pixels().map(|p| p[0] as f64).collect();
    let (gx, gy) = sobel(&px, w, h);
    let e: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| a * a + b * b).collect();
    let table = Integral::new(&e, w, h);
    let r = SEGMENT_WINDOW / 2;
    (0..w * h).map(|i| table.mean(i % w, i / w, r).sqrt()).collect()
}

/// Box erosion: keeps pixels whose `(2r+1)²` window, clipped to the image,
/// lies entirely in `bits`.
pub(crate) fn erode(bits: &BitImage, r: usize) -> BitImage {
    let v: Vec<f64> = bits.data.iter().map(|&b| b as u8 as f64).collect();
    let table = Integral::new(&v, bits.width, bits.height);
    BitImage::from_fn(bits.width, bits.height, |x, y| table.mean(x, y, r) > 1.0 - 1e-9)
}

/// Foreground where the windowed RMS gradient exceeds the Otsu level, pulled
/// in by a quarter window to undo the outward bias of the window, then
/// reduced to its largest 8-connected component with holes filled.
pub fn segment(image: &GrayImage) -> Result<Mask> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let energy = gradient_energy(image);
    let max = energy.iter().cloned().fold(0.0, f64::max);
    if max <= 1e-9 {
        return Err(Error::EmptyForeground);
    }
    let t = match otsu(&energy) {
        Some((t, m0, m1)) if m0 < UNIMODAL_RATIO * m1 => t,
        // one texture class only: keep everything with real texture
        Some((_, m0, _)) => UNIMODAL_RATIO * m0,
        None => 0.0,
    };
    let bits = BitImage::from_fn(w, h, |x, y| energy[y * w + x] > t);
    let bits = erode(&bits, SEGMENT_WINDOW / 4).largest_component(true).fill_holes();
    if bits.is_empty() {
        return Err(Error::EmptyForeground);
    }
    Ok(Mask::pixel(bits))
}
