use std::collections::HashMap;
use std::f64::consts::PI;

use image::{GrayImage, Luma};

use super::segment::segment;
use crate::error::{Error, Result};
use crate::orientation::sobel;
use crate::par;

/// Block size of the period map.
pub const ENHANCE_BLOCK: usize = 16;
/// Block size of the orientation map; each block averages its 3×3
/// neighbourhood.
const ORIENT_BLOCK: usize = 8;
pub const GABOR_ORIENTATIONS: usize = 8;
pub const MIN_PERIOD: usize = 5;
pub const MAX_PERIOD: usize = 15;
/// Period used where no block gives a usable estimate.
const FALLBACK_PERIOD: usize = 9;
/// Gaussian envelope width relative to the ridge period.
const SIGMA_PER_PERIOD: f64 = 0.45;

struct Plane<'a> {
    v: &'a [f64],
    w: usize,
    h: usize,
}

impl Plane<'_> {
    #[inline]
    fn at(&self, x: i64, y: i64) -> f64 {
        let x = x.clamp(0, self.w as i64 - 1) as usize;
        let y = y.clamp(0, self.h as i64 - 1) as usize;
        self.v[y * self.w + x]
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x0 + 1, y0) * fx;
        let bot = self.at(x0, y0 + 1) * (1.0 - fx) + self.at(x0 + 1, y0 + 1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// Double-angle orientation vector per block, `(gxx − gyy, 2·gxy) / (gxx + gyy)`
/// of the structure tensor summed over the block's 3×3 neighbourhood. Its
/// half-angle is the ridge normal in image coordinates.
fn orientation_vectors(plane: &Plane, bw: usize, bh: usize) -> Vec<(f64, f64)> {
    let (gx, gy) = sobel(plane.v, plane.w, plane.h);
    let mut t = vec![(0.0, 0.0, 0.0); bw * bh];
    for y in 0..plane.h {
        let by = (y / ORIENT_BLOCK).min(bh - 1);
        for x in 0..plane.w {
            let bx = (x / ORIENT_BLOCK).min(bw - 1);
            let (a, b) = (gx[y * plane.w + x], gy[y * plane.w + x]);
            let e = &mut t[by * bw + bx];
            e.0 += a * a;
            e.1 += b * b;
            e.2 += a * b;
        }
    }
    let mut out = vec![(0.0, 0.0); bw * bh];
    for by in 0..bh {
        for bx in 0..bw {
            let mut acc = (0.0, 0.0, 0.0);
            for ny in by.saturating_sub(1)..(by + 2).min(bh) {
                for nx in bx.saturating_sub(1)..(bx + 2).min(bw) {
                    let e = t[ny * bw + nx];
                    acc.0 += e.0;
                    acc.1 += e.1;
                    acc.2 += e.2;
                }
            }
            let total = (acc.0 + acc.1).max(1e-12);
            out[by * bw + bx] = ((acc.0 - acc.1) / total, 2.0 * acc.2 / total);
        }
    }
    out
}

/// Ridge period of one block from the autocorrelation of the intensity
/// signature projected onto the ridge normal.
fn block_period(plane: &Plane, cx: f64, cy: f64, normal: f64) -> Option<usize> {
    const HALF_LEN: i64 = 16;
    const HALF_WIDTH: i64 = 8;
    let (nx, ny) = (normal.cos(), normal.sin());
    let mut sig: Vec<f64> = (-HALF_LEN..HALF_LEN)
        .map(|u| {
            let s: f64 = (-HALF_WIDTH..=HALF_WIDTH)
                .map(|t| {
                    let (u, t) = (u as f64, t as f64);
                    plane.bilinear(cx + u * nx - t * ny, cy + u * ny + t * nx)
                })
                .sum();
            s / (2 * HALF_WIDTH + 1) as f64
        })
        .collect();
    let mean = sig.iter().sum::<f64>() / sig.len() as f64;
    sig.iter_mut().for_each(|s| *s -= mean);
    let energy: f64 = sig.iter().map(|s| s * s).sum();
    if energy < 1e-9 {
        return None;
    }
    let corr = |lag: usize| -> f64 {
        let n = sig.len() - lag;
        let s: f64 = (0..n).map(|i| sig[i] * sig[i + lag]).sum();
        s / energy * sig.len() as f64 / n as f64
    };
    let lags: Vec<f64> = (MIN_PERIOD - 1..=MAX_PERIOD + 1).map(corr).collect();
    let peaks: Vec<(usize, f64)> = (1..lags.len() - 1)
        .filter(|&i| lags[i] >= lags[i - 1] && lags[i] >= lags[i + 1] && lags[i] > 0.2)
        .map(|i| (i + MIN_PERIOD - 1, lags[i]))
        .collect();
    let top = peaks.iter().map(|p| p.1).fold(0.0, f64::max);
    // the shortest strong peak is the fundamental, later ones are multiples
    let best = peaks.into_iter().find(|p| p.1 >= 0.8 * top);
    best.map(|(p, _)| p)
}

/// Zero-mean even Gabor kernel whose carrier runs along `normal`, scaled to
/// unit gain on a matched sinusoid.
fn gabor_kernel(normal: f64, period: usize) -> (usize, Vec<f64>) {
    let lambda = period as f64;
    let sigma = SIGMA_PER_PERIOD * lambda;
    let r = (3.0 * sigma).ceil() as usize;
    let side = 2 * r + 1;
    let (c, s) = (normal.cos(), normal.sin());
    let mut carrier = Vec::with_capacity(side * side);
    let mut k = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            let (x, y) = (i as f64 - r as f64, j as f64 - r as f64);
            let xr = x * c + y * s;
            let g = (-(x * x + y * y) / (2.0 * sigma * sigma)).exp();
            let cw = (2.0 * PI * xr / lambda).cos();
            carrier.push(cw);
            k.push(g * cw);
        }
    }
    let mean = k.iter().sum::<f64>() / k.len() as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    let gain: f64 = k.iter().zip(&carrier).map(|(a, b)| a * b).sum();
    k.iter_mut().for_each(|v| *v /= gain);
    (r, k)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

/// Contextual Gabor enhancement steered by block orientation and ridge
/// period. Output keeps the input polarity (dark ridges stay dark) and spans
/// the full gray range; pixels outside a coarse segmentation become white.
pub fn enhance(image: &GrayImage) -> Result<GrayImage> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let raw: Vec<f64> = image.pixels().map(|p| p[0] as f64).collect();
    let (lo, hi) = raw.iter().fold((255.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    if w == 0 || h == 0 || hi - lo < 4.0 {
        return Err(Error::FlatImage((hi - lo).max(0.0) as u8));
    }
    let fg = match segment(image) {
        Ok(m) => m.bits.data,
        Err(_) => vec![true; w * h],
    };
    // normalize over the foreground and zero the rest, so that the filters
    // see no step at the contact boundary
    let n = fg.iter().filter(|&&f| f).count().max(1) as f64;
    let inside = || raw.iter().zip(&fg).filter(|(_, &f)| f).map(|(v, _)| *v);
    let mean = inside().sum::<f64>() / n;
    let std = (inside().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-9);
    let v: Vec<f64> = raw
        .iter()
        .zip(&fg)
        .map(|(x, &f)| if f { (x - mean) / std } else { 0.0 })
        .collect();
    let plane = Plane { v: &v, w, h };

    let (ow, oh) = (w.div_ceil(ORIENT_BLOCK), h.div_ceil(ORIENT_BLOCK));
    let vectors = orientation_vectors(&plane, ow, oh);
    // ridge normal at a pixel: bilinear blend of the block vectors around it
    let normal_at = |x: f64, y: f64| -> f64 {
        let half = (ORIENT_BLOCK as f64 - 1.0) / 2.0;
        let fx = ((x - half) / ORIENT_BLOCK as f64).clamp(0.0, (ow - 1) as f64);
        let fy = ((y - half) / ORIENT_BLOCK as f64).clamp(0.0, (oh - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(ow - 1), (y0 + 1).min(oh - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let mut a = 0.0;
        let mut b = 0.0;
        for (bx, by, wgt) in [
            (x0, y0, (1.0 - tx) * (1.0 - ty)),
            (x1, y0, tx * (1.0 - ty)),
            (x0, y1, (1.0 - tx) * ty),
            (x1, y1, tx * ty),
        ] {
            let v = vectors[by * ow + bx];
            a += wgt * v.0;
            b += wgt * v.1;
        }
        0.5 * b.atan2(a)
    };

    let (bw, bh) = (w.div_ceil(ENHANCE_BLOCK), h.div_ceil(ENHANCE_BLOCK));
    let half = (ENHANCE_BLOCK as f64 - 1.0) / 2.0;
    let estimates = par::map_range(bw * bh, |i| {
        let (bx, by) = (i % bw, i / bw);
        let cx = ((bx * ENHANCE_BLOCK) as f64 + half).min(w as f64 - 1.0);
        let cy = ((by * ENHANCE_BLOCK) as f64 + half).min(h as f64 - 1.0);
        block_period(&plane, cx, cy, normal_at(cx, cy))
    });
    let mut valid: Vec<usize> = estimates.iter().flatten().copied().collect();
    valid.sort_unstable();
    let fallback = valid.get(valid.len() / 2).copied().unwrap_or(FALLBACK_PERIOD);
    // median over the 3×3 block neighbourhood suppresses single bad estimates
    let periods: Vec<usize> = (0..bw * bh)
        .map(|i| {
            let (bx, by) = (i % bw, i / bw);
            let mut near: Vec<usize> = (by.saturating_sub(1)..(by + 2).min(bh))
                .flat_map(|ny| (bx.saturating_sub(1)..(bx + 2).min(bw)).map(move |nx| ny * bw + nx))
                .filter_map(|j| estimates[j])
                .collect();
            near.sort_unstable();
            near.get(near.len() / 2).copied().unwrap_or(fallback)
        })
        .collect();

    let step = PI / GABOR_ORIENTATIONS as f64;
    let mut bank: HashMap<(usize, usize), (usize, Vec<f64>)> = HashMap::new();
    for &p in &periods {
        for o in 0..GABOR_ORIENTATIONS {
            bank.entry((o, p)).or_insert_with(|| gabor_kernel(o as f64 * step, p));
        }
    }
    let orientation_bin = |x: usize, y: usize| -> usize {
        let normal = normal_at(x as f64, y as f64);
        ((normal / step).round() as i64).rem_euclid(GABOR_ORIENTATIONS as i64) as usize
    };

    let rows = par::map_range(h, |y| {
        let by = (y / ENHANCE_BLOCK).min(bh - 1);
        (0..w)
            .map(|x| {
                let bx = (x / ENHANCE_BLOCK).min(bw - 1);
                let (r, k) = &bank[&(orientation_bin(x, y), periods[by * bw + bx])];
                let side = 2 * r + 1;
                let (x0, y0) = (x as i64 - *r as i64, y as i64 - *r as i64);
                let mut acc = 0.0;
                for j in 0..side {
                    let krow = &k[j * side..(j + 1) * side];
                    for (i, kv) in krow.iter().enumerate() {
                        acc += kv * plane.at(x0 + i as i64, y0 + j as i64);
                    }
                }
                acc
            })
            .collect::<Vec<f64>>()
    });
    let response: Vec<f64> = rows.into_iter().flatten().collect();

    let mut kept: Vec<f64> = response.iter().zip(&fg).filter(|(_, &f)| f).map(|(r, _)| *r).collect();
    kept.sort_unstable_by(f64::total_cmp);
    let (rlo, rhi) = (percentile(&kept, 0.005), percentile(&kept, 0.995));
    let span = (rhi - rlo).max(1e-12);
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        if !fg[i] {
            return Luma([255]);
        }
        let t = ((response[i] - rlo) / span).clamp(0.0, 1.0);
        Luma([(t * 255.0).round() as u8])
    }))
}
