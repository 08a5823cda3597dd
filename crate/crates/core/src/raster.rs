//! Binary rasters, masks and small grayscale utilities shared by the pipeline.

use std::collections::VecDeque;
use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};

/// A row-major binary image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BitImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds reads return `false`.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            false
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Pixels darker than `threshold` become foreground.
    pub fn from_gray_below(img: &GrayImage, threshold: u8) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] < threshold
        })
    }

    /// Foreground is any pixel ≥ 128.
    pub fn from_gray_mask(img: &GrayImage) -> Self {
        Self::from_fn(img.width() as usize, img.height() as usize, |x, y| {
            img.get_pixel(x as u32, y as u32)[0] >= 128
        })
    }

    /// Foreground rendered as `fg`, background as `bg`.
    pub fn to_gray(&self, fg: u8, bg: u8) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(x as usize, y as usize) { fg } else { bg }])
        })
    }

    /// Translate by an integer offset; exposed area becomes background.
    pub fn shifted(&self, dx: i64, dy: i64) -> Self {
        Self::from_fn(self.width, self.height, |x, y| {
            self.get_signed(x as i64 - dx, y as i64 - dy)
        })
    }

    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Label connected foreground components. Returns per-pixel labels
    /// (0 = background, components numbered from 1) and component sizes
    /// indexed by label − 1.
    pub fn components(&self, eight: bool) -> (Vec<u32>, Vec<usize>) {
        let mut labels = vec![0u32; self.data.len()];
        let mut sizes = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..self.data.len() {
            if !self.data[start] || labels[start] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            let mut size = 0;
            labels[start] = label;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                size += 1;
                let (x, y) = ((i % self.width) as i64, (i / self.width) as i64);
                for (nx, ny) in neighbours(x, y, eight) {
                    if self.get_signed(nx, ny) {
                        let j = ny as usize * self.width + nx as usize;
                        if labels[j] == 0 {
                            labels[j] = label;
                            queue.push_back(j);
                        }
                    }
                }
            }
            sizes.push(size);
        }
        (labels, sizes)
    }

    /// Keep only the largest connected component (ties go to the first found).
    pub fn largest_component(&self, eight: bool) -> Self {
        let (labels, sizes) = self.components(eight);
        let Some((best, _)) = sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        else {
            return self.clone();
        };
        let keep = best as u32 + 1;
        Self {
            width: self.width,
            height: self.height,
            data: labels.iter().map(|&l| l == keep).collect(),
        }
    }

    /// Fill every background region not 4-connected to the border.
    pub fn fill_holes(&self) -> Self {
        let inv = Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        };
        let mut outside = vec![false; self.data.len()];
        let mut queue = VecDeque::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let border = x == 0 || y == 0 || x + 1 == self.width || y + 1 == self.height;
                let i = y * self.width + x;
                if border && inv.data[i] {
                    outside[i] = true;
                    queue.push_back(i);
                }
            }
        }
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % self.width) as i64, (i / self.width) as i64);
            for (nx, ny) in neighbours(x, y, false) {
                if inv.get_signed(nx, ny) {
                    let j = ny as usize * self.width + nx as usize;
                    if !outside[j] {
                        outside[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        Self {
            width: self.width,
            height: self.height,
            data: outside.iter().map(|o| !o).collect(),
        }
    }

    /// Number of connected foreground components minus number of holes,
    /// with 8-connected foreground and 4-connected background.
    pub fn euler_number(&self) -> i64 {
        let (_, fg) = self.components(true);
        let mut padded = BitImage::new(self.width + 2, self.height + 2);
        for y in 0..self.height {
            for x in 0..self.width {
                padded.set(x + 1, y + 1, !self.get(x, y));
            }
        }
        for x in 0..padded.width {
            padded.set(x, 0, true);
            padded.set(x, padded.height - 1, true);
        }
        for y in 0..padded.height {
            padded.set(0, y, true);
            padded.set(padded.width - 1, y, true);
        }
        let (_, bg) = padded.components(false);
        fg.len() as i64 - (bg.len() as i64 - 1)
    }
}

fn neighbours(x: i64, y: i64, eight: bool) -> impl Iterator<Item = (i64, i64)> {
    const FOUR: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    const EIGHT: [(i64, i64); 8] = [
        (1, 0),
        (-1, 0),
        (0, 1),
        (0, -1),
        (1, 1),
        (1, -1),
        (-1, 1),
        (-1, -1),
    ];
    let offs: &'static [(i64, i64)] = if eight { &EIGHT } else { &FOUR };
    offs.iter().map(move |&(dx, dy)| (x + dx, y + dy))
}

/// Resolution a mask is stored at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resolution {
    Pixel,
    /// One cell per `n × n` pixel block.
    Block(u32),
}

/// A foreground mask at pixel or block resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub bits: BitImage,
    pub resolution: Resolution,
}

impl Mask {
    pub fn pixel(bits: BitImage) -> Self {
        Self {
            bits,
            resolution: Resolution::Pixel,
        }
    }

    pub fn block(bits: BitImage, block_size: u32) -> Self {
        Self {
            bits,
            resolution: Resolution::Block(block_size),
        }
    }

    pub fn width(&self) -> usize {
        self.bits.width
    }

    pub fn height(&self) -> usize {
        self.bits.height
    }

    pub fn count(&self) -> usize {
        self.bits.count()
    }

    /// Area fraction of foreground per block.
    pub fn block_coverage(&self, block_size: u32) -> Vec<f64> {
        assert_eq!(self.resolution, Resolution::Pixel, "coverage needs a pixel mask");
        let bs = block_size as usize;
        let (bw, bh) = (self.width() / bs, self.height() / bs);
        let mut out = vec![0.0; bw * bh];
        for by in 0..bh {
            for bx in 0..bw {
                let mut n = 0usize;
                for y in by * bs..(by + 1) * bs {
                    for x in bx * bs..(bx + 1) * bs {
                        n += self.bits.get(x, y) as usize;
                    }
                }
                out[by * bw + bx] = n as f64 / (bs * bs) as f64;
            }
        }
        out
    }

    /// Area pooling to blocks followed by a 0.5 threshold. Block-resolution
    /// masks of the same block size are returned unchanged.
    pub fn to_blocks(&self, block_size: u32) -> Mask {
        match self.resolution {
            Resolution::Block(b) if b == block_size => self.clone(),
            Resolution::Block(b) => panic!("cannot rebin a block-{b} mask to {block_size}"),
            Resolution::Pixel => {
                let bw = self.width() / block_size as usize;
                let bh = self.height() / block_size as usize;
                let cov = self.block_coverage(block_size);
                Mask::block(
                    BitImage {
                        width: bw,
                        height: bh,
                        data: cov.iter().map(|&c| c >= 0.5).collect(),
                    },
                    block_size,
                )
            }
        }
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path)?.to_luma8();
        Ok(Mask::pixel(BitImage::from_gray_mask(&img)))
    }

    /// Writes {0, 255}.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.bits.to_gray(255, 0).save(path)?;
        Ok(())
    }
}

/// Translate a grayscale image by an integer offset, exposing `fill`.
pub fn shift_gray(img: &GrayImage, dx: i64, dy: i64, fill: u8) -> GrayImage {
    let (w, h) = (img.width() as i64, img.height() as i64);
    GrayImage::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        if sx < 0 || sy < 0 || sx >= w || sy >= h {
            Luma([fill])
        } else {
            *img.get_pixel(sx as u32, sy as u32)
        }
    })
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path)?.to_luma8())
}

/// Grayscale image as f64 in [0, 1] with ridges (dark) mapped high.
pub fn ridge_intensity(img: &GrayImage) -> Vec<f64> {
    img.pixels().map(|p| (255.0 - p[0] as f64) / 255.0).collect()
}

pub fn check_same_size(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(w: usize, cx: f64, cy: f64, r: f64) -> BitImage {
        BitImage::from_fn(w, w, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            dx * dx + dy * dy <= r * r
        })
    }

    #[test]
    fn largest_component_and_holes() {
        let mut img = disk(64, 20.0, 20.0, 10.0);
        let small = disk(64, 50.0, 50.0, 4.0);
        for (d, s) in img.data.iter_mut().zip(&small.data) {
            *d |= *s;
        }
        img.set(20, 20, false);
        assert_eq!(img.components(true).1.len(), 2);
        let big = img.largest_component(true);
        assert!(!big.get(50, 50));
        assert!(!big.get(20, 20));
        let filled = big.fill_holes();
        assert!(filled.get(20, 20));
        assert_eq!(filled.euler_number(), 1);
        assert_eq!(big.euler_number(), 0);
    }

    #[test]
    fn block_pooling_threshold() {
        let bits = BitImage::from_fn(32, 32, |x, _| x < 24);
        let m = Mask::pixel(bits).to_blocks(16);
        assert_eq!(m.bits.data, vec![true, true, true, true]);
        let bits = BitImage::from_fn(32, 32, |x, _| x < 23);
        let m = Mask::pixel(bits).to_blocks(16);
        assert_eq!(m.bits.data, vec![true, false, true, false]);
    }
}
