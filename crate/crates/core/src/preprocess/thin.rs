use crate::raster::BitImage;

/// Neighbours p2..p9 clockwise from north.
#[inline]
fn ring(img: &BitImage, x: usize, y: usize) -> [bool; 8] {
    let (x, y) = (x as i64, y as i64);
    [
        img.get_signed(x, y - 1),
        img.get_signed(x + 1, y - 1),
        img.get_signed(x + 1, y),
        img.get_signed(x + 1, y + 1),
        img.get_signed(x, y + 1),
        img.get_signed(x - 1, y + 1),
        img.get_signed(x - 1, y),
        img.get_signed(x - 1, y - 1),
    ]
}

/// Yokoi connectivity number for 8-connected foreground; 1 for simple points.
#[inline]
fn connectivity8(n: &[bool; 8]) -> u32 {
    let b = |i: usize| !n[i % 8] as u32;
    [0usize, 2, 4, 6]
        .iter()
        .map(|&k| b(k) - b(k) * b(k + 1) * b(k + 2))
        .sum()
}

/// Directional parallel thinning: each sweep deletes simple, non-end border
/// pixels facing north, south, east and west in turn, so strokes erode evenly
/// from both sides. Remaining staircase corners are then removed, giving a
/// one-pixel-wide 8-connected skeleton with the input's topology.
pub fn thin(binary: &BitImage) -> BitImage {
    let mut img = binary.clone();
    let (w, h) = (img.width, img.height);
    let mut doomed = Vec::new();
    loop {
        let mut changed = false;
        // ring index of the neighbour that must be background: N, S, E, W
        for side in [0usize, 4, 2, 6] {
            doomed.clear();
            for y in 0..h {
                for x in 0..w {
                    if !img.get(x, y) {
                        continue;
                    }
                    let n = ring(&img, x, y);
                    if n[side] {
                        continue;
                    }
                    let count = n.iter().filter(|&&b| b).count();
                    if count >= 2 && connectivity8(&n) == 1 {
                        doomed.push((x, y));
                    }
                }
            }
            changed |= !doomed.is_empty();
            for &(x, y) in &doomed {
                img.set(x, y, false);
            }
        }
        if !changed {
            break;
        }
    }
    // staircase cleanup: drop simple, non-end pixels sitting in an L corner
    for y in 0..h {
        for x in 0..w {
            if !img.get(x, y) {
                continue;
            }
            let n = ring(&img, x, y);
            let count = n.iter().filter(|&&b| b).count();
            let corner = (n[0] && n[2]) || (n[2] && n[4]) || (n[4] && n[6]) || (n[6] && n[0]);
            if count >= 2 && corner && connectivity8(&n) == 1 {
                img.set(x, y, false);
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    fn has_full_2x2(img: &BitImage) -> bool {
        (0..img.height - 1).any(|y| {
            (0..img.width - 1).any(|x| {
                img.get(x, y) && img.get(x + 1, y) && img.get(x, y + 1) && img.get(x + 1, y + 1)
            })
        })
    }

    #[test]
    fn bar_thins_to_centerline() {
        // 5 px wide horizontal bar from x = 10 to 69, rows 20..25
        let bar = BitImage::from_fn(80, 45, |x, y| (10..70).contains(&x) && (20..25).contains(&y));
        let sk = thin(&bar);
        let pts: Vec<(usize, usize)> = (0..45)
            .flat_map(|y| (0..80).map(move |x| (x, y)))
            .filter(|&(x, y)| sk.get(x, y))
            .collect();
        assert!(!pts.is_empty());
        assert!(pts.iter().all(|&(_, y)| y == 22), "{pts:?}");
        let xmin = pts.iter().map(|p| p.0).min().unwrap();
        let xmax = pts.iter().map(|p| p.0).max().unwrap();
        assert!(xmin <= 12 && xmax >= 67 && xmin >= 8 && xmax <= 71, "{xmin}..{xmax}");
        assert_eq!(sk.components(true).1.len(), 1);
    }

    #[test]
    fn empty_stays_empty() {
        assert!(thin(&BitImage::new(20, 20)).is_empty());
    }

    #[test]
    fn annulus_becomes_closed_loop() {
        let ring_img = BitImage::from_fn(64, 64, |x, y| {
            let r = ((x as f64 - 31.5).powi(2) + (y as f64 - 31.5).powi(2)).sqrt();
            (14.0..20.0).contains(&r)
        });
        let sk = thin(&ring_img);
        assert_eq!(ring_img.euler_number(), 0);
        assert_eq!(sk.euler_number(), 0);
        assert_eq!(sk.components(true).1.len(), 1);
        assert!(!has_full_2x2(&sk));
        // every skeleton pixel of a closed loop has exactly two neighbours
        for y in 0..64 {
            for x in 0..64 {
                if sk.get(x, y) {
                    let n = ring(&sk, x, y).iter().filter(|&&b| b).count();
                    assert_eq!(n, 2, "pixel ({x},{y}) has {n} neighbours");
                }
            }
        }
    }

    #[test]
    fn thinning_preserves_topology_of_blobs() {
        let img = BitImage::from_fn(96, 64, |x, y| {
            let d1 = (x as f64 - 25.0).powi(2) + (y as f64 - 30.0).powi(2);
            let d2 = (x as f64 - 70.0).powi(2) + (y as f64 - 30.0).powi(2);
            (d1 < 300.0 && d1 > 40.0) || (d2 < 200.0)
        });
        let sk = thin(&img);
        assert_eq!(sk.components(true).1.len(), img.components(true).1.len());
        assert_eq!(sk.euler_number(), img.euler_number());
    }
}
