use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point2, Vector2};

use crate::error::{Error, Result};
use crate::field::DistortionField;
use crate::raster::BitImage;

/// Ridge ending or bifurcation. `theta` is in degrees, counter-clockwise
/// with the y axis pointing up, in `[0, 360)`. `id` optionally tags points
/// that are known to correspond across impressions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Minutia {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub id: Option<u32>,
}

impl Minutia {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: theta.rem_euclid(360.0), id: None }
    }

    pub fn point(&self) -> Point2<f64> {
        Point2::new(self.x, self.y)
    }
}

/// Length of the step used to carry minutia directions through a map.
pub const DIRECTION_STEP: f64 = 4.0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinutiaeSet {
    pub points: Vec<Minutia>,
}

impl MinutiaeSet {
    pub fn new(points: Vec<Minutia>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// One `x y theta` line per point, with the tag as an optional fourth
    /// column.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for m in &self.points {
            let _ = write!(s, "{} {} {}", m.x, m.y, m.theta);
            if let Some(id) = m.id {
                let _ = write!(s, " {id}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut points = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 1));
            let cols: Vec<&str> = line.split_whitespace().collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(bad("expected `x y theta [id]`"));
            }
            let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
            let (Some(x), Some(y), Some(t)) = (num(cols[0]), num(cols[1]), num(cols[2])) else {
                return Err(bad("non-numeric field"));
            };
            let mut m = Minutia::new(x, y, t);
            if let Some(c) = cols.get(3) {
                m.id = Some(c.parse().map_err(|_| bad("bad id"))?);
            }
            points.push(m);
        }
        Ok(Self { points })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::from("# x y theta [id]\n");
        s.push_str(&self.to_text());
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }

    /// Fails if a point lies outside a `width`×`height` image.
    /// Every point moved to `p + F(p)`, ids kept. Directions follow a point
    /// [`DIRECTION_STEP`] px ahead through the same map.
    pub fn mapped(&self, field: &DistortionField) -> MinutiaeSet {
        let points = self
            .points
            .iter()
            .map(|m| {
                let t = m.theta.to_radians();
                let p = field.map_point(m.point());
                let a = field.map_point(m.point() + DIRECTION_STEP * Vector2::new(t.cos(), -t.sin()));
                let mut out = Minutia::new(p.x, p.y, (-(a.y - p.y)).atan2(a.x - p.x).to_degrees());
                out.id = m.id;
                out
            })
            .collect();
        MinutiaeSet::new(points)
    }

    pub fn check_bounds(&self, width: usize, height: usize) -> Result<()> {
        for m in &self.points {
            if m.x < 0.0 || m.y < 0.0 || m.x > width as f64 - 1.0 || m.y > height as f64 - 1.0 {
                return Err(Error::InvalidArgument(format!(
                    "minutia ({}, {}) outside {width}x{height}",
                    m.x, m.y
                )));
            }
        }
        Ok(())
    }
}

const RING: [(i64, i64); 8] = [(0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1)];

/// Steps traced along a ridge to estimate minutia direction.
const TRACE_LEN: usize = 6;
/// Minutiae closer than this to each other are treated as skeleton noise.
const MIN_SEPARATION: f64 = 4.0;

fn crossing_number(sk: &BitImage, x: i64, y: i64) -> usize {
    let v: Vec<bool> = RING.iter().map(|&(dx, dy)| sk.get_signed(x + dx, y + dy)).collect();
    (0..8).filter(|&i| v[i] != v[(i + 1) % 8]).count() / 2
}

/// Follow the skeleton from `start` through its neighbour `first` and return
/// the last position reached.
fn trace(sk: &BitImage, start: (i64, i64), first: (i64, i64)) -> (i64, i64) {
    let (mut prev, mut cur) = (start, first);
    for _ in 1..TRACE_LEN {
        let next = RING
            .iter()
            .map(|&(dx, dy)| (cur.0 + dx, cur.1 + dy))
            .filter(|&p| p != prev && p != start && sk.get_signed(p.0, p.1))
            .filter(|&p| (p.0 - prev.0).abs() > 1 || (p.1 - prev.1).abs() > 1)
            .min_by_key(|&p| (p.0 - cur.0).abs() + (p.1 - cur.1).abs());
        match next {
            Some(n) => {
                prev = cur;
                cur = n;
            }
            None => break,
        }
    }
    cur
}

fn display_angle(from: (i64, i64), to: (i64, i64)) -> f64 {
    let (dx, dy) = ((to.0 - from.0) as f64, (to.1 - from.1) as f64);
    (-dy).atan2(dx).to_degrees().rem_euclid(360.0)
}

fn circular_mean(a: f64, b: f64) -> f64 {
    let (a, b) = (a.to_radians(), b.to_radians());
    (a.sin() + b.sin()).atan2(a.cos() + b.cos()).to_degrees().rem_euclid(360.0)
}

/// Crossing-number minutiae of a one-pixel skeleton: endings (CN = 1) and
/// bifurcations (CN = 3). Points within `border` pixels of the mask edge are
/// dropped, as are clusters closer than a few pixels, which come from
/// skeleton spurs and breaks. Endings point away from their ridge;
/// bifurcations point along the bisector of their two closest branches.
pub fn extract_minutiae(skeleton: &BitImage, mask: Option<&BitImage>, border: usize) -> MinutiaeSet {
    let (w, h) = (skeleton.width, skeleton.height);
    let near_edge = |x: usize, y: usize| -> bool {
        let r = border as i64;
        let Some(m) = mask else {
            return x < border || y < border || x + border >= w || y + border >= h;
        };
        (-r..=r).any(|dy| (-r..=r).any(|dx| !m.get_signed(x as i64 + dx, y as i64 + dy)))
    };
    let mut found = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !skeleton.get(x, y) || near_edge(x, y) {
                continue;
            }
            let p = (x as i64, y as i64);
            let cn = crossing_number(skeleton, p.0, p.1);
            if cn != 1 && cn != 3 {
                continue;
            }
            // branch starts: one per foreground run around the ring
            let v: Vec<bool> = RING.iter().map(|&(dx, dy)| skeleton.get_signed(p.0 + dx, p.1 + dy)).collect();
            let branches: Vec<(i64, i64)> = (0..8)
                .filter(|&i| v[i] && !v[(i + 7) % 8])
                .map(|i| (p.0 + RING[i].0, p.1 + RING[i].1))
                .collect();
            let dirs: Vec<f64> = branches
                .iter()
                .map(|&b| display_angle(p, trace(skeleton, p, b)))
                .collect();
            let theta = match (cn, dirs.as_slice()) {
                (1, [d]) => (d + 180.0).rem_euclid(360.0),
                (3, [a, b, c]) => {
                    let sep = |u: f64, v: f64| {
                        let d = (u - v).rem_euclid(360.0);
                        d.min(360.0 - d)
                    };
                    let pairs = [(*a, *b, sep(*a, *b)), (*a, *c, sep(*a, *c)), (*b, *c, sep(*b, *c))];
                    let (u, v, _) = pairs.into_iter().min_by(|p, q| p.2.total_cmp(&q.2)).unwrap();
                    circular_mean(u, v)
                }
                _ => continue,
            };
            found.push(Minutia::new(x as f64, y as f64, theta));
        }
    }
    let keep: Vec<bool> = (0..found.len())
        .map(|i| {
            !found.iter().enumerate().any(|(j, q)| {
                j != i && (q.point() - found[i].point()).norm() < MIN_SEPARATION
            })
        })
        .collect();
    MinutiaeSet::new(found.into_iter().zip(keep).filter(|(_, k)| *k).map(|(m, _)| m).collect())
}
