use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use nalgebra::{Point2, Vector2};

use super::minutiae::MinutiaeSet;
use crate::error::{Error, Result};
use crate::field::{fit_rigid, PointCorrespondences, RigidTransform};

/// Pairing radius after rigid prealignment, px.
pub const PAIRING_RADIUS: f64 = 12.0;

/// Outcome of one comparison; `paired` is one-to-one, `(a index, b index)`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub score: f64,
    pub paired: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct MatchSample {
    pub id: String,
    pub minutiae: MinutiaeSet,
}

pub trait Matcher: Send + Sync {
    fn name(&self) -> &str;
    fn match_pair(&self, a: &MatchSample, b: &MatchSample) -> Result<MatchResult>;
}

/// Mutual nearest neighbours within `radius` after mapping `a` by `t`.
pub fn mutual_nearest(
    a: &[Point2<f64>],
    b: &[Point2<f64>],
    t: &RigidTransform,
    radius: f64,
) -> Vec<(usize, usize)> {
    let moved: Vec<_> = a.iter().map(|p| t.apply(*p)).collect();
    let nearest = |p: &Point2<f64>, set: &[Point2<f64>]| -> Option<(usize, f64)> {
        set.iter()
            .enumerate()
            .map(|(i, q)| (i, (q - p).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
    };
    let mut out = Vec::new();
    for (i, p) in moved.iter().enumerate() {
        if let Some((j, d)) = nearest(p, b) {
            if d <= radius && nearest(&b[j], &moved).map(|(k, _)| k) == Some(i) {
                out.push((i, j));
            }
        }
    }
    out
}

fn points(set: &MinutiaeSet) -> Vec<Point2<f64>> {
    set.points.iter().map(|m| m.point()).collect()
}

fn refit(a: &[Point2<f64>], b: &[Point2<f64>], pairs: &[(usize, usize)]) -> Option<RigidTransform> {
    if pairs.len() < 2 {
        return None;
    }
    let corr = PointCorrespondences::new(
        pairs.iter().map(|&(i, _)| a[i]).collect(),
        pairs.iter().map(|&(_, j)| b[j]).collect(),
    )
    .ok()?;
    fit_rigid(&corr).ok()
}

/// Oracle for synthetic data: pairs minutiae carrying the same tag, keeping
/// those within the pairing radius after the best rigid alignment of all
/// tagged pairs.
#[derive(Debug, Clone)]
pub struct GroundTruthMatcher {
    pub radius: f64,
}

impl Default for GroundTruthMatcher {
    fn default() -> Self {
        Self { radius: PAIRING_RADIUS }
    }
}

impl Matcher for GroundTruthMatcher {
    fn name(&self) -> &str {
        "gt"
    }

    fn match_pair(&self, a: &MatchSample, b: &MatchSample) -> Result<MatchResult> {
        let by_id: HashMap<u32, usize> = b
            .minutiae
            .points
            .iter()
            .enumerate()
            .filter_map(|(j, m)| m.id.map(|id| (id, j)))
            .collect();
        let tagged: Vec<(usize, usize)> = a
            .minutiae
            .points
            .iter()
            .enumerate()
            .filter_map(|(i, m)| m.id.and_then(|id| by_id.get(&id)).map(|&j| (i, j)))
            .collect();
        let (pa, pb) = (points(&a.minutiae), points(&b.minutiae));
        let t = match tagged.len() {
            0 => return Ok(MatchResult::default()),
            1 => {
                let (i, j) = tagged[0];
                RigidTransform::from_angle(0.0, pb[j] - pa[i])
            }
            _ => refit(&pa, &pb, &tagged).expect("two or more pairs"),
        };
        let paired: Vec<_> = tagged
            .into_iter()
            .filter(|&(i, j)| (t.apply(pa[i]) - pb[j]).norm() <= self.radius)
            .collect();
        Ok(MatchResult { score: paired.len() as f64, paired })
    }
}

/// Minutia-only matcher: Hough prealignment over minutia pairs, then mutual
/// nearest neighbours within the pairing radius, refined twice.
#[derive(Debug, Clone)]
pub struct NearestNeighbourMatcher {
    pub radius: f64,
    /// Largest prealignment translation considered, px.
    pub max_translation: f64,
    /// Largest prealignment rotation considered, degrees.
    pub max_rotation: f64,
}

impl Default for NearestNeighbourMatcher {
    fn default() -> Self {
        Self { radius: PAIRING_RADIUS, max_translation: 100.0, max_rotation: 45.0 }
    }
}

impl NearestNeighbourMatcher {
    fn prealign(&self, a: &MinutiaeSet, b: &MinutiaeSet) -> Vec<RigidTransform> {
        const ANGLE_BIN: f64 = 10.0;
        const SHIFT_BIN: f64 = 8.0;
        let mut votes: BTreeMap<(i64, i64, i64), (usize, f64, Vector2<f64>)> = BTreeMap::new();
        for ma in &a.points {
            for mb in &b.points {
                let d = (mb.theta - ma.theta + 180.0).rem_euclid(360.0) - 180.0;
                if d.abs() > self.max_rotation {
                    continue;
                }
                // counter-clockwise on screen is clockwise in image coordinates
                let r = RigidTransform::from_angle(-d.to_radians(), Vector2::zeros());
                let t = mb.point() - r.apply(ma.point());
                if t.norm() > self.max_translation {
                    continue;
                }
                let key = ((d / ANGLE_BIN).round() as i64, (t.x / SHIFT_BIN).round() as i64, (t.y / SHIFT_BIN).round() as i64);
                let e = votes.entry(key).or_insert((0, 0.0, Vector2::zeros()));
                e.0 += 1;
                e.1 += d;
                e.2 += t;
            }
        }
        let mut ranked: Vec<_> = votes.into_values().collect();
        ranked.sort_by(|x, y| y.0.cmp(&x.0));
        let mut out = vec![RigidTransform::identity()];
        out.extend(ranked.into_iter().take(3).map(|(n, d, t)| {
            RigidTransform::from_angle(-(d / n as f64).to_radians(), t / n as f64)
        }));
        out
    }
}

impl Matcher for NearestNeighbourMatcher {
    fn name(&self) -> &str {
        "mnn"
    }

    fn match_pair(&self, a: &MatchSample, b: &MatchSample) -> Result<MatchResult> {
        let (pa, pb) = (points(&a.minutiae), points(&b.minutiae));
        if pa.is_empty() || pb.is_empty() {
            return Ok(MatchResult::default());
        }
        let mut best: Vec<(usize, usize)> = Vec::new();
        for start in self.prealign(&a.minutiae, &b.minutiae) {
            let mut pairs = mutual_nearest(&pa, &pb, &start, self.radius);
            for _ in 0..2 {
                let Some(next) = refit(&pa, &pb, &pairs) else { break };
                if next.translation.norm() > self.max_translation + self.radius {
                    break;
                }
                let again = mutual_nearest(&pa, &pb, &next, self.radius);
                if again.len() < pairs.len() {
                    break;
                }
                pairs = again;
            }
            if pairs.len() > best.len() {
                best = pairs;
            }
        }
        Ok(MatchResult { score: best.len() as f64, paired: best })
    }
}

/// Results computed by an external matcher, read from a CSV file with lines
/// `probe_id,gallery_id,score,pairs` where `pairs` is `i:j` separated by `;`.
#[derive(Debug, Clone, Default)]
pub struct FileMatcher {
    results: HashMap<(String, String), MatchResult>,
}

impl FileMatcher {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut results = HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("probe_id")) {
                continue;
            }
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 1));
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 3 && cols.len() != 4 {
                return Err(bad("expected probe_id,gallery_id,score[,pairs]"));
            }
            let score: f64 = cols[2].parse().map_err(|_| bad("bad score"))?;
            let mut paired = Vec::new();
            for p in cols.get(3).copied().unwrap_or("").split(';').filter(|s| !s.is_empty()) {
                let (i, j) = p.split_once(':').ok_or_else(|| bad("pair must be i:j"))?;
                paired.push((i.parse().map_err(|_| bad("bad index"))?, j.parse().map_err(|_| bad("bad index"))?));
            }
            results.insert((cols[0].to_string(), cols[1].to_string()), MatchResult { score, paired });
        }
        Ok(Self { results })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, path)
    }
}

impl Matcher for FileMatcher {
    fn name(&self) -> &str {
        "file"
    }

    fn match_pair(&self, a: &MatchSample, b: &MatchSample) -> Result<MatchResult> {
        self.results
            .get(&(a.id.clone(), b.id.clone()))
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no external result for {} vs {}", a.id, b.id)))
    }
}

/// Built-in matchers by name: `gt`, `mnn`, or `file:<path>`.
pub fn matcher_by_name(name: &str) -> Result<Box<dyn Matcher>> {
    match name {
        "gt" => Ok(Box::new(GroundTruthMatcher::default())),
        "mnn" => Ok(Box::new(NearestNeighbourMatcher::default())),
        _ => match name.strip_prefix("file:") {
            Some(path) => Ok(Box::new(FileMatcher::load(Path::new(path))?)),
            None => Err(Error::UnknownMatcher(name.to_string())),
        },
    }
}
