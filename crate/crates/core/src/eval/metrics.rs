use log::warn;

use super::minutiae::MinutiaeSet;
use super::scores::ScoreMatrix;
use crate::error::{Error, Result};
use crate::field::{fit_rigid, PointCorrespondences};

/// Paired minutiae of one genuine comparison; `pairing` holds
/// `(distorted index, normal index)`.
#[derive(Debug, Clone)]
pub struct PairedMinutiae {
    pub distorted: MinutiaeSet,
    pub normal: MinutiaeSet,
    pub pairing: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MreAp {
    /// Mean residual after optimal rigid alignment, averaged over pairs, px.
    pub mre: f64,
    /// Mean number of paired minutiae per comparison.
    pub ap: f64,
    /// Comparisons that contributed.
    pub used: usize,
}

/// Per-comparison reprojection error: the mean residual of the paired
/// distorted minutiae after the best rigid alignment onto their partners.
pub fn reprojection_error(pair: &PairedMinutiae) -> Result<f64> {
    if pair.pairing.len() == 1 {
        // a translation aligns a single pair exactly
        return Ok(0.0);
    }
    let source = pair.pairing.iter().map(|&(i, _)| pair.distorted.points[i].point()).collect();
    let target = pair.pairing.iter().map(|&(_, j)| pair.normal.points[j].point()).collect();
    let corr = PointCorrespondences::new(source, target)?;
    let t = fit_rigid(&corr)?;
    Ok(corr.mean_residual(&t))
}

/// Mean reprojection error and average pair count. Comparisons with an
/// empty pairing are skipped with a warning.
pub fn mre_ap(pairs: &[PairedMinutiae]) -> Result<MreAp> {
    let (mut sum, mut count, mut used) = (0.0, 0usize, 0usize);
    for (n, p) in pairs.iter().enumerate() {
        if p.pairing.is_empty() {
            warn!("comparison {n} has no paired minutiae, skipped");
            continue;
        }
        for &(i, j) in &p.pairing {
            if i >= p.distorted.len() || j >= p.normal.len() {
                return Err(Error::InvalidArgument(format!("comparison {n}: pair ({i}, {j}) out of range")));
            }
        }
        sum += reprojection_error(p)?;
        count += p.pairing.len();
        used += 1;
    }
    if used == 0 {
        return Err(Error::AllEmpty);
    }
    Ok(MreAp { mre: sum / used as f64, ap: count as f64 / used as f64, used })
}

/// Fraction of probes whose best genuine score ranks within the top `k` of
/// their gallery scores. Ties count against the genuine entry.
pub fn rank_k(scores: &ScoreMatrix, k: usize) -> Result<f64> {
    let (mut hits, mut probes) = (0usize, 0usize);
    for probe in scores.probes() {
        let rows: Vec<_> = scores.entries.iter().filter(|e| e.probe == probe).collect();
        let Some(genuine) = rows.iter().filter(|e| e.genuine).map(|e| e.score).max_by(f64::total_cmp) else {
            warn!("probe {probe} has no genuine gallery entry, excluded");
            continue;
        };
        let mut seen_genuine = false;
        let ahead = rows
            .iter()
            .filter(|e| {
                // the best genuine entry itself does not compete
                if e.genuine && e.score == genuine && !seen_genuine {
                    seen_genuine = true;
                    return false;
                }
                e.score >= genuine
            })
            .count();
        probes += 1;
        hits += (ahead < k) as usize;
    }
    if probes == 0 {
        return Err(Error::EmptyScores("no probe with a genuine entry"));
    }
    Ok(hits as f64 / probes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

/// Empirical DET curve over every distinct score, plus a final point above
/// all scores. A comparison is accepted when its score is ≥ the threshold.
pub fn det_curve(scores: &ScoreMatrix) -> Result<Vec<DetPoint>> {
    let (mut gen, mut imp) = scores.split();
    if gen.is_empty() {
        return Err(Error::EmptyScores("genuine"));
    }
    if imp.is_empty() {
        return Err(Error::EmptyScores("impostor"));
    }
    gen.sort_unstable_by(f64::total_cmp);
    imp.sort_unstable_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = gen.iter().chain(&imp).copied().collect();
    thresholds.sort_unstable_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let below = |v: &[f64], t: f64| v.partition_point(|&s| s < t);
    Ok(thresholds
        .into_iter()
        .map(|t| DetPoint {
            threshold: t,
            fmr: (imp.len() - below(&imp, t)) as f64 / imp.len() as f64,
            fnmr: below(&gen, t) as f64 / gen.len() as f64,
        })
        .collect())
}

/// Five-number summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_unstable_by(f64::total_cmp);
        Some(Self {
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub summary: Option<Quantiles>,
}

/// Groups score gains `after − before` by the bin of the original score.
/// Bins are `[edges[i], edges[i+1])`, the last one closed; scores outside
/// all bins are ignored.
pub fn improvement_bins(before: &[f64], after: &[f64], edges: &[f64]) -> Result<Vec<ImprovementBin>> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch { expected: before.len(), got: after.len() });
    }
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("bin edges must be increasing, at least two".into()));
    }
    let nb = edges.len() - 1;
    let mut groups = vec![Vec::new(); nb];
    for (b, a) in before.iter().zip(after) {
        let last = *b == edges[nb];
        let idx = edges.partition_point(|&e| e <= *b);
        if (1..=nb).contains(&idx) {
            groups[idx - 1].push(a - b);
        } else if last {
            groups[nb - 1].push(a - b);
        }
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| ImprovementBin {
            lo: edges[i],
            hi: edges[i + 1],
            count: g.len(),
            summary: Quantiles::of(&g),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::minutiae::Minutia;
    use crate::eval::scores::ScoreEntry;
    use crate::field::{remove_dc, DistortionField, FieldGeometry, RigidTransform};
    use crate::raster::{BitImage, Mask};
    use nalgebra::{Point2, Vector2};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(points: &[Point2<f64>]) -> MinutiaeSet {
        MinutiaeSet::new(points.iter().map(|p| Minutia::new(p.x, p.y, 0.0)).collect())
    }

    fn identity_pairing(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, i)).collect()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point2<f64>> {
        (0..n).map(|_| Point2::new(rng.random_range(0.0..200.0), rng.random_range(0.0..200.0))).collect()
    }

    #[test]
    fn rigid_copy_has_zero_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let norm = random_points(&mut rng, 12);
        let t = RigidTransform::from_angle(0.4, Vector2::new(13.0, -7.0));
        let dis: Vec<_> = norm.iter().map(|p| t.apply(*p)).collect();
        let r = mre_ap(&[PairedMinutiae { distorted: set(&dis), normal: set(&norm), pairing: identity_pairing(12) }]).unwrap();
        assert!(r.mre < 1e-9);
        assert_eq!(r.ap, 12.0);
    }

    #[test]
    fn hand_residual() {
        let norm = [Point2::new(0.0, 0.0), Point2::new(10.0, 0.0)];
        let dis = [Point2::new(-3.0, 0.0), Point2::new(13.0, 0.0)];
        let r = mre_ap(&[PairedMinutiae { distorted: set(&dis), normal: set(&norm), pairing: identity_pairing(2) }]).unwrap();
        assert!((r.mre - 3.0).abs() < 1e-9);
        assert_eq!(r.ap, 2.0);
    }

    #[test]
    fn empty_pairings() {
        let p = PairedMinutiae { distorted: set(&[]), normal: set(&[]), pairing: vec![] };
        assert!(matches!(mre_ap(&[p.clone()]), Err(Error::AllEmpty)));
        let good = PairedMinutiae {
            distorted: set(&[Point2::new(1.0, 1.0)]),
            normal: set(&[Point2::new(5.0, 5.0)]),
            pairing: vec![(0, 0)],
        };
        let r = mre_ap(&[p, good]).unwrap();
        assert_eq!(r.used, 1);
    }

    #[test]
    fn ground_truth_field_oracle() {
        let g = FieldGeometry::new(16, 16, 16);
        let raw = DistortionField::from_fn(g, |bx, by| {
            let (x, y) = (bx as f64 / 15.0, by as f64 / 15.0);
            (6.0 * (3.0 * y).sin(), 5.0 * (2.5 * x).cos() * y)
        });
        // rigid part taken over the blocks that the points cover
        let inner = Mask::block(BitImage::from_fn(16, 16, |x, y| (2..14).contains(&x) && (2..14).contains(&y)), 16);
        let field = remove_dc(&raw, &inner).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut dis = Vec::new();
        let mut norm = Vec::new();
        for _ in 0..400 {
            let p1 = Point2::new(rng.random_range(40.0..216.0), rng.random_range(40.0..216.0));
            let p2 = field.map_point_inverse(p1);
            norm.push(p1);
            dis.push(p2);
        }
        let rect: Vec<_> = dis.iter().map(|p| field.map_point(*p)).collect();
        let pairing = identity_pairing(400);
        let r = mre_ap(&[PairedMinutiae { distorted: set(&rect), normal: set(&norm), pairing: pairing.clone() }]).unwrap();
        assert!(r.mre <= 1.0, "{}", r.mre);
        let unrect = mre_ap(&[PairedMinutiae { distorted: set(&dis), normal: set(&norm), pairing }]).unwrap();
        // expected: mean non-rigid displacement at the distorted points
        let corr = PointCorrespondences::new(dis.clone(), norm.clone()).unwrap();
        let fitted = fit_rigid(&corr).unwrap();
        let direct: f64 = dis.iter().zip(&norm).map(|(a, b)| (fitted.apply(*a) - b).norm()).sum::<f64>() / 400.0;
        let magnitude: f64 = dis.iter().map(|p| field.sample(p.x, p.y).norm()).sum::<f64>() / 400.0;
        assert!((unrect.mre - direct).abs() < 1e-9);
        assert!((unrect.mre - magnitude).abs() <= 0.1 * magnitude, "{} vs {magnitude}", unrect.mre);
    }

    fn entry(p: &str, g: &str, genuine: bool, score: f64) -> ScoreEntry {
        ScoreEntry { probe: p.into(), gallery: g.into(), genuine, score }
    }

    #[test]
    fn rank_with_ties() {
        let m = ScoreMatrix::new(vec![
            entry("a", "1", true, 10.0),
            entry("a", "2", false, 3.0),
            entry("b", "1", false, 4.0),
            entry("b", "2", true, 9.0),
        ]);
        assert_eq!(rank_k(&m, 1).unwrap(), 1.0);
        let tied = ScoreMatrix::new(vec![entry("a", "1", true, 5.0), entry("a", "2", false, 5.0), entry("a", "3", false, 1.0)]);
        assert_eq!(rank_k(&tied, 1).unwrap(), 0.0);
        assert_eq!(rank_k(&tied, 2).unwrap(), 1.0);
        let none = ScoreMatrix::new(vec![entry("a", "1", false, 1.0)]);
        assert!(rank_k(&none, 1).is_err());
    }

    #[test]
    fn rank_one_of_five_is_a_fifth() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let trials = 4000;
        let mut entries = Vec::new();
        for p in 0..trials {
            for g in 0..5 {
                entries.push(entry(&p.to_string(), &g.to_string(), g == 0, rng.random::<f64>()));
            }
        }
        let r = rank_k(&ScoreMatrix::new(entries), 1).unwrap();
        let sigma = (0.2f64 * 0.8 / trials as f64).sqrt();
        assert!((r - 0.2).abs() <= 3.0 * sigma, "{r}");
    }

    #[test]
    fn det_separated_and_hand_listed() {
        let mut e = Vec::new();
        for s in [5.0, 6.0, 7.0] {
            e.push(entry("p", "g", true, s));
        }
        for s in [1.0, 2.0] {
            e.push(entry("p", "h", false, s));
        }
        let curve = det_curve(&ScoreMatrix::new(e)).unwrap();
        assert!(curve.iter().any(|p| p.fmr == 0.0 && p.fnmr == 0.0));

        let gen = [0.62, 0.71, 0.45, 0.88, 0.93, 0.55, 0.79, 0.67, 0.99, 0.50];
        let imp = [0.12, 0.35, 0.48, 0.22, 0.60, 0.05, 0.41, 0.30, 0.70, 0.18];
        let mut e: Vec<_> = gen.iter().map(|&s| entry("p", "g", true, s)).collect();
        e.extend(imp.iter().map(|&s| entry("p", "h", false, s)));
        let curve = det_curve(&ScoreMatrix::new(e)).unwrap();
        assert_eq!(curve.len(), 21);
        // exhaustive oracle: count directly at every threshold
        for p in &curve {
            let fmr = imp.iter().filter(|&&s| s >= p.threshold).count() as f64 / 10.0;
            let fnmr = gen.iter().filter(|&&s| s < p.threshold).count() as f64 / 10.0;
            assert_eq!((p.fmr, p.fnmr), (fmr, fnmr));
        }
        assert_eq!((curve[0].fmr, curve[0].fnmr), (1.0, 0.0));
        assert_eq!((curve[20].fmr, curve[20].fnmr), (0.0, 1.0));
        // thresholds 0.48 and 0.50: FMR 0.3 then 0.2 while FNMR 0.1
        let at = |t: f64| curve.iter().find(|p| p.threshold == t).unwrap();
        assert_eq!((at(0.48).fmr, at(0.48).fnmr), (0.3, 0.1));
        assert_eq!((at(0.50).fmr, at(0.50).fnmr), (0.2, 0.1));
        assert_eq!((at(0.70).fmr, at(0.70).fnmr), (0.1, 0.5));
        assert!(det_curve(&ScoreMatrix::new(vec![entry("p", "g", true, 1.0)])).is_err());
    }

    #[test]
    fn det_of_identical_distributions_follows_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut e = Vec::new();
        for i in 0..3000 {
            e.push(entry("p", "g", i % 2 == 0, rng.random::<f64>()));
        }
        for p in det_curve(&ScoreMatrix::new(e)).unwrap() {
            assert!((p.fnmr - (1.0 - p.fmr)).abs() < 0.06);
        }
    }

    #[test]
    fn improvement_bins_basic() {
        let before = [1.0, 5.0, 12.0, 25.0, 30.0];
        let same = improvement_bins(&before, &before, &[0.0, 10.0, 20.0, 30.0]).unwrap();
        for b in &same {
            if let Some(q) = b.summary {
                assert_eq!((q.min, q.max), (0.0, 0.0));
            }
        }
        assert_eq!(same.iter().map(|b| b.count).collect::<Vec<_>>(), vec![2, 1, 2]);
        let plus: Vec<f64> = before.iter().map(|b| b + 10.0).collect();
        for b in improvement_bins(&before, &plus, &[0.0, 10.0, 20.0, 30.0]).unwrap() {
            let q = b.summary.unwrap();
            assert_eq!((q.min, q.median, q.max), (10.0, 10.0, 10.0));
        }
        assert!(matches!(improvement_bins(&before, &plus[..3], &[0.0, 1.0]), Err(Error::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn bins_match_direct_sort(
            before in proptest::collection::vec(0.0f64..100.0, 1..60),
            noise in proptest::collection::vec(-5.0f64..5.0, 60),
        ) {
            let after: Vec<f64> = before.iter().zip(&noise).map(|(b, n)| b + n).collect();
            let edges = [0.0, 25.0, 50.0, 75.0, 100.0];
            let bins = improvement_bins(&before, &after, &edges).unwrap();
            for bin in bins {
                let mut d: Vec<f64> = before.iter().zip(&after)
                    .filter(|(b, _)| **b >= bin.lo && **b < bin.hi)
                    .map(|(b, a)| a - b).collect();
                d.sort_by(f64::total_cmp);
                prop_assert_eq!(d.len(), bin.count);
                if let Some(q) = bin.summary {
                    prop_assert_eq!(q.min, d[0]);
                    prop_assert_eq!(q.max, d[d.len() - 1]);
                    let mid = (d.len() - 1) as f64 / 2.0;
                    let med = (d[mid.floor() as usize] + d[mid.ceil() as usize]) / 2.0;
                    prop_assert!((q.median - med).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn mre_rigid_invariance(seed in 0u64..500, angle in -3.0f64..3.0, tx in -50.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let norm = random_points(&mut rng, 10);
            let dis: Vec<_> = norm.iter()
                .map(|p| Point2::new(p.x + rng.random_range(-4.0..4.0), p.y + rng.random_range(-4.0..4.0)))
                .collect();
            let t = RigidTransform::from_angle(angle, Vector2::new(tx, -tx / 2.0));
            let moved: Vec<_> = dis.iter().map(|p| t.apply(*p)).collect();
            let pairing = identity_pairing(10);
            let a = mre_ap(&[PairedMinutiae { distorted: set(&dis), normal: set(&norm), pairing: pairing.clone() }]).unwrap();
            let b = mre_ap(&[PairedMinutiae { distorted: set(&moved), normal: set(&norm), pairing: pairing.clone() }]).unwrap();
            let c = mre_ap(&[PairedMinutiae { distorted: set(&dis), normal: set(&norm.iter().map(|p| t.apply(*p)).collect::<Vec<_>>()), pairing }]).unwrap();
            prop_assert!((a.mre - b.mre).abs() < 1e-9);
            prop_assert!((a.mre - c.mre).abs() < 1e-9);
        }

        #[test]
        fn det_monotone_and_rank_nondecreasing(scores in proptest::collection::vec(0.0f64..1.0, 20..80)) {
            let mut e = Vec::new();
            for (i, s) in scores.iter().enumerate() {
                e.push(entry(&(i / 4).to_string(), &(i % 4).to_string(), i % 4 == 0, *s));
            }
            let m = ScoreMatrix::new(e);
            let curve = det_curve(&m).unwrap();
            for w in curve.windows(2) {
                prop_assert!(w[1].fmr <= w[0].fmr && w[1].fnmr >= w[0].fnmr);
            }
            let mut prev = 0.0;
            for k in 1..=4 {
                let r = rank_k(&m, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
            }
            prop_assert_eq!(prev, 1.0);
        }
    }
}
