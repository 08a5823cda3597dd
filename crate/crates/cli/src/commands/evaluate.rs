use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use log::info;

use dfr_core::datagen::{DatasetManifest, Split};
use dfr_core::eval::{det_curve, improvement_bins, matcher_by_name, rank_k, MreAp, ScoreMatrix};
use dfr_net::checkpoint::load_checkpoint;
use dfr_net::rectify::evaluate_rectification_with;

use crate::error::{require, CliError, Result};
use crate::provenance::Provenance;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mre,
    Ap,
    /// Identification rate within the top k.
    Rank(usize),
    Det,
    Improvement,
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mre" => Ok(Self::Mre),
            "ap" => Ok(Self::Ap),
            "det" => Ok(Self::Det),
            "improvement" => Ok(Self::Improvement),
            _ => s
                .strip_prefix("rank")
                .and_then(|k| k.trim_start_matches('-').parse().ok())
                .filter(|&k| k >= 1)
                .map(Self::Rank)
                .ok_or_else(|| format!("unknown metric {s:?}")),
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Dataset to rectify and score with minutiae correspondences.
    #[arg(long, requires = "checkpoint", conflicts_with = "scores")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "valid")]
    pub split: String,
    /// `gt`, `mnn` or `file:<path>`.
    #[arg(long, default_value = "gt")]
    pub matcher: String,
    /// Score CSV (probe_id, gallery_id, label, score).
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Scores of the same comparisons after rectification.
    #[arg(long, requires = "scores")]
    pub after: Option<PathBuf>,
    /// Bin edges over the original genuine scores for `improvement`.
    #[arg(long, value_delimiter = ',')]
    pub bins: Option<Vec<f64>>,
    /// Comma-separated: mre, ap, rank<k>, det, improvement.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<Metric>>,
    #[arg(long)]
    pub output: PathBuf,
}

/// Long-format rows `metric,series,x,value`.
#[derive(Debug, Default)]
struct Table(Vec<(String, String, String, f64)>);

impl Table {
    fn push(&mut self, metric: impl Into<String>, series: &str, x: impl ToString, value: f64) {
        self.0.push((metric.into(), series.into(), x.to_string(), value));
    }

    fn to_csv(&self, prov: &Provenance) -> String {
        let mut s = prov.header();
        s.push_str("metric,series,x,value\n");
        for (m, series, x, v) in &self.0 {
            let _ = writeln!(s, "{m},{series},{x},{v}");
        }
        s
    }
}

pub fn run(a: &Args) -> Result<()> {
    let (table, prov) = match (&a.manifest, &a.scores) {
        (Some(m), None) => rectification(a, m)?,
        (None, Some(s)) => scores(a, s)?,
        _ => return Err(CliError::validation("give either --manifest with --checkpoint, or --scores")),
    };
    fs::write(&a.output, table.to_csv(&prov))?;
    for (m, series, x, v) in &table.0 {
        if x.is_empty() {
            info!("{m} {series}: {v:.4}");
        }
    }
    Ok(())
}

fn rectification(a: &Args, manifest: &PathBuf) -> Result<(Table, Provenance)> {
    let metrics = a.metrics.clone().unwrap_or_else(|| vec![Metric::Mre, Metric::Ap]);
    if let Some(m) = metrics.iter().find(|m| !matches!(m, Metric::Mre | Metric::Ap)) {
        return Err(CliError::validation(format!("{m:?} needs --scores")));
    }
    let ckpt = a.checkpoint.as_ref().expect("clap enforces --checkpoint");
    require(manifest, "manifest")?;
    require(ckpt, "checkpoint")?;
    let split: Split = a.split.parse()?;
    let matcher = matcher_by_name(&a.matcher)?;
    let m = DatasetManifest::load(manifest)?;
    let (model, _) = load_checkpoint(ckpt)?;
    let r = evaluate_rectification_with(&model, &m, split, matcher.as_ref())?;
    let mut t = Table::default();
    let rows: [(&str, MreAp); 3] = [("unrectified", r.unrectified), ("rectified", r.rectified), ("ground_truth", r.ground_truth)];
    for metric in &metrics {
        for (series, v) in rows {
            match metric {
                Metric::Mre => t.push("mre", series, "", v.mre),
                _ => t.push("ap", series, "", v.ap),
            }
        }
    }
    t.push("samples", "all", "", r.samples as f64);
    let prov = Provenance::new("evaluate")
        .input("manifest", manifest)?
        .input("checkpoint", ckpt)?
        .set("split", split)
        .set("matcher", &a.matcher);
    Ok((t, prov))
}

fn scores(a: &Args, path: &PathBuf) -> Result<(Table, Provenance)> {
    let default = if a.after.is_some() { vec![Metric::Rank(1), Metric::Det, Metric::Improvement] } else { vec![Metric::Rank(1), Metric::Det] };
    let metrics = a.metrics.clone().unwrap_or(default);
    require(path, "scores")?;
    let before = ScoreMatrix::load(path)?;
    let after = match &a.after {
        Some(p) => {
            require(p, "scores")?;
            Some(ScoreMatrix::load(p)?)
        }
        None => None,
    };
    let sets: Vec<(&str, &ScoreMatrix)> =
        std::iter::once(("before", &before)).chain(after.as_ref().map(|s| ("after", s))).collect();
    let mut t = Table::default();
    for metric in &metrics {
        match *metric {
            Metric::Mre | Metric::Ap => return Err(CliError::validation(format!("{metric:?} needs --manifest"))),
            Metric::Rank(k) => {
                for (series, s) in &sets {
                    t.push(format!("rank{k}"), series, "", rank_k(s, k)?);
                }
            }
            Metric::Det => {
                for (series, s) in &sets {
                    for p in det_curve(s)? {
                        t.push("det_fnmr", series, p.fmr, p.fnmr);
                    }
                }
            }
            Metric::Improvement => {
                let after = after.as_ref().ok_or_else(|| CliError::validation("improvement needs --after"))?;
                let edges = a.bins.as_ref().ok_or_else(|| CliError::validation("improvement needs --bins"))?;
                let genuine = ScoreMatrix::new(before.entries.iter().filter(|e| e.genuine).cloned().collect());
                let b: Vec<f64> = genuine.entries.iter().map(|e| e.score).collect();
                let aft = after.aligned_with(&genuine)?;
                for bin in improvement_bins(&b, &aft, edges)? {
                    let series = format!("[{} {})", bin.lo, bin.hi);
                    t.push("improvement", &series, "count", bin.count as f64);
                    if let Some(q) = bin.summary {
                        for (x, v) in [("min", q.min), ("q1", q.q1), ("median", q.median), ("q3", q.q3), ("max", q.max)] {
                            t.push("improvement", &series, x, v);
                        }
                    }
                }
            }
        }
    }
    let mut prov = Provenance::new("evaluate").input("scores", path)?;
    if let Some(p) = &a.after {
        prov = prov.input("after", p)?;
    }
    Ok((t, prov))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_names() {
        assert_eq!("mre".parse::<Metric>().unwrap(), Metric::Mre);
        assert_eq!("rank1".parse::<Metric>().unwrap(), Metric::Rank(1));
        assert_eq!("rank-10".parse::<Metric>().unwrap(), Metric::Rank(10));
        assert!("rank0".parse::<Metric>().is_err());
        assert!("eer".parse::<Metric>().is_err());
    }
}
