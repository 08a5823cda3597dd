use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEntry {
    pub probe: String,
    pub gallery: String,
    pub genuine: bool,
    pub score: f64,
}

/// All probe–gallery comparisons of an experiment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreMatrix {
    pub entries: Vec<ScoreEntry>,
}

impl ScoreMatrix {
    pub fn new(entries: Vec<ScoreEntry>) -> Self {
        Self { entries }
    }

    /// Distinct probe ids in sorted order.
    pub fn probes(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.probe.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// `(genuine scores, impostor scores)`.
    pub fn split(&self) -> (Vec<f64>, Vec<f64>) {
        let mut g = Vec::new();
        let mut i = Vec::new();
        for e in &self.entries {
            if e.genuine { g.push(e.score) } else { i.push(e.score) }
        }
        (g, i)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("probe_id,gallery_id,label,score\n");
        for e in &self.entries {
            let label = if e.genuine { "genuine" } else { "impostor" };
            s.push_str(&format!("{},{},{label},{}\n", e.probe, e.gallery, e.score));
        }
        s
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (n == 0 && line.starts_with("probe_id")) {
                continue;
            }
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", n + 1));
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [probe, gallery, label, score] = cols[..] else {
                return Err(bad("expected probe_id,gallery_id,label,score"));
            };
            let genuine = match label {
                "genuine" | "1" => true,
                "impostor" | "0" => false,
                _ => return Err(bad("label must be genuine or impostor")),
            };
            let score: f64 = score.parse().map_err(|_| bad("bad score"))?;
            if !score.is_finite() {
                return Err(bad("score is not finite"));
            }
            entries.push(ScoreEntry { probe: probe.into(), gallery: gallery.into(), genuine, score });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Scores aligned to the comparisons of `other`, for before/after
    /// studies.
    pub fn aligned_with(&self, other: &ScoreMatrix) -> Result<Vec<f64>> {
        other
            .entries
            .iter()
            .map(|o| {
                self.entries
                    .iter()
                    .find(|e| e.probe == o.probe && e.gallery == o.gallery)
                    .map(|e| e.score)
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("no score for {} vs {}", o.probe, o.gallery))
                    })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let m = ScoreMatrix::new(vec![
            ScoreEntry { probe: "a".into(), gallery: "b".into(), genuine: true, score: 12.5 },
            ScoreEntry { probe: "a".into(), gallery: "c".into(), genuine: false, score: 3.0 },
        ]);
        let p = Path::new("s.csv");
        assert_eq!(ScoreMatrix::parse_csv(&m.to_csv(), p).unwrap(), m);
        assert!(ScoreMatrix::parse_csv("a,b,maybe,1\n", p).is_err());
        assert!(ScoreMatrix::parse_csv("a,b,genuine,nan\n", p).is_err());
        assert!(ScoreMatrix::parse_csv("a,b,genuine\n", p).is_err());
        assert_eq!(m.aligned_with(&m).unwrap(), vec![12.5, 3.0]);
    }
}
