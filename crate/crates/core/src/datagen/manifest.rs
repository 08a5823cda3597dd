use std::collections::HashSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{Augmentation, FingerprintSample};
use crate::error::{Error, Result};
use crate::eval::MinutiaeSet;
use crate::field::DistortionField;
use crate::orientation::OrientationField;
use crate::raster::{check_same_size, load_gray, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Valid,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Valid => "valid",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// How one sample was made.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub image_index: usize,
    pub augmentation: Augmentation,
    pub field_index: usize,
    /// Coefficient draws until a field without fold-over was found.
    pub attempts: u32,
    pub coefficients: Vec<f64>,
}

/// One distorted sample and the normal impression it came from. Paths are
/// relative to the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub finger: String,
    pub provenance: Provenance,
    pub normal_image: PathBuf,
    pub normal_mask: PathBuf,
    pub normal_minutiae: PathBuf,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub gt_field: PathBuf,
    pub orientation: PathBuf,
    pub minutiae: PathBuf,
}

impl ManifestEntry {
    fn sample_paths(&self) -> [&PathBuf; 5] {
        [&self.image, &self.mask, &self.gt_field, &self.orientation, &self.minutiae]
    }

    fn normal_paths(&self) -> [&PathBuf; 3] {
        [&self.normal_image, &self.normal_mask, &self.normal_minutiae]
    }
}

const MAGIC: &str = "# dfr-manifest 1";
const COLUMNS: [&str; 16] = [
    "id",
    "split",
    "finger",
    "image_index",
    "augmentation",
    "field_index",
    "attempts",
    "coefficients",
    "normal_image",
    "normal_mask",
    "normal_minutiae",
    "image",
    "mask",
    "gt_field",
    "orientation",
    "minutiae",
];

/// Tab-separated dataset index with `# key<TAB>value` provenance lines.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Replace or append a provenance line.
    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(kv) => kv.1 = value,
            None => self.meta.push((key.into(), value)),
        }
    }

    pub fn recipe_hash(&self) -> Option<&str> {
        self.meta_value("recipe_hash")
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            let _ = writeln!(s, "# {k}\t{v}");
        }
        s.push_str(&COLUMNS.join("\t"));
        s.push('\n');
        let p = |p: &PathBuf| p.to_string_lossy().into_owned();
        for e in &self.entries {
            let coeffs: Vec<String> = e.provenance.coefficients.iter().map(f64::to_string).collect();
            let row = [
                e.id.clone(),
                e.split.to_string(),
                e.finger.clone(),
                e.provenance.image_index.to_string(),
                e.provenance.augmentation.tag(),
                e.provenance.field_index.to_string(),
                e.provenance.attempts.to_string(),
                coeffs.join(","),
                p(&e.normal_image),
                p(&e.normal_mask),
                p(&e.normal_minutiae),
                p(&e.image),
                p(&e.mask),
                p(&e.gt_field),
                p(&e.orientation),
                p(&e.minutiae),
            ];
            s.push_str(&row.join("\t"));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, root: &Path, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l.trim_end()) != Some(MAGIC) {
            return Err(Error::format(path, "missing manifest header"));
        }
        let mut meta = Vec::new();
        let mut entries = Vec::new();
        let mut seen_columns = false;
        for (n, line) in lines {
            let bad = |what: String| Error::format(path, format!("line {}: {what}", n + 1));
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once('\t').ok_or_else(|| bad("expected `# key<TAB>value`".into()))?;
                meta.push((k.to_string(), v.to_string()));
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !seen_columns {
                if cols != COLUMNS {
                    return Err(bad("unexpected column header".into()));
                }
                seen_columns = true;
                continue;
            }
            if cols.len() != COLUMNS.len() {
                return Err(bad(format!("expected {} columns, got {}", COLUMNS.len(), cols.len())));
            }
            let int = |i: usize| cols[i].parse::<u64>().map_err(|_| bad(format!("{}: bad integer", COLUMNS[i])));
            let coefficients = if cols[7].is_empty() {
                Vec::new()
            } else {
                cols[7]
                    .split(',')
                    .map(|c| c.parse::<f64>().map_err(|_| bad(format!("bad coefficient {c:?}"))))
                    .collect::<Result<_>>()?
            };
            let augmentation =
                Augmentation::parse_tag(cols[4]).ok_or_else(|| bad(format!("bad augmentation {:?}", cols[4])))?;
            entries.push(ManifestEntry {
                id: cols[0].into(),
                split: cols[1].parse().map_err(|e: Error| bad(e.to_string()))?,
                finger: cols[2].into(),
                provenance: Provenance {
                    image_index: int(3)? as usize,
                    augmentation,
                    field_index: int(5)? as usize,
                    attempts: int(6)? as u32,
                    coefficients,
                },
                normal_image: cols[8].into(),
                normal_mask: cols[9].into(),
                normal_minutiae: cols[10].into(),
                image: cols[11].into(),
                mask: cols[12].into(),
                gt_field: cols[13].into(),
                orientation: cols[14].into(),
                minutiae: cols[15].into(),
            });
        }
        if !seen_columns {
            return Err(Error::format(path, "missing column header"));
        }
        let m = Self { meta, entries, root: root.to_path_buf() };
        if m.recipe_hash().is_none() {
            return Err(Error::format(path, "missing recipe_hash"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Entry paths resolve against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&std::fs::read_to_string(path)?, &root, path)
    }

    /// Unique ids, per-sample files not shared between entries, and no
    /// finger in both splits.
    pub fn check_consistency(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut sample_files = HashSet::new();
        let mut finger_split = std::collections::HashMap::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate entry id {}", e.id)));
            }
            for p in e.sample_paths() {
                if !sample_files.insert(p) {
                    return Err(Error::InvalidArgument(format!("path {} used twice", p.display())));
                }
            }
            if *finger_split.entry(e.finger.as_str()).or_insert(e.split) != e.split {
                return Err(Error::SplitLeak(e.finger.clone()));
            }
        }
        for e in &self.entries {
            if let Some(p) = e.normal_paths().into_iter().find(|p| sample_files.contains(p)) {
                return Err(Error::InvalidArgument(format!("path {} used twice", p.display())));
            }
        }
        Ok(())
    }

    /// Distorted sample with its ground truth, and its orientation labels.
    pub fn load_distorted(&self, e: &ManifestEntry) -> Result<(FingerprintSample, OrientationField)> {
        let image = load_gray(&self.resolve(&e.image))?;
        let mask = Mask::load_png(&self.resolve(&e.mask))?;
        check_same_size(
            (image.width() as usize, image.height() as usize),
            (mask.width(), mask.height()),
            "sample image and mask",
        )?;
        let gt = DistortionField::load(&self.resolve(&e.gt_field))?;
        let g = gt.geometry;
        check_same_size((g.width_px(), g.height_px()), (mask.width(), mask.height()), "ground truth and image")?;
        let orientation = OrientationField::load(&self.resolve(&e.orientation))?;
        if orientation.geometry != g {
            return Err(Error::ShapeMismatch(format!("orientation grid of {} differs from its field", e.id)));
        }
        let minutiae = MinutiaeSet::load(&self.resolve(&e.minutiae))?;
        Ok((FingerprintSample { image, mask, minutiae: Some(minutiae), gt_field: Some(gt) }, orientation))
    }

    pub fn load_normal(&self, e: &ManifestEntry) -> Result<FingerprintSample> {
        let image = load_gray(&self.resolve(&e.normal_image))?;
        let mask = Mask::load_png(&self.resolve(&e.normal_mask))?;
        let minutiae = MinutiaeSet::load(&self.resolve(&e.normal_minutiae))?;
        Ok(FingerprintSample { image, mask, minutiae: Some(minutiae), gt_field: None })
    }

    /// [`check_consistency`](Self::check_consistency), then open every
    /// referenced file.
    pub fn verify(&self) -> Result<()> {
        self.check_consistency()?;
        for e in &self.entries {
            self.load_distorted(e)?;
            self.load_normal(e)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, split: Split, finger: &str) -> ManifestEntry {
        ManifestEntry {
            id: id.into(),
            split,
            finger: finger.into(),
            provenance: Provenance {
                image_index: 1,
                augmentation: Augmentation { mirrored: true, rotation_deg: 90 },
                field_index: 3,
                attempts: 1,
                coefficients: vec![0.5, -1.25, 1e-3],
            },
            normal_image: format!("normals/{finger}.png").into(),
            normal_mask: format!("normals/{finger}_mask.png").into(),
            normal_minutiae: format!("normals/{finger}.min.txt").into(),
            image: format!("samples/{id}.png").into(),
            mask: format!("samples/{id}_mask.png").into(),
            gt_field: format!("samples/{id}.dfld").into(),
            orientation: format!("samples/{id}.ornt").into(),
            minutiae: format!("samples/{id}.min.txt").into(),
        }
    }

    fn manifest(entries: Vec<ManifestEntry>) -> DatasetManifest {
        DatasetManifest { meta: vec![("recipe_hash".into(), "ab12".into())], entries, root: "d".into() }
    }

    #[test]
    fn text_round_trip() {
        let m = manifest(vec![entry("a_0", Split::Train, "a"), entry("b_0", Split::Valid, "b")]);
        let back = DatasetManifest::parse(&m.to_text(), Path::new("d"), Path::new("d/manifest.tsv")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.recipe_hash(), Some("ab12"));
        assert_eq!(back.split(Split::Valid).count(), 1);
        let p = Path::new("m.tsv");
        assert!(DatasetManifest::parse("id\tsplit\n", p, p).is_err());
        let no_hash = m.to_text().replace("# recipe_hash\tab12\n", "");
        assert!(DatasetManifest::parse(&no_hash, p, p).is_err());
        let short = m.to_text().replace("\tsamples/b_0.min.txt", "");
        assert!(DatasetManifest::parse(&short, p, p).is_err());
    }

    #[test]
    fn consistency_checks() {
        assert!(manifest(vec![entry("a_0", Split::Train, "a"), entry("a_1", Split::Train, "a")])
            .check_consistency()
            .is_ok());
        let leak = manifest(vec![entry("a_0", Split::Train, "a"), entry("a_1", Split::Valid, "a")]);
        assert!(matches!(leak.check_consistency(), Err(Error::SplitLeak(f)) if f == "a"));
        let dup = manifest(vec![entry("a_0", Split::Train, "a"), entry("a_0", Split::Train, "a")]);
        assert!(dup.check_consistency().is_err());
        let mut clash = entry("a_1", Split::Train, "a");
        clash.gt_field = "samples/a_0.dfld".into();
        assert!(manifest(vec![entry("a_0", Split::Train, "a"), clash]).check_consistency().is_err());
    }
}
