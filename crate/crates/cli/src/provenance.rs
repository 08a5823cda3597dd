//! Provenance headers: tool version, command, seed and SHA-256 of every
//! input. Text artifacts carry them as `# key: value` lines, PNGs as tEXt
//! chunks, and binary formats in a `<file>.prov` sidecar.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::GrayImage;
use sha2::{Digest, Sha256};

use crate::error::{require, CliError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub entries: Vec<(String, String)>,
}

pub const TOOL: &str = concat!("dfr ", env!("CARGO_PKG_VERSION"));

impl Provenance {
    pub fn new(command: &str) -> Self {
        Self { entries: vec![("tool".into(), TOOL.into()), ("command".into(), command.into())] }
    }

    pub fn set(mut self, key: &str, value: impl ToString) -> Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn seed(self, seed: u64) -> Self {
        self.set("seed", seed)
    }

    /// Record the hash of a file, or of a directory tree.
    pub fn input(self, label: &str, path: &Path) -> Result<Self> {
        require(path, label)?;
        let h = hash_path(path)?;
        Ok(self.set(&format!("input.{label}"), format!("sha256:{h}")))
    }

    pub fn header(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect()
    }

    pub fn sidecar_path(artifact: &Path) -> PathBuf {
        let mut s = artifact.as_os_str().to_owned();
        s.push(".prov");
        PathBuf::from(s)
    }

    pub fn write_sidecar(&self, artifact: &Path) -> Result<()> {
        fs::write(Self::sidecar_path(artifact), self.header())?;
        Ok(())
    }
}

/// SHA-256 of a file's bytes; for a directory, of every file's relative
/// path and hash in sorted order.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for rel in files {
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(hash_path(&path.join(&rel))?.as_bytes());
            h.update([b'\n']);
        }
        Ok(hex::encode(h.finalize()))
    } else {
        let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

/// 8-bit grayscale PNG with the provenance as tEXt chunks.
pub fn save_png(img: &GrayImage, path: &Path, prov: &Provenance) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width(), img.height());
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| CliError::Runtime(format!("{}: {e}", path.display()));
    for (k, v) in &prov.entries {
        enc.add_text_chunk(k.clone(), v.clone()).map_err(png_err)?;
    }
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(img.as_raw()).map_err(png_err)?;
    w.finish().map_err(png_err)?;
    Ok(())
}

/// Sorted files in `dir` with extension `ext` (case-insensitive).
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    require(dir, "directory")?;
    if !dir.is_dir() {
        return Err(CliError::validation(format!("{} is not a directory", dir.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case(ext)))
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_lines_and_sidecar_name() {
        let p = Provenance::new("fit-model").seed(7).set("components", 8);
        let h = p.header();
        assert!(h.starts_with(&format!("# tool: {TOOL}\n# command: fit-model\n")));
        assert!(h.ends_with("# seed: 7\n# components: 8\n"));
        assert_eq!(Provenance::sidecar_path(Path::new("a/model.pca")), Path::new("a/model.pca.prov"));
    }

    #[test]
    fn directory_hash_depends_on_names_and_contents() {
        let d = tempfile::tempdir().unwrap();
        fs::write(d.path().join("a.txt"), "1").unwrap();
        fs::create_dir(d.path().join("sub")).unwrap();
        fs::write(d.path().join("sub/b.txt"), "2").unwrap();
        let h0 = hash_path(d.path()).unwrap();
        assert_eq!(h0, hash_path(d.path()).unwrap());
        fs::write(d.path().join("sub/b.txt"), "3").unwrap();
        let h1 = hash_path(d.path()).unwrap();
        assert_ne!(h0, h1);
        fs::rename(d.path().join("a.txt"), d.path().join("c.txt")).unwrap();
        assert_ne!(h1, hash_path(d.path()).unwrap());
        assert_eq!(
            hash_path(&d.path().join("c.txt")).unwrap(),
            "6b86b273ff34fce19d6b804eff5a3f5747ada4eaa22f1d49c01e52ddb7875b4b"
        );
    }

    #[test]
    fn png_round_trips_pixels_and_text() {
        let d = tempfile::tempdir().unwrap();
        let img = GrayImage::from_fn(5, 3, |x, y| image::Luma([(x * 40 + y) as u8]));
        let path = d.path().join("x.png");
        save_png(&img, &path, &Provenance::new("rectify").seed(3)).unwrap();
        assert_eq!(image::open(&path).unwrap().to_luma8(), img);
        let dec = png::Decoder::new(std::io::BufReader::new(fs::File::open(&path).unwrap()));
        let info = dec.read_info().unwrap();
        let text: Vec<_> = info.info().uncompressed_latin1_text.iter().map(|t| (t.keyword.clone(), t.text.clone())).collect();
        assert!(text.contains(&("seed".to_string(), "3".to_string())));
        assert!(text.contains(&("command".to_string(), "rectify".to_string())));
    }
}
