//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `DFRCKPT1`, a little-endian `u32` format
//! version, a `u64` header length and a JSON header (network config,
//! variant, parameter names and shapes, normalization names and sizes,
//! free-form metadata), then every parameter as little-endian `f32` in
//! header order, then each normalization layer's running mean and variance.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, NetworkConfig, Variant};

pub const MAGIC: &[u8; 8] = b"DFRCKPT1";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: NetworkConfig,
    variant: Variant,
    params: Vec<(String, [usize; 4])>,
    norms: Vec<(String, usize)>,
    meta: BTreeMap<String, String>,
}

fn write_f32s(w: &mut impl Write, v: &[f32]) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_f32s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn write_checkpoint(model: &Model, meta: &BTreeMap<String, String>, mut w: impl Write) -> Result<()> {
    let s = &model.store;
    let header = Header {
        version: VERSION,
        config: model.config.clone(),
        variant: model.variant,
        params: s.params.iter().map(|p| (p.name.clone(), p.value.shape)).collect(),
        norms: s.norms.iter().map(|n| (n.name.clone(), n.mean.len())).collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &s.params {
        write_f32s(&mut w, &p.value.data)?;
    }
    for n in &s.norms {
        write_f32s(&mut w, &n.mean)?;
        write_f32s(&mut w, &n.var)?;
    }
    Ok(())
}

/// Model and metadata from a checkpoint stream; `path` names it in errors.
pub fn read_checkpoint(mut r: impl Read, path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    let bad = |m: String| Error::format(path, m);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(|_| bad("truncated header".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    r.read_exact(&mut b8).map_err(|_| bad("truncated header".into()))?;
    let len = u64::from_le_bytes(b8) as usize;
    if len > 1 << 26 {
        return Err(bad(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header".into()))?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("header: {e}")))?;
    if h.version != version {
        return Err(bad("header version disagrees with the preamble".into()));
    }
    let mut model = Model::build(h.config, h.variant, 0).map_err(|e| bad(e.to_string()))?;
    let s = &mut model.store;
    let layout_ok = h.params.len() == s.params.len()
        && h.norms.len() == s.norms.len()
        && h.params.iter().zip(&s.params).all(|((n, sh), p)| *n == p.name && *sh == p.value.shape)
        && h.norms.iter().zip(&s.norms).all(|((n, c), q)| *n == q.name && *c == q.mean.len());
    if !layout_ok {
        return Err(bad("parameter layout does not match its config".into()));
    }
    let trunc = |_| bad("truncated payload".into());
    for p in &mut s.params {
        p.value.data = read_f32s(&mut r, p.value.numel()).map_err(trunc)?;
    }
    for n in &mut s.norms {
        n.mean = read_f32s(&mut r, n.mean.len()).map_err(trunc)?;
        n.var = read_f32s(&mut r, n.var.len()).map_err(trunc)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after payload".into()));
    }
    Ok((model, h.meta))
}

pub fn save_checkpoint(model: &Model, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, meta, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, BTreeMap<String, String>)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes[..], path)
}
