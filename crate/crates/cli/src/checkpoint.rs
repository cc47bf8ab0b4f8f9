//! Binary tensor container used for checkpoints and event-frame datasets.
//!
//! Layout, all integers little-endian:
//! `"TRSNNCKP" | u32 version | [u8; 32] config digest | u32 count |`
//! then per entry `u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data[..]`.

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use trevsnn_core::network::{ModelWeights, NetworkConfig};

use crate::config::architecture_digest;

pub const MAGIC: &[u8; 8] = b"TRSNNCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_container(digest: &[u8; 32], entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(digest);
    out.extend_from_slice(&u32::try_from(entries.len())?.to_le_bytes());
    for e in entries {
        ensure!(
            e.shape.iter().product::<usize>() == e.data.len(),
            "entry {} has shape {:?} but {} values",
            e.name,
            e.shape,
            e.data.len()
        );
        out.extend_from_slice(&u32::try_from(e.name.len())?.to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&u32::try_from(e.shape.len())?.to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&u32::try_from(d)?.to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.with_context(|| format!("container truncated at byte {}", self.at))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn read_container(bytes: &[u8]) -> Result<([u8; 32], Vec<Entry>)> {
    let mut c = Cursor { bytes, at: 0 };
    ensure!(c.take(8)? == MAGIC, "not a TRSNNCKP container");
    let version = c.u32()? as u32;
    ensure!(
        version == VERSION,
        "unsupported container version {version}"
    );
    let digest: [u8; 32] = c.take(32)?.try_into()?;
    let count = c.u32()?;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec()).context("entry name is not UTF-8")?;
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .context("entry size overflows")?;
        let raw = c.take(n.checked_mul(4).context("entry size overflows")?)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        entries.push(Entry { name, shape, data });
    }
    ensure!(
        c.at == bytes.len(),
        "{} trailing bytes after the last entry",
        bytes.len() - c.at
    );
    Ok((digest, entries))
}

pub fn weights_to_entries(weights: &ModelWeights) -> Vec<Entry> {
    let mut out = Vec::new();
    weights.visit(|name, shape, data| {
        out.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        })
    });
    out
}

pub fn save_weights(path: &Path, weights: &ModelWeights, config: &NetworkConfig) -> Result<()> {
    let bytes = write_container(&architecture_digest(config), &weights_to_entries(weights))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Restores weights for `config`, refusing checkpoints of another architecture.
pub fn load_weights(path: &Path, config: &NetworkConfig) -> Result<ModelWeights> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (digest, entries) =
        read_container(&bytes).with_context(|| format!("in {}", path.display()))?;
    ensure!(
        digest == architecture_digest(config),
        "{} was written for a different network configuration",
        path.display()
    );
    let mut weights = ModelWeights::init(config)?;
    let mut i = 0;
    let mut mismatch = None;
    weights.visit_mut(|name, shape, data| {
        match entries.get(i) {
            Some(e) if e.name == name && e.shape == shape => data.copy_from_slice(&e.data),
            _ => {
                mismatch.get_or_insert_with(|| name.to_string());
            }
        }
        i += 1;
    });
    if let Some(name) = mismatch {
        bail!(
            "{}: entry for {name} is missing or has the wrong shape",
            path.display()
        );
    }
    ensure!(
        i == entries.len(),
        "{}: {} extra entries",
        path.display(),
        entries.len() - i
    );
    Ok(weights)
}
