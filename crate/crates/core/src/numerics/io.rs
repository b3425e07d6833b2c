//! Flat binary tensor container with a JSON sidecar.
//!
//! File layout: one record per tensor, back to back. Each record is the
//! magic bytes `P4TZ`, a little-endian u32 rank, `rank` little-endian u64
//! extents, then the elements as 64-bit little-endian floats in row-major
//! order. A sidecar at `<path>.json` names each tensor in file order and
//! repeats its shape, so files stay inspectable without the binary reader.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

const MAGIC: &[u8; 4] = b"P4TZ";

#[derive(Debug, Serialize, Deserialize)]
struct SidecarEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    tensors: Vec<SidecarEntry>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Write named tensors to `path` (binary) and `<path>.json` (names/shapes).
/// Order is preserved; names must be unique.
pub fn save_tensors(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    for (i, (name, _)) in tensors.iter().enumerate() {
        if tensors[..i].iter().any(|(n, _)| n == name) {
            return Err(Error::Data(format!("duplicate tensor name '{name}'")));
        }
    }
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            buf.extend_from_slice(&(e as u64).to_le_bytes());
        }
        buf.extend_from_slice(&t.le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    let sidecar = Sidecar {
        tensors: tensors
            .iter()
            .map(|(name, t)| SidecarEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

/// Read the container back, pairing records with sidecar names in order.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut f = fs::File::open(path)?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)?;
    let mut off = 0usize;
    let mut out = Vec::with_capacity(sidecar.tensors.len());

    let take = |off: &mut usize, n: usize| -> Result<std::ops::Range<usize>> {
        if *off + n > buf.len() {
            return Err(Error::Data(format!(
                "tensor container truncated at byte {} of {}",
                *off,
                buf.len()
            )));
        }
        let r = *off..*off + n;
        *off += n;
        Ok(r)
    };

    for entry in sidecar.tensors {
        let magic = &buf[take(&mut off, 4)?];
        if magic != MAGIC {
            return Err(Error::Data(format!(
                "bad magic for tensor '{}': {:?}",
                entry.name, magic
            )));
        }
        let rank_bytes = &buf[take(&mut off, 4)?];
        let rank = u32::from_le_bytes(rank_bytes.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let eb = &buf[take(&mut off, 8)?];
            shape.push(u64::from_le_bytes(eb.try_into().unwrap()) as usize);
        }
        if shape != entry.shape {
            return Err(Error::Data(format!(
                "tensor '{}' shape mismatch: sidecar {:?}, container {:?}",
                entry.name, entry.shape, shape
            )));
        }
        let n: usize = shape.iter().product();
        let data_range = take(&mut off, n * 8)?;
        let data: Vec<f64> = buf[data_range]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((entry.name, Tensor::new(shape, data)?));
    }
    if off != buf.len() {
        return Err(Error::Data(format!(
            "tensor container has {} trailing bytes not named in sidecar",
            buf.len() - off
        )));
    }
    Ok(out)
}
