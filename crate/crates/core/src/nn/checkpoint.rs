//! Single-file weight container.
//!
//! Byte layout, designed for cross-language reads:
//! - bytes 0..4: magic `CTWT`
//! - bytes 4..8: format version, little-endian u32 (currently 1)
//! - bytes 8..16: manifest length in bytes, little-endian u64
//! - manifest: UTF-8 JSON `{"dtype":"f32","byte_order":"little","tensors":
//!   [{"name":...,"shape":[...],"offset":...,"nbytes":...},...]}` where
//!   offsets are relative to the end of the manifest
//! - payload: the tensors' raw little-endian f32 data, concatenated.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"CTWT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    byte_order: String,
    tensors: Vec<TensorEntry>,
}

/// Write named tensors to `path`.
pub fn save_checkpoint(
    path: &Path,
    tensors: &[(String, ArrayD<f32>)],
) -> Result<(), CheckpointError> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        let nbytes = (t.len() * 4) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            nbytes,
        });
        offset += nbytes;
    }
    let manifest = serde_json::to_vec(&Manifest {
        dtype: "f32".into(),
        byte_order: "little".into(),
        tensors: entries,
    })
    .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, t) in tensors {
        let owned;
        let view = if t.is_standard_layout() {
            t
        } else {
            owned = t.as_standard_layout().to_owned();
            &owned
        };
        for &x in view.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read all tensors from a checkpoint, in manifest order.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>, CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)?;
    let manifest_len = u64::from_le_bytes(buf8) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if manifest.dtype != "f32" || manifest.byte_order != "little" {
        return Err(CheckpointError::Malformed(format!(
            "unsupported dtype/byte order {}/{}",
            manifest.dtype, manifest.byte_order
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.nbytes as usize != n * 4 {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} claims {} bytes for shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        let start = e.offset as usize;
        let end = start + e.nbytes as usize;
        if end > payload.len() {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} exceeds payload",
                e.name
            )));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((
            e.name,
            ArrayD::from_shape_vec(e.shape, data)
                .map_err(|err| CheckpointError::Malformed(err.to_string()))?,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ctwt");
        let tensors = vec![
            (
                "a.weight".to_string(),
                ArrayD::from_shape_vec(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, 9.9]).unwrap(),
            ),
            (
                "b.bias".to_string(),
                ArrayD::from_shape_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            ),
        ];
        save_checkpoint(&path, &tensors).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in tensors.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
    }

    #[test]
    fn rejects_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
