//! Checkpoint blob and manifest.
//!
//! The weight blob is a flat list of named f64 tensors (little-endian). The
//! sidecar JSON manifest {config digest, iteration, metric snapshot} is the
//! portable contract; the blob layout is implementation-defined.

use crate::error::{HermesError, Result};
use crate::tensor::Tensor;
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"HERMESCK";
const VERSION: u32 = 1;

/// Sidecar manifest written next to every checkpoint blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_digest: String,
    pub iteration: usize,
    pub metrics: serde_json::Value,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HermesError::Checkpoint(format!("manifest encode: {e}")))?;
        std::fs::write(path, text).map_err(|e| HermesError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| HermesError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| HermesError::Checkpoint(format!("manifest decode: {e}")))
    }
}

/// Path of the manifest belonging to a checkpoint blob.
pub fn manifest_path(ckpt: &Path) -> std::path::PathBuf {
    ckpt.with_extension("json")
}

pub fn save_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| HermesError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(entries.len() as u64).to_le_bytes())?;
        for (name, t) in entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| HermesError::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = std::fs::File::open(path).map_err(|e| HermesError::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut read_exact = |n: usize| -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        r.read_exact(&mut buf)
            .map_err(|e| HermesError::io(path, e))?;
        Ok(buf)
    };
    let magic = read_exact(8)?;
    if magic != MAGIC {
        return Err(HermesError::Checkpoint(format!(
            "{} is not a checkpoint blob",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(read_exact(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(HermesError::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = u64::from_le_bytes(read_exact(8)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(read_exact(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(read_exact(name_len)?)
            .map_err(|e| HermesError::Checkpoint(format!("bad name: {e}")))?;
        let ndim = u32::from_le_bytes(read_exact(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(read_exact(8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product::<usize>().max(1);
        let n_elem = if ndim == 0 { 1 } else { len };
        let raw = read_exact(n_elem * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| HermesError::Checkpoint(format!("bad tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::scalar;

    #[test]
    fn tensor_blob_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let entries = vec![
            ("a.w".to_string(), Tensor::from_shape_fn(IxDyn(&[2, 3]), |ix| (ix[0] * 3 + ix[1]) as f64)),
            ("meta/iter".to_string(), scalar(42.0)),
        ];
        save_tensors(&path, &entries).unwrap();
        let back = load_tensors(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.w");
        assert_eq!(back[0].1, entries[0].1);
        assert_eq!(back[1].1, entries[1].1);

        let m = Manifest {
            config_digest: "abc".into(),
            iteration: 7,
            metrics: serde_json::json!({"dice_mean": 0.5}),
        };
        let mp = manifest_path(&path);
        m.save(&mp).unwrap();
        let mb = Manifest::load(&mp).unwrap();
        assert_eq!(mb.iteration, 7);
        assert_eq!(mb.config_digest, "abc");
    }

    #[test]
    fn rejects_non_checkpoint_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_tensors(&path).is_err());
    }
}
