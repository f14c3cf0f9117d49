//! Parameter checkpoints: a JSON manifest next to a little-endian raw blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Length in bytes.
    pub bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub dtype: String,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
    /// Free-form payload, e.g. the model spec.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` with the extension replaced.
pub fn save<E: Element>(
    path: &Path,
    tensors: &[(String, &Tensor<E>)],
    meta: Option<serde_json::Value>,
) -> Result<()> {
    let blob = blob_path(path);
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = bytes.len();
        t.data().iter().for_each(|v| v.write_le(&mut bytes));
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            bytes: bytes.len() - offset,
        });
    }
    let manifest = CheckpointManifest {
        dtype: E::DTYPE.to_string(),
        blob: blob.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        tensors: entries,
        meta,
    };
    fs::write(&blob, &bytes)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load<E: Element>(path: &Path) -> Result<(CheckpointManifest, Vec<(String, Tensor<E>)>)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(path)?)?;
    if manifest.dtype != E::DTYPE {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint holds {} but {} was requested",
            manifest.dtype,
            E::DTYPE
        )));
    }
    let blob_file = path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let blob = fs::read(&blob_file)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let numel: usize = e.shape.iter().product();
        if e.bytes != numel * E::BYTES {
            return Err(Error::ShapeMismatch(format!("{}: {} bytes for shape {:?}", e.name, e.bytes, e.shape)));
        }
        let raw = blob.get(e.offset..e.offset + e.bytes).ok_or_else(|| Error::TruncatedFile(blob_file.clone()))?;
        let data = raw.chunks_exact(E::BYTES).map(E::read_le).collect();
        out.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    Ok((manifest, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let a = Tensor::<f32>::new([2, 2], vec![0.1, -3.5e-8, f32::MIN_POSITIVE, 7.0]).unwrap();
        let b = Tensor::<f32>::new([3], vec![1.0 / 3.0, 2.0, -0.0]).unwrap();
        save(&path, &[("a".into(), &a), ("b".into(), &b)], None).unwrap();
        let (manifest, loaded) = load::<f32>(&path).unwrap();
        assert_eq!(manifest.tensors[1].offset, 16);
        for ((_, orig), (_, back)) in [("a", &a), ("b", &b)].iter().zip(&loaded) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(orig), bits(back));
            assert_eq!(orig.shape(), back.shape());
        }
    }

    #[test]
    fn dtype_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let a = Tensor::<f64>::zeros([2]);
        save(&path, &[("a".into(), &a)], None).unwrap();
        assert!(load::<f32>(&path).is_err());
    }
}
