//! Tensor files: raw row-major little-endian `f64`, with shapes kept in a JSON
//! manifest next to them. A tensor named `encoder/l0/w` lives at
//! `<dir>/encoder/l0/w.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::tensor::Tensor;
use crate::{Error, Result};

/// Tensor name to shape.
pub type ShapeManifest = BTreeMap<String, Vec<usize>>;

pub fn tensor_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn decode(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Data(format!(
            "tensor payload of {} bytes is not a whole number of f64",
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path, shape: &[usize]) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, shape)
}

/// Writes every tensor under `dir` and returns their shapes.
pub fn save_tensors<'a>(
    dir: &Path,
    tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
) -> Result<ShapeManifest> {
    let mut manifest = ShapeManifest::new();
    for (name, t) in tensors {
        write_tensor(&tensor_path(dir, name), t)?;
        manifest.insert(name.clone(), t.shape().to_vec());
    }
    Ok(manifest)
}

pub fn load_tensors(dir: &Path, manifest: &ShapeManifest) -> Result<BTreeMap<String, Tensor>> {
    manifest
        .iter()
        .map(|(name, shape)| Ok((name.clone(), read_tensor(&tensor_path(dir, name), shape)?)))
        .collect()
}
