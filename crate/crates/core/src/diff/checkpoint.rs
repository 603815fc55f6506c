//! On-disk parameter checkpoints.
//!
//! Layout of a checkpoint directory:
//!
//! ```text
//! header.json      format version, model kind, architecture config, config hash,
//!                  and the ordered list of parameters (name, shape, blob file)
//! p0000.bin ...    one little-endian f32 blob per parameter, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub params: Vec<ParamEntry>,
}

/// SHA-256 of the compact JSON encoding of `config`, hex encoded.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save<T: Real, C: Serialize>(
    dir: &Path,
    kind: &str,
    config: &C,
    store: &ParamStore<T>,
) -> Result<CheckpointHeader> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for (i, p) in store.iter().enumerate() {
        let file = format!("p{i:04}.bin");
        let mut bytes = Vec::with_capacity(p.value.len() * 4);
        for &x in p.value.data() {
            bytes.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            file,
        });
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        config_hash: config_hash(config)?,
        params,
    };
    fs::write(dir.join(HEADER_FILE), serde_json::to_string_pretty(&header)?)?;
    Ok(header)
}

pub fn read_header(dir: &Path) -> Result<CheckpointHeader> {
    let text = fs::read_to_string(dir.join(HEADER_FILE))?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok(header)
}

pub fn load<T: Real>(dir: &Path) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let header = read_header(dir)?;
    let mut store = ParamStore::new();
    for entry in &header.params {
        let bytes = fs::read(dir.join(&entry.file))?;
        let n: usize = entry.shape.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Checkpoint(format!(
                "{}: expected {} bytes, found {}",
                entry.file,
                n * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        store.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok((header, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store
            .add(
                "a.w",
                Tensor::new(vec![2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.3]).unwrap(),
            )
            .unwrap();
        store.add("b", Tensor::new(vec![1], vec![1e-30]).unwrap()).unwrap();
        let header = save(dir.path(), "test", &("cfg", 3), &store).unwrap();
        let (loaded_header, loaded) = load::<f32>(dir.path()).unwrap();
        assert_eq!(header, loaded_header);
        for (a, b) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[4])).unwrap();
        save(dir.path(), "test", &1u8, &store).unwrap();
        fs::write(dir.path().join("p0000.bin"), [0u8; 8]).unwrap();
        assert!(matches!(load::<f32>(dir.path()), Err(Error::Checkpoint(_))));
    }
}
