// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary checkpoint container.
//!
//! Layout: 8 magic bytes, a little-endian `u64` header length, a JSON header
//! with the config, vocabulary and tensor table, then every tensor as raw
//! little-endian `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyLM, Vocab, Weights};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SETKELM1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in values from the start of the data section.
    offset: usize,
}

pub fn to_bytes(model: &ToyLM) -> Result<Vec<u8>> {
    let names = Weights::tensor_names(model.config.n_layers);
    let tensors = model.weights.tensors();
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, (shape, data)) in names.into_iter().zip(&tensors) {
        entries.push(TensorEntry {
            name,
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        vocab: model.vocab.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, data) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ToyLM> {
    let bad = |m: &str| Error::Invalid(format!("checkpoint: {m}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
    header.config.validate()?;
    if header.vocab.len() != header.config.vocab_size {
        return Err(bad("vocabulary size disagrees with config"));
    }
    let data = &bytes[data_start..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values"));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut named = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let len: usize = t.shape.iter().product();
        let slice = values
            .get(t.offset..t.offset + len)
            .ok_or_else(|| bad(&format!("tensor `{}` out of bounds", t.name)))?;
        named.push((t.name, t.shape, slice.to_vec()));
    }
    let weights = Weights::from_named(&header.config, named)?;
    Ok(ToyLM {
        config: header.config,
        vocab: header.vocab,
        weights,
    })
}

pub fn save(model: &ToyLM, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ToyLM> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let vocab = Vocab::build(["x y z"]);
        let m = ToyLM::new(ModelConfig::tiny(vocab.len()), vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }

    #[test]
    fn rejects_garbage() {
        assert!(from_bytes(b"not a checkpoint").is_err());
        let vocab = Vocab::build(["x"]);
        let m = ToyLM::new(ModelConfig::tiny(vocab.len()), vocab).unwrap();
        let mut bytes = to_bytes(&m).unwrap();
        bytes.truncate(bytes.len() - 8);
        assert!(from_bytes(&bytes).is_err());
    }
}
