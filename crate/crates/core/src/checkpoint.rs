//! Versioned binary checkpoints.
//!
//! Layout: magic `SDCK`, format version (u32 LE), header length (u64 LE),
//! a JSON header (config hash and full config text, alphabet hash, step
//! counter, metric snapshot, shape table), then each tensor's raw
//! little-endian f32 values in shape-table order, and a trailing SHA-256
//! over everything before it. Loads verify the checksum and every shape
//! before any value reaches a model; there is no partial load.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alphabet::hex_string;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Scalar;

const MAGIC: &[u8; 4] = b"SDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config_hash: String,
    pub alphabet_hash: String,
    pub step: u64,
    /// Free-form metric snapshot at save time.
    pub metrics: serde_json::Value,
    /// Full canonical config text so a checkpoint is self-describing.
    pub config_text: String,
    /// (name, rows, cols) per tensor, in file order.
    pub shapes: Vec<(String, usize, usize)>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: IndexMap<String, Array2<f32>>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex_string(&Sha256::digest(bytes))
}

/// Snapshot a parameter store as f32 tensors, sorted by name.
pub fn store_to_tensors<F: Scalar>(store: &ParamStore<F>) -> IndexMap<String, Array2<f32>> {
    let mut names = store.names();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let v = store.get(&n).unwrap().value().mapv(|x| x.into_f64() as f32);
            (n, v)
        })
        .collect()
}

pub fn save(
    path: impl AsRef<Path>,
    config_hash: &str,
    config_text: &str,
    alphabet_hash: &str,
    step: u64,
    metrics: serde_json::Value,
    tensors: &IndexMap<String, Array2<f32>>,
) -> Result<()> {
    let shapes: Vec<(String, usize, usize)> = tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.nrows(), t.ncols()))
        .collect();
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config_hash: config_hash.to_string(),
        alphabet_hash: alphabet_hash.to_string(),
        step,
        metrics,
        config_text: config_text.to_string(),
        shapes,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, t) in tensors.iter() {
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let tmp = path.as_ref().with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path.as_ref())?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 + 4 + 8 + 32 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, stored_digest) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint(
            "checksum mismatch (truncated or corrupted file)".into(),
        ));
    }
    if &body[0..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if body.len() < 16 + header_len {
        return Err(Error::Checkpoint("header length exceeds file".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let mut offset = 16 + header_len;
    let mut tensors = IndexMap::new();
    for (name, rows, cols) in &header.shapes {
        let count = rows * cols;
        let need = count * 4;
        if body.len() < offset + need {
            return Err(Error::Checkpoint(format!(
                "tensor {name} runs past end of file"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let at = offset + i * 4;
            data.push(f32::from_le_bytes(body[at..at + 4].try_into().unwrap()));
        }
        offset += need;
        let arr = Array2::from_shape_vec((*rows, *cols), data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        tensors.insert(name.clone(), arr);
    }
    if offset != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint { header, tensors })
}

/// Copy checkpoint tensors into every store parameter whose name starts
/// with `prefix` (empty prefix = all). Every targeted parameter must be
/// present with the exact shape, otherwise nothing is loaded.
pub fn load_into_store<F: Scalar>(
    ckpt: &Checkpoint,
    store: &ParamStore<F>,
    prefix: &str,
) -> Result<usize> {
    let targets: Vec<(String, (usize, usize))> = store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, p)| (n.clone(), p.shape()))
        .collect();
    if targets.is_empty() {
        return Err(Error::Checkpoint(format!(
            "store has no parameters under {prefix:?}"
        )));
    }
    // Validate everything before mutating anything.
    for (name, (r, c)) in &targets {
        let t = ckpt
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing tensor {name}")))?;
        if t.nrows() != *r || t.ncols() != *c {
            return Err(Error::Checkpoint(format!(
                "tensor {name} shape {}x{} does not match parameter {r}x{c}; refusing to load",
                t.nrows(),
                t.ncols()
            )));
        }
    }
    for (name, _) in &targets {
        let t = &ckpt.tensors[name];
        store
            .get(name)
            .unwrap()
            .set_value(t.mapv(|x| F::of_f64(x as f64)));
    }
    Ok(targets.len())
}

/// Convert checkpoint tensors to the model element type.
pub fn tensors_as<F: Scalar>(ckpt: &Checkpoint) -> IndexMap<String, Array2<F>> {
    ckpt.tensors
        .iter()
        .map(|(n, t)| (n.clone(), t.mapv(|x| F::of_f64(x as f64))))
        .collect()
}
