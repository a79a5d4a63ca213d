//! Model checkpoint persistence.
//!
//! A checkpoint is a single binary file:
//!
//! ```text
//! magic "LCAM" | version u32 LE | header_len u32 LE | header JSON | payloads
//! ```
//!
//! The header maps each tensor name to its shape, dtype (always `"f32"`),
//! and byte offset into the payload region. Names are sorted, offsets are
//! assigned in that order, and the JSON is emitted with sorted keys and no
//! insignificant whitespace, so saving the same tensors always produces the
//! same bytes. Payloads are raw little-endian `f32` values, row-major.
//!
//! Loading fills an already-constructed model: the caller builds the model
//! from its config, then [`load`] overwrites every parameter and state
//! tensor by name. Any mismatch between the file and the model — missing
//! names, extra names, shape disagreement — is an error rather than a
//! silent partial load.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::params::HasParams;
use crate::tensor::Mat;

/// File magic for checkpoint files.
pub const MAGIC: [u8; 4] = *b"LCAM";

/// Current checkpoint format version.
pub const VERSION: u32 = 1;

/// Header entry for one tensor.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TensorEntry {
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    /// Element type; only `"f32"` is defined.
    pub dtype: String,
    /// Byte offset of this tensor's payload, relative to the end of the
    /// header.
    pub offset: u64,
}

/// Errors raised while reading or writing checkpoints.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("unsupported dtype {dtype:?} for tensor {name:?}")]
    BadDtype { name: String, dtype: String },
    #[error("tensor {name:?} has shape {got:?} in file but {want:?} in model")]
    ShapeMismatch {
        name: String,
        got: [usize; 2],
        want: [usize; 2],
    },
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
    #[error("checkpoint contains unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("payload for tensor {0:?} is truncated")]
    Truncated(String),
}

/// Snapshot every parameter value and state tensor of a model, keyed by
/// visitor name. Gradients are not part of a checkpoint.
fn collect<M: HasParams>(model: &mut M) -> BTreeMap<String, Mat> {
    let mut tensors = BTreeMap::new();
    model.visit_params("", &mut |name, p| {
        tensors.insert(name, p.v.clone());
    });
    model.visit_state("", &mut |name, m| {
        tensors.insert(name, m.clone());
    });
    tensors
}

/// Serialize a model's tensors to `path`.
///
/// The same model state always produces byte-identical files.
pub fn save<M: HasParams>(path: &Path, model: &mut M) -> Result<(), CheckpointError> {
    let tensors = collect(model);
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, m) in &tensors {
        header.insert(
            name.clone(),
            TensorEntry {
                shape: [m.rows, m.cols],
                dtype: "f32".to_string(),
                offset,
            },
        );
        offset += (m.data.len() * 4) as u64;
    }
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for m in tensors.values() {
        for &v in &m.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint's header and payload region.
fn read_raw(path: &Path) -> Result<(BTreeMap<String, TensorEntry>, Vec<u8>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    r.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: BTreeMap<String, TensorEntry> = serde_json::from_slice(&header_bytes)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok((header, payload))
}

/// Load a checkpoint into an already-constructed model, overwriting every
/// parameter and state tensor. The file and the model must declare exactly
/// the same tensor names and shapes.
pub fn load<M: HasParams>(path: &Path, model: &mut M) -> Result<(), CheckpointError> {
    let (header, payload) = read_raw(path)?;

    let fill = |name: &str, m: &mut Mat| -> Result<(), CheckpointError> {
        let entry = header
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        if entry.dtype != "f32" {
            return Err(CheckpointError::BadDtype {
                name: name.to_string(),
                dtype: entry.dtype.clone(),
            });
        }
        if entry.shape != [m.rows, m.cols] {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                got: entry.shape,
                want: [m.rows, m.cols],
            });
        }
        let start = entry.offset as usize;
        let bytes = m.data.len() * 4;
        let end = start
            .checked_add(bytes)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| CheckpointError::Truncated(name.to_string()))?;
        for (v, chunk) in m.data.iter_mut().zip(payload[start..end].chunks_exact(4)) {
            *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        Ok(())
    };

    let mut seen = Vec::new();
    let mut first_err = None;
    model.visit_params("", &mut |name, p| {
        if first_err.is_none() {
            if let Err(e) = fill(&name, &mut p.v) {
                first_err = Some(e);
            }
        }
        seen.push(name);
    });
    model.visit_state("", &mut |name, m| {
        if first_err.is_none() {
            if let Err(e) = fill(&name, m) {
                first_err = Some(e);
            }
        }
        seen.push(name);
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    seen.sort();
    for name in header.keys() {
        if seen.binary_search(name).is_err() {
            return Err(CheckpointError::UnknownTensor(name.clone()));
        }
    }
    Ok(())
}

/// List the tensors in a checkpoint without loading it into a model.
pub fn inspect(path: &Path) -> Result<BTreeMap<String, TensorEntry>, CheckpointError> {
    Ok(read_raw(path)?.0)
}
