//! Bit-exact binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! - magic `MCKP`, format version `u32`
//! - header length `u32`, then that many bytes of UTF-8 JSON holding the
//!   architecture descriptor and free-form metadata
//! - tensor count `u32`, then per tensor: name (`u32` length + bytes),
//!   dtype tag (`u8`, 1 = f64), rank (`u32`), dims (`u64` each), raw data.
//!
//! `load(save(params))` reproduces every tensor bitwise.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{Tensor, TensorMap};
use super::{ArchConfig, BackboneKind, Model, ModelParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionUnsupported(u32),
    #[error("tensor shape mismatch: {0}")]
    TensorShapeMismatch(String),
    #[error("checkpoint file is truncated")]
    TruncatedFile,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint header: {0}")]
    HeaderJson(#[from] serde_json::Error),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    meta: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    f.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;

    let header = serde_json::to_vec(&Header {
        arch: params.arch.clone(),
        meta: meta.clone(),
    })?;
    f.write_all(&(header.len() as u32).to_le_bytes()).map_err(io)?;
    f.write_all(&header).map_err(io)?;

    f.write_all(&(params.tensors.len() as u32).to_le_bytes())
        .map_err(io)?;
    for (name, t) in params.tensors.iter() {
        f.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        f.write_all(name.as_bytes()).map_err(io)?;
        f.write_all(&[DTYPE_F64]).map_err(io)?;
        f.write_all(&(t.dims().len() as u32).to_le_bytes())
            .map_err(io)?;
        for &d in t.dims() {
            f.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
        }
        for &v in t.data() {
            f.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    f.flush().map_err(io)?;
    Ok(())
}

/// Loads a checkpoint, validating tensor shapes against the stored
/// architecture (when the backbone is one this crate can build).
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, serde_json::Value), CheckpointError> {
    let io = |source: std::io::Error| {
        if source.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::TruncatedFile
        } else {
            CheckpointError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    };
    let mut f = BufReader::new(std::fs::File::open(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?);

    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut f).map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionUnsupported(version));
    }

    let header_len = read_u32(&mut f).map_err(io)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes).map_err(io)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let n_tensors = read_u32(&mut f).map_err(io)? as usize;
    let mut tensors = TensorMap::new();
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut f).map_err(io)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes).map_err(io)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
        let mut dtype = [0u8; 1];
        f.read_exact(&mut dtype).map_err(io)?;
        if dtype[0] != DTYPE_F64 {
            return Err(CheckpointError::Malformed(format!(
                "unsupported dtype tag {} for tensor '{name}'",
                dtype[0]
            )));
        }
        let rank = read_u32(&mut f).map_err(io)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            f.read_exact(&mut b).map_err(io)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut b = [0u8; 8];
        for _ in 0..len {
            f.read_exact(&mut b).map_err(io)?;
            data.push(f64::from_le_bytes(b));
        }
        tensors.insert(&name, Tensor::from_vec(&dims, data));
    }

    // anything after the declared tensors is corruption
    let mut probe = [0u8; 1];
    match f.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => {
            return Err(CheckpointError::Malformed(
                "trailing bytes after final tensor".into(),
            ))
        }
        Err(e) => return Err(io(e)),
    }

    let params = ModelParams {
        arch: header.arch,
        tensors,
    };
    validate_against_arch(&params)?;
    Ok((params, header.meta))
}

/// Loads a checkpoint into a fixed-architecture context: the stored tensors
/// must match `expected` exactly.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ArchConfig,
) -> Result<(ModelParams, serde_json::Value), CheckpointError> {
    let (params, meta) = load_checkpoint(path)?;
    if &params.arch != expected {
        return Err(CheckpointError::TensorShapeMismatch(format!(
            "checkpoint was saved for {:?}/{} features/{} hardness head, expected {:?}/{} features/{} hardness head",
            params.arch.backbone,
            params.arch.feature_dim,
            params.arch.hardness_head_mode.as_str(),
            expected.backbone,
            expected.feature_dim,
            expected.hardness_head_mode.as_str(),
        )));
    }
    Ok((params, meta))
}

fn validate_against_arch(params: &ModelParams) -> Result<(), CheckpointError> {
    if params.arch.backbone == BackboneKind::External {
        // no local spec to compare against
        return Ok(());
    }
    let model = Model::new(params.arch.clone())
        .map_err(|e| CheckpointError::Malformed(format!("stored architecture: {e}")))?;
    let specs = model.param_specs();
    if specs.len() != params.tensors.len() {
        return Err(CheckpointError::TensorShapeMismatch(format!(
            "architecture defines {} tensors, checkpoint holds {}",
            specs.len(),
            params.tensors.len()
        )));
    }
    for (name, dims) in specs {
        let t = params.tensors.get(&name).ok_or_else(|| {
            CheckpointError::TensorShapeMismatch(format!("missing tensor '{name}'"))
        })?;
        if t.dims() != dims.as_slice() {
            return Err(CheckpointError::TensorShapeMismatch(format!(
                "tensor '{name}' has dims {:?}, architecture expects {dims:?}",
                t.dims()
            )));
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
