//! Binary model checkpoints.
//!
//! Layout: 8-byte magic, u32 format version, u32 spec length and the spec
//! as JSON, then every parameter tensor as little-endian f32 in layer
//! order (weights before bias), and finally an FNV-1a digest of all
//! preceding bytes as a u64 trailer. Optimizer state is deliberately not
//! saved; a resumed run restarts momentum from zero.

use std::fs;
use std::path::Path;

use crate::digest::fnv1a64;
use crate::error::{Error, Result};
use crate::report::write_atomic;

use super::{Model, ModelSpec};

const MAGIC: &[u8; 8] = b"AAUGCKPT";
const VERSION: u32 = 1;

/// Serialize the model to the checkpoint byte format.
pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let spec_json = serde_json::to_vec(&model.spec).map_err(|e| Error::Format {
        path: "checkpoint".into(),
        offset: 0,
        detail: format!("could not encode model spec: {e}"),
    })?;
    let mut out = Vec::with_capacity(16 + spec_json.len() + model.param_count() * 4 + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&spec_json);
    for tensor in model.param_tensors() {
        for v in tensor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = fnv1a64(&out);
    out.extend_from_slice(&digest.to_le_bytes());
    Ok(out)
}

/// Write a checkpoint atomically.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model)?)
}

/// Read a checkpoint back into a model with zeroed counters.
pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, &path.display().to_string())
}

/// Decode checkpoint bytes; `origin` names the source in errors.
pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Model> {
    let fail = |offset: u64, detail: String| Error::Format {
        path: origin.to_string(),
        offset,
        detail,
    };

    if bytes.len() < 16 + 8 {
        return Err(fail(0, format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[0..8] != MAGIC {
        return Err(fail(0, "bad magic, not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fail(
            8,
            format!("unsupported checkpoint version {version}, expected {VERSION}"),
        ));
    }

    let payload_end = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[payload_end..].try_into().unwrap());
    let actual = fnv1a64(&bytes[..payload_end]);
    if stored != actual {
        return Err(fail(
            payload_end as u64,
            format!("checksum mismatch: stored {stored:016x}, computed {actual:016x}"),
        ));
    }

    let spec_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let spec_end = 16 + spec_len;
    if spec_end > payload_end {
        return Err(fail(12, format!("spec length {spec_len} exceeds file size")));
    }
    let spec: ModelSpec = serde_json::from_slice(&bytes[16..spec_end])
        .map_err(|e| fail(16, format!("could not decode model spec: {e}")))?;

    // Materialize the architecture, then overwrite parameters from disk.
    let mut model = Model::new(spec, 0)?;
    let expected = model.param_count() * 4;
    let have = payload_end - spec_end;
    if have != expected {
        return Err(fail(
            spec_end as u64,
            format!("expected {expected} parameter bytes, found {have}"),
        ));
    }
    let mut cursor = spec_end;
    for tensor in model.param_tensors_mut() {
        for v in tensor.iter_mut() {
            *v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            cursor += 4;
        }
    }
    model.reset_counters();
    Ok(model)
}
