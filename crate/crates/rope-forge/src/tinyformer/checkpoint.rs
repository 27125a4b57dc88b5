//! Checkpoint persistence: magic "TFCK", u32 version, length-prefixed JSON
//! header, then raw little-endian f32 tensor data in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModelCheckpoint, ModelConfig, Params};
use crate::rope::RescaleFactors;

const MAGIC: &[u8; 4] = b"TFCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed checkpoint {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("checkpoint header invalid: {0}")]
    Header(String),
    #[error("checkpoint contains non-finite values in tensor {0}")]
    NonFinite(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorSpec {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    train_steps: u64,
    rescale_used: Option<RescaleFactors>,
    rng_seed: u64,
    tensors: Vec<TensorSpec>,
}

/// Serialize a checkpoint; writing, reading, and writing again produces
/// byte-identical files.
pub fn save(ckpt: &ModelCheckpoint, path: &Path) -> Result<(), CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    for (name, data) in ckpt.params.named_tensors() {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
    }
    let tensors = Params::<f32>::tensor_specs(&ckpt.config)
        .into_iter()
        .map(|(name, shape)| TensorSpec { name, shape })
        .collect();
    let header = Header {
        config: ckpt.config.clone(),
        train_steps: ckpt.train_steps,
        rescale_used: ckpt.rescale_used.clone(),
        rng_seed: ckpt.rng_seed,
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, data) in ckpt.params.named_tensors() {
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(&buf).map_err(io_err)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelCheckpoint, CheckpointError> {
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let bad = |reason: String| CheckpointError::Malformed {
        path: path.display().to_string(),
        reason,
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    if bytes.len() < 12 || &bytes[0..4] != MAGIC {
        return Err(bad("missing TFCK magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if 12 + header_len > bytes.len() {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| bad(format!("header json: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    let rescale_used = match header.rescale_used {
        Some(rf) => Some(
            rf.validated(header.config.rotary.original_len())
                .map_err(|e| CheckpointError::Header(e.to_string()))?,
        ),
        None => None,
    };

    // Tensor list must match what the config dictates, in order.
    let expected = Params::<f32>::tensor_specs(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(bad(format!(
            "tensor count {} != expected {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    for (spec, (name, shape)) in header.tensors.iter().zip(expected.iter()) {
        if &spec.name != name || &spec.shape != shape {
            return Err(bad(format!(
                "tensor {} shape {:?} does not match expected {} {:?}",
                spec.name, spec.shape, name, shape
            )));
        }
    }

    let mut params: Params<f32> = Params::zeros(&header.config);
    let mut pos = 12 + header_len;
    for (name, data) in params.named_tensors_mut() {
        let n = data.len();
        let end = pos + 4 * n;
        if end > bytes.len() {
            return Err(bad(format!("truncated tensor data at {name}")));
        }
        for (i, chunk) in bytes[pos..end].chunks_exact(4).enumerate() {
            data[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite(name));
        }
        pos = end;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data".into()));
    }

    Ok(ModelCheckpoint {
        config: header.config,
        params,
        train_steps: header.train_steps,
        rescale_used,
        rng_seed: header.rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{ntk_factors, RotaryConfig};
    use crate::tinyformer::{init_model, ModelConfig};

    fn small() -> ModelCheckpoint {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            head_dim: 4,
            vocab_size: 20,
            trained_len: 16,
            tied_embeddings: false,
            rotary: RotaryConfig::with_default_base(4, 16).unwrap(),
        };
        let mut ckpt = init_model(&cfg, 99).unwrap();
        ckpt.train_steps = 12;
        ckpt.rescale_used = Some(ntk_factors(&cfg.rotary, 4.0).unwrap());
        ckpt
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let ckpt = small();
        save(&ckpt, &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        let a = std::fs::read(&p1).unwrap();
        let b = std::fs::read(&p2).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with(b"TFCK"));
        assert_eq!(loaded.train_steps, 12);
        assert_eq!(
            loaded.rescale_used.as_ref().unwrap().factors(),
            ckpt.rescale_used.as_ref().unwrap().factors()
        );
        assert_eq!(loaded.params, ckpt.params);
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        std::fs::write(&p, b"NOPE0000").unwrap();
        assert!(matches!(load(&p), Err(CheckpointError::Malformed { .. })));
    }

    #[test]
    fn rejects_nonfinite_params() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.ckpt");
        let mut ckpt = small();
        ckpt.params.wte.data[3] = f32::NAN;
        assert!(matches!(save(&ckpt, &p), Err(CheckpointError::NonFinite(_))));
    }
}
