//! Binary checkpoint:
//!
//! ```text
//! magic "CTXLMCKP" | u32 version | u64 header length | header JSON
//! u32 tensor count | per tensor: u32 name length, name, u32 rank, u64 dims…, f64 payload
//! 32-byte SHA-256 of everything before it
//! ```
//! All integers and floats are little-endian; payloads are row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::ContextVocab;
use crate::corpus::Vocab;
use crate::models::{param_shapes, Model, ModelConfig, ModelError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CTXLMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A trained model with the vocabularies needed to encode its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub vocab: Vocab,
    pub context_vocab: ContextVocab,
    /// Free-form run information (train config, corpus hash, …).
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    context_vocab: ContextVocab,
    metadata: serde_json::Value,
}

pub fn write_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let header = Header {
        config: ckpt.model.config.clone(),
        vocab: ckpt.vocab.clone(),
        context_vocab: ckpt.context_vocab.clone(),
        metadata: ckpt.metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let entries = ckpt.model.params.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or(CheckpointError::Truncated)
    }
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    let mut r = Reader {
        buf: &bytes[MAGIC.len()..],
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let n = r.len()?;
    let json = r.take(n)?;
    let header: Header = serde_json::from_slice(json).map_err(|e| {
        if Sha256::digest(body).as_slice() != digest {
            CheckpointError::Truncated
        } else {
            CheckpointError::Corrupt(format!("header: {e}"))
        }
    })?;
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Corrupt(
            "checksum mismatch (file truncated or modified)".into(),
        ));
    }

    let shapes = param_shapes(&header.config);
    let expected = shapes.entries();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} tensors, found {count}",
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, _) in &expected {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Corrupt("tensor name".into()))?;
        if name != *want_name {
            return Err(CheckpointError::Corrupt(format!(
                "expected tensor {want_name}, found {name}"
            )));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        tensors.push(
            Tensor::from_vec(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?,
        );
    }
    if r.buf.len() != 32 {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    let params = shapes.with_items(tensors).expect("one tensor per slot");
    Ok(Checkpoint {
        model: Model::new(header.config, params)?,
        vocab: header.vocab.reindexed(),
        context_vocab: header.context_vocab.reindexed(),
        metadata: header.metadata,
    })
}

pub fn save_checkpoint<T: Scalar>(
    ckpt: &Checkpoint<T>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    std::fs::write(path, write_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<Checkpoint<T>, CheckpointError> {
    read_checkpoint(&std::fs::read(path)?)
}
