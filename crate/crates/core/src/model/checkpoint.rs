//! Checkpoint container.
//!
//! ```text
//! b"PREMOD1" | u64 LE header length | JSON header | f64 LE blocks in layout order
//! ```

use super::{ModelConfig, ModelError, ModelParams};
use crate::autodiff::{Tensor, TrainHyper};
use crate::encode::{EncoderConfig, VocabFingerprint};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 7] = b"PREMOD1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("Corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("VersionMismatch: checkpoint format {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("VocabMismatch: checkpoint vocabulary differs from the encoder's")]
    VocabMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    vocab: VocabFingerprint,
    encoder: Option<EncoderConfig>,
    optimizer: String,
    hyper: Option<TrainHyper>,
    tensors: Vec<TensorEntry>,
}

/// A trained model with the encoding it expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub vocab: VocabFingerprint,
    pub encoder: Option<EncoderConfig>,
    pub optimizer: String,
    pub hyper: Option<TrainHyper>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, encoder: &EncoderConfig, hyper: Option<TrainHyper>) -> Self {
        let optimizer = match &hyper {
            Some(h) => format!(
                "adam(beta1={}, beta2={}, eps={})",
                h.beta1, h.beta2, h.adam_eps
            ),
            None => "none".into(),
        };
        Checkpoint {
            params,
            vocab: encoder.fingerprints(),
            encoder: Some(encoder.clone()),
            optimizer,
            hyper,
        }
    }
}

pub fn save_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let header = Header {
        format_version: FORMAT_VERSION,
        model: ck.params.config.clone(),
        vocab: ck.vocab.clone(),
        encoder: ck.encoder.clone(),
        optimizer: ck.optimizer.clone(),
        hyper: ck.hyper.clone(),
        tensors: ck
            .params
            .names()
            .into_iter()
            .zip(&ck.params.tensors)
            .map(|(name, t)| TensorEntry {
                name,
                shape: [t.rows(), t.cols()],
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 8 * ck.params.n_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &ck.params.tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint. When `expected` is given its fingerprints must
/// match the stored ones.
pub fn load_checkpoint(
    bytes: &[u8],
    expected: Option<&VocabFingerprint>,
) -> Result<Checkpoint, CheckpointError> {
    let corrupt = |m: &str| CheckpointError::Corrupt(m.into());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("missing magic"));
    }
    let mut pos = MAGIC.len();
    let len = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
    pos += 8;
    let json = bytes
        .get(pos..pos.saturating_add(len))
        .ok_or_else(|| corrupt("truncated header"))?;
    pos += len;
    let value: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("no format version"))? as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    if let Some(exp) = expected {
        if *exp != header.vocab {
            return Err(CheckpointError::VocabMismatch);
        }
    }
    let layout = header.model.layout();
    let declared: Vec<(String, [usize; 2])> = header
        .tensors
        .iter()
        .map(|e| (e.name.clone(), e.shape))
        .collect();
    if layout != declared {
        return Err(corrupt("tensor table does not match the model config"));
    }
    let mut tensors = Vec::with_capacity(layout.len());
    for (_, [r, c]) in &layout {
        let n = r * c;
        let block = bytes
            .get(pos..pos + 8 * n)
            .ok_or_else(|| corrupt("truncated parameter block"))?;
        pos += 8 * n;
        let data = block
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Tensor::from_rows(*r, *c, data).expect("sized above"));
    }
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(Checkpoint {
        params: ModelParams::from_tensors(header.model, tensors)?,
        vocab: header.vocab,
        encoder: header.encoder,
        optimizer: header.optimizer,
        hyper: header.hyper,
    })
}
