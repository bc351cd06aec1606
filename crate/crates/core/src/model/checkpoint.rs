//! Versioned checkpoint container.
//!
//! ```text
//! magic "CTCSTCKP" | header_len u32 LE | JSON header | f64 LE blobs
//! ```
//!
//! Blobs follow the header's tensor list: all parameters, then the Adam
//! first moments and second moments when an optimizer state is present.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AcousticModel, AdamConfig, Gradients, ModelConfig, ModelError, OptimizerState, Tensor};

pub const CHECKPOINT_VERSION: &str = "ctcst-ckpt-v1";
const MAGIC: &[u8; 8] = b"CTCSTCKP";

/// Position of the training schedule. All training randomness is derived
/// from `(seed, epoch, step)`, so this is the whole RNG state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AcousticModel,
    pub optimizer: Option<OptimizerState>,
    pub rng: RngCursor,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: (usize, usize),
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    model: ModelConfig,
    param_version: u64,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerEntry>,
    rng: RngCursor,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(ckpt, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Loads a checkpoint; `expected_classes` guards against a vocabulary mismatch.
pub fn load_checkpoint(path: impl AsRef<Path>, expected_classes: Option<usize>) -> Result<Checkpoint, ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let ckpt = read_checkpoint(&bytes)?;
    if let Some(expected) = expected_classes {
        if ckpt.model.config().classes != expected {
            return Err(ModelError::VocabMismatch { expected, found: ckpt.model.config().classes });
        }
    }
    Ok(ckpt)
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, w: &mut W) -> Result<(), ModelError> {
    let header = Header {
        version: CHECKPOINT_VERSION.into(),
        model: ckpt.model.config().clone(),
        param_version: ckpt.model.version(),
        tensors: ckpt.model.params().iter().map(|t| TensorEntry { name: t.name.clone(), shape: t.shape }).collect(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerEntry { config: o.config.clone(), step: o.step }),
        rng: ckpt.rng,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut blobs: Vec<&[f64]> = ckpt.model.params().iter().map(|t| t.data.as_slice()).collect();
    if let Some(o) = &ckpt.optimizer {
        blobs.extend(o.m.tensors.iter().map(Vec::as_slice));
        blobs.extend(o.v.tensors.iter().map(Vec::as_slice));
    }
    for blob in blobs {
        for x in blob {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    let corrupt = |m: String| ModelError::Checkpoint(m);
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a ctcst checkpoint".into()));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = &bytes[12..];
    if hlen > body.len() {
        return Err(corrupt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| corrupt(format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {:?}", header.version)));
    }
    let mut data = &body[hlen..];
    let sizes: Vec<usize> = header
        .tensors
        .iter()
        .map(|t| t.shape.0.checked_mul(t.shape.1).ok_or_else(|| corrupt(format!("tensor {} too large", t.name))))
        .collect::<Result<_, _>>()?;
    let per_copy: usize = sizes.iter().try_fold(0usize, |a, &s| a.checked_add(s)).ok_or_else(|| corrupt("size overflow".into()))?;
    let copies = if header.optimizer.is_some() { 3 } else { 1 };
    if per_copy.checked_mul(8 * copies) != Some(data.len()) {
        return Err(corrupt(format!("expected {} payload values, file has {} bytes", per_copy * copies, data.len())));
    }
    if data.chunks_exact(8).any(|c| !f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]).is_finite()) {
        return Err(corrupt("non-finite value in payload".into()));
    }
    if let Some(o) = &header.optimizer {
        o.config.validate().map_err(|e| corrupt(format!("optimizer: {e}")))?;
    }
    let mut take = |n: usize| -> Vec<f64> {
        let (head, rest) = data.split_at(n * 8);
        data = rest;
        head.chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect()
    };
    let params: Vec<Tensor> = header
        .tensors
        .iter()
        .zip(&sizes)
        .map(|(t, &n)| Tensor { name: t.name.clone(), shape: t.shape, data: take(n) })
        .collect();
    let model = AcousticModel::from_parts(header.model, params, header.param_version)?;
    let optimizer = header.optimizer.map(|o| {
        let m = Gradients { tensors: sizes.iter().map(|&n| take(n)).collect() };
        let v = Gradients { tensors: sizes.iter().map(|&n| take(n)).collect() };
        OptimizerState { config: o.config, step: o.step, m, v }
    });
    if optimizer.as_ref().is_some_and(|o| o.v.tensors.iter().flatten().any(|&x| x < 0.0)) {
        return Err(corrupt("negative second moment".into()));
    }
    Ok(Checkpoint { model, optimizer, rng: header.rng })
}
