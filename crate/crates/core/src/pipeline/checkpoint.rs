//! Versioned binary checkpoints: `DAPO` magic, u32 format version, u64 header
//! length, a JSON header, then every tensor as little-endian f64 in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::AdapterStack;
use crate::encoders::{BackboneWeights, PrefixState, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::optim::Adam;
use crate::prompts::PromptBank;
use crate::rng::{RngHandle, RngState};

use super::{DapoModel, LossRecord, RunConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"DAPO";
/// Magic of a standalone pretrained-backbone file.
pub const BACKBONE_MAGIC: &[u8; 4] = b"DAPB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RngEntry {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct AdamEntry {
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vec<String>,
    train_defects: Vec<String>,
    epoch: usize,
    step_in_epoch: usize,
    cursor: usize,
    order: Vec<usize>,
    rng: RngEntry,
    adam: AdamEntry,
    log: Vec<LossRecord>,
    tensors: Vec<TensorEntry>,
}

fn tensor_list(t: &Trainer) -> Vec<(String, Tensor)> {
    let m = &t.model;
    let mut out: Vec<(String, Tensor)> = m
        .backbone
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (format!("backbone.{n}"), t.clone()))
        .collect();
    out.push(("prompt.V".into(), m.bank.normal.clone()));
    out.push(("prompt.W".into(), m.bank.abnormal.clone()));
    for (i, u) in m.prefix.text.iter().enumerate() {
        out.push((format!("prefix.text.{i}"), u.clone()));
    }
    for (i, u) in m.prefix.vision.iter().enumerate() {
        out.push((format!("prefix.vision.{i}"), u.clone()));
    }
    for (i, (w, b)) in m.adapters.weights.iter().zip(&m.adapters.biases).enumerate() {
        out.push((format!("adapter.{i}.weight"), w.clone()));
        out.push((format!("adapter.{i}.bias"), b.clone()));
    }
    let shapes: Vec<Vec<usize>> = m.trainable().iter().map(|(_, t)| t.shape().to_vec()).collect();
    for (kind, buf) in [("m", &t.adam.m), ("v", &t.adam.v)] {
        for (i, (data, shape)) in buf.iter().zip(&shapes).enumerate() {
            let tensor = Tensor::new(shape.clone(), data.clone()).expect("moment matches parameter shape");
            out.push((format!("adam.{kind}.{i}"), tensor));
        }
    }
    out
}

fn frame<H: Serialize>(magic: &[u8; 4], header: &H, tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|(_, t)| 8 * t.len()).sum::<usize>());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Split a framed file into its header bytes and the tensors it lists.
fn unframe<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    entries: impl Fn(&'a [u8]) -> Result<Vec<TensorEntry>>,
) -> Result<(&'a [u8], Vec<(String, Tensor)>)> {
    if bytes.len() < 16 || &bytes[..4] != magic {
        return Err(bad(format!("missing {} magic header", String::from_utf8_lossy(magic))));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let mut offset = 16 + hlen;
    let mut tensors = Vec::new();
    for entry in entries(body)? {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * n)
            .ok_or_else(|| bad(format!("truncated tensor {}", entry.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        offset += 8 * n;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((body, tensors))
}

fn entries_of(tensors: &[(String, Tensor)]) -> Vec<TensorEntry> {
    tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

/// Serialize the full training state.
pub fn to_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let tensors = tensor_list(t);
    let state = t.rng.state();
    let header = Header {
        config: t.model.config.clone(),
        vocab: t.model.vocab.tokens().to_vec(),
        train_defects: t.model.train_defects.clone(),
        epoch: t.epoch,
        step_in_epoch: t.step_in_epoch,
        cursor: t.cursor,
        order: t.order.clone(),
        rng: RngEntry {
            seed: hex::encode(state.seed),
            stream: state.stream,
            word_pos: state.word_pos.to_string(),
        },
        adam: AdamEntry {
            t: t.adam.t,
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
        },
        log: t.log.clone(),
        tensors: entries_of(&tensors),
    };
    frame(MAGIC, &header, &tensors)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Rebuild a trainer from [`to_bytes`] output.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let (body, tensors) = unframe(bytes, MAGIC, |body| {
        Ok(serde_json::from_slice::<Header>(body)?.tensors)
    })?;
    let header: Header = serde_json::from_slice(body)?;
    let cfg = header.config;
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    let mut it = tensors.into_iter().peekable();
    let mut take_prefix = |prefix: &str| -> Vec<Tensor> {
        let mut out = Vec::new();
        while it.peek().is_some_and(|(n, _)| n.starts_with(prefix)) {
            out.push(it.next().expect("peeked").1);
        }
        out
    };
    let backbone = BackboneWeights::from_tensors(&cfg.encoder, vocab.len(), take_prefix("backbone."), true)?;
    let prompt = take_prefix("prompt.");
    let [v, w]: [Tensor; 2] = prompt.try_into().map_err(|_| bad("expected prompt.V and prompt.W"))?;
    let bank = PromptBank::new(v, w, cfg.prompts_per_state, cfg.context_len, &header.train_defects, &vocab)?;
    let prefix = PrefixState {
        text: take_prefix("prefix.text."),
        vision: take_prefix("prefix.vision."),
    };
    let adapter_tensors = take_prefix("adapter.");
    if adapter_tensors.len() % 2 != 0 {
        return Err(bad("adapter weights and biases are unpaired"));
    }
    let adapters = AdapterStack {
        weights: adapter_tensors.iter().step_by(2).cloned().collect(),
        biases: adapter_tensors.iter().skip(1).step_by(2).cloned().collect(),
    };
    let m: Vec<Vec<f64>> = take_prefix("adam.m.").into_iter().map(Tensor::into_data).collect();
    let v: Vec<Vec<f64>> = take_prefix("adam.v.").into_iter().map(Tensor::into_data).collect();
    if let Some((name, _)) = it.next() {
        return Err(bad(format!("unexpected tensor {name}")));
    }
    let model = DapoModel {
        config: cfg,
        vocab,
        backbone,
        bank,
        prefix,
        adapters,
        train_defects: header.train_defects,
    };
    let expected: Vec<Vec<usize>> = model.trainable().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let layout_ok = model.prefix.text.len() == model.config.encoder.text_prefix_depth
        && model.prefix.vision.len() == model.config.encoder.depth
        && model.adapters.stages() == model.config.encoder.tap_layers.len()
        && (m.is_empty() || m.len() == expected.len() && v.len() == expected.len());
    if !layout_ok {
        return Err(bad("tensor layout does not match the stored config"));
    }
    let adam = Adam {
        lr: header.adam.lr,
        beta1: header.adam.beta1,
        beta2: header.adam.beta2,
        eps: header.adam.eps,
        t: header.adam.t,
        m,
        v,
    };
    let seed: [u8; 32] = hex::decode(&header.rng.seed)
        .ok()
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| bad("rng seed is not 32 hex bytes"))?;
    let word_pos: u128 = header.rng.word_pos.parse().map_err(|_| bad("rng word position"))?;
    let rng = RngHandle::from_state(&RngState {
        seed,
        stream: header.rng.stream,
        word_pos,
    });
    Ok(Trainer::resume(
        model,
        adam,
        header.epoch,
        header.step_in_epoch,
        header.order,
        header.cursor,
        rng,
        header.log,
    ))
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, to_bytes(t)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[derive(Serialize, Deserialize)]
struct BackboneHeader {
    encoder: crate::encoders::EncoderConfig,
    vocab: Vec<String>,
    sha256: String,
    tensors: Vec<TensorEntry>,
}

/// A frozen backbone with the encoder shape and vocabulary it was trained with.
pub fn backbone_to_bytes(
    weights: &BackboneWeights,
    encoder: &crate::encoders::EncoderConfig,
    vocab: &Vocabulary,
) -> Result<Vec<u8>> {
    let tensors: Vec<(String, Tensor)> = weights
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let header = BackboneHeader {
        encoder: encoder.clone(),
        vocab: vocab.tokens().to_vec(),
        sha256: weights.sha256(),
        tensors: entries_of(&tensors),
    };
    frame(BACKBONE_MAGIC, &header, &tensors)
}

/// Inverse of [`backbone_to_bytes`]; the result is flagged frozen and its
/// hash must match the stored one.
pub fn backbone_from_bytes(
    bytes: &[u8],
) -> Result<(BackboneWeights, crate::encoders::EncoderConfig, Vocabulary)> {
    let (body, tensors) = unframe(bytes, BACKBONE_MAGIC, |body| {
        Ok(serde_json::from_slice::<BackboneHeader>(body)?.tensors)
    })?;
    let header: BackboneHeader = serde_json::from_slice(body)?;
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    let weights = BackboneWeights::from_tensors(
        &header.encoder,
        vocab.len(),
        tensors.into_iter().map(|(_, t)| t).collect(),
        true,
    )?;
    if weights.sha256() != header.sha256 {
        return Err(bad("backbone hash does not match its header"));
    }
    Ok((weights, header.encoder, vocab))
}

pub fn save_backbone(
    weights: &BackboneWeights,
    encoder: &crate::encoders::EncoderConfig,
    vocab: &Vocabulary,
    path: &Path,
) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, backbone_to_bytes(weights, encoder, vocab)?).map_err(|e| Error::io(path, e))
}

pub fn load_backbone(path: &Path) -> Result<(BackboneWeights, crate::encoders::EncoderConfig, Vocabulary)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    backbone_from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
