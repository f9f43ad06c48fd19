//! Binary checkpoints: `MAGIC | version u32 | header_len u64 | JSON header |
//! payload`, where the payload is contiguous little-endian f64 data and the
//! header maps each tensor name to its shape and byte range.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::LoraLinear;
use crate::model::{LayerId, Linear, ModelConfig, TinyLm};

pub const MAGIC: &[u8; 8] = b"RGLUCKPT";
pub const VERSION: u32 = 1;
const DTYPE: &str = "f64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: [usize; 2],
    pub offset: usize,
    pub nbytes: usize,
    pub dtype: String,
    #[serde(default)]
    pub trainable: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub adapters: BTreeMap<String, AdapterEntry>,
    pub tensors: BTreeMap<String, TensorEntry>,
    /// Free-form echo of whatever produced the checkpoint.
    #[serde(default)]
    pub config: serde_json::Value,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Serializes named tensors (in the given order) into checkpoint bytes.
pub fn encode(
    tensors: &[(String, &Tensor)],
    model: Option<ModelConfig>,
    adapters: BTreeMap<String, AdapterEntry>,
    config: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut entries = BTreeMap::new();
    let mut payload = Vec::new();
    for (name, t) in tensors {
        let (r, c) = t.value.shape();
        let entry = TensorEntry {
            shape: [r, c],
            offset: payload.len(),
            nbytes: r * c * 8,
            dtype: DTYPE.into(),
            trainable: t.requires_grad,
        };
        for v in t.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        if entries.insert(name.clone(), entry).is_some() {
            return Err(ckpt_err(format!("duplicate tensor name {name}")));
        }
    }
    let header = Header {
        version: VERSION,
        model,
        adapters,
        tensors: entries,
        config,
    };
    let head = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + head.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses checkpoint bytes into the header and decoded tensors.
pub fn decode(bytes: &[u8]) -> Result<(Header, BTreeMap<String, Tensor>)> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ckpt_err("missing checkpoint magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ckpt_err(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let head_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if head_len > body.len() {
        return Err(ckpt_err("header length exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&body[..head_len])?;
    if header.version != version {
        return Err(ckpt_err("header version disagrees with preamble"));
    }
    let payload = &body[head_len..];

    let mut spans: Vec<(usize, usize, &str)> = Vec::new();
    let mut tensors = BTreeMap::new();
    for (name, e) in &header.tensors {
        if e.dtype != DTYPE {
            return Err(ckpt_err(format!("{name}: unsupported dtype {}", e.dtype)));
        }
        let [r, c] = e.shape;
        if e.nbytes != r * c * 8 {
            return Err(ckpt_err(format!("{name}: byte length {} does not match shape {r}x{c}", e.nbytes)));
        }
        let end = e.offset.checked_add(e.nbytes).ok_or_else(|| ckpt_err("offset overflow"))?;
        if end > payload.len() {
            return Err(ckpt_err(format!("{name}: data range {}..{end} out of bounds", e.offset)));
        }
        spans.push((e.offset, end, name));
        let data = payload[e.offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let value = Matrix::new(r, c, data)?;
        let t = if e.trainable { Tensor::trainable(value) } else { Tensor::frozen(value) };
        tensors.insert(name.clone(), t);
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(ckpt_err(format!("tensors {} and {} overlap", w[0].2, w[1].2)));
        }
    }
    Ok((header, tensors))
}

pub fn encode_model(model: &TinyLm, config: serde_json::Value) -> Result<Vec<u8>> {
    let adapters = model
        .lora_layers()
        .into_iter()
        .map(|(id, l)| (id.to_string(), AdapterEntry { rank: l.rank, alpha: l.alpha }))
        .collect();
    encode(&model.named_tensors(), Some(model.config), adapters, config)
}

pub fn decode_model(bytes: &[u8]) -> Result<(TinyLm, serde_json::Value)> {
    let (header, mut tensors) = decode(bytes)?;
    let cfg = header.model.ok_or_else(|| ckpt_err("checkpoint has no model config"))?;
    let mut model = TinyLm::new(cfg, 0)?;
    let mut take = |name: String| tensors.remove(&name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")));
    for (layer, a) in &header.adapters {
        let id = LayerId::parse(layer).ok_or_else(|| ckpt_err(format!("bad adapter layer name {layer}")))?;
        if id.block >= cfg.n_layers {
            return Err(ckpt_err(format!("adapter layer {layer} outside the model")));
        }
        let lora = LoraLinear {
            w_res: take(format!("{id}.W_res"))?,
            a: take(format!("{id}.A"))?,
            b: take(format!("{id}.B"))?,
            rank: a.rank,
            alpha: a.alpha,
        };
        *model.linear_mut(id) = Linear::Lora(lora);
    }
    for (name, slot) in model.named_tensors_mut() {
        let (ws, we) = (name.ends_with(".W_res"), name.ends_with(".A") || name.ends_with(".B"));
        if ws || we {
            continue;
        }
        let t = tensors.remove(&name).ok_or_else(|| ckpt_err(format!("missing tensor {name}")))?;
        if t.value.shape() != slot.value.shape() {
            return Err(ckpt_err(format!(
                "{name}: shape {:?} does not match model {:?}",
                t.value.shape(),
                slot.value.shape()
            )));
        }
        *slot = t;
    }
    for (id, l) in model.lora_layers() {
        let (d_out, d_in) = l.w_res.value.shape();
        if l.a.value.shape() != (l.rank, d_in) || l.b.value.shape() != (d_out, l.rank) {
            return Err(ckpt_err(format!("{id}: adapter shapes inconsistent with rank {}", l.rank)));
        }
        if id.kind.dims(&cfg) != (d_out, d_in) {
            return Err(ckpt_err(format!("{id}: W_res shape does not match model")));
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(ckpt_err(format!("unexpected tensor {extra}")));
    }
    Ok((model, header.config))
}

pub fn save_model(path: &Path, model: &TinyLm, config: serde_json::Value) -> Result<()> {
    std::fs::write(path, encode_model(model, config)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(TinyLm, serde_json::Value)> {
    decode_model(&std::fs::read(path)?)
}
