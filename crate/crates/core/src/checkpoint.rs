//! Binary checkpoint format.
//!
//! ```text
//! offset 0   4 bytes   magic "LFG1"
//! offset 4   8 bytes   header length H, u64 little-endian
//! offset 12  H bytes   JSON header (UTF-8)
//! offset 12+H          tensor payloads, f32 little-endian, row-major
//! ```
//!
//! The header holds the model config, adapter hyper-parameters and a tensor
//! directory of `{name, shape, offset}` where `offset` is in bytes from the
//! start of the payload section. Tensors are laid out contiguously in
//! directory order. Names: `embeddings.input`, `embeddings.output` (absent when
//! tied), `layers.{l}.{attn_norm|wq|wk|wv|wo|ffn_norm|w_up|w_down}`,
//! `final_norm`, and `layers.{l}.{matrix}.lora_a` / `.lora_b` per adapter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Layer, LoraAdapter, ModelError, ModelState, TransformerConfig, WeightId};

pub const MAGIC: &[u8; 4] = b"LFG1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: TransformerConfig,
    pub base_frozen: bool,
    pub adapters: Vec<AdapterEntry>,
    pub tensors: Vec<TensorEntry>,
}

fn named_tensors(m: &ModelState) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    let mut push2 = |name: String, a: &Array2<f32>| {
        out.push((name, a.shape().to_vec(), a.iter().copied().collect()));
    };
    push2("embeddings.input".into(), &m.input_embeddings);
    if let Some(o) = &m.output_embeddings {
        push2("embeddings.output".into(), o);
    }
    let mut vectors = Vec::new();
    for (l, layer) in m.layers.iter().enumerate() {
        vectors.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
        vectors.push((format!("layers.{l}.ffn_norm"), &layer.ffn_norm));
    }
    vectors.push(("final_norm".into(), &m.final_norm));
    for (l, layer) in m.layers.iter().enumerate() {
        for id in WeightId::all(m.layers.len()).into_iter().filter(|w| w.layer == l) {
            push2(id.to_string(), layer.weight(id.kind));
        }
    }
    for (id, a) in &m.adapters {
        push2(format!("{id}.lora_a"), &a.a);
        push2(format!("{id}.lora_b"), &a.b);
    }
    for (name, v) in vectors {
        out.push((name, vec![v.len()], v.to_vec()));
    }
    out
}

pub fn to_bytes(m: &ModelState) -> Vec<u8> {
    let tensors = named_tensors(m);
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, shape, data)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            };
            offset += 4 * data.len() as u64;
            e
        })
        .collect();
    let header = Header {
        config: m.config.clone(),
        base_frozen: m.base_frozen,
        adapters: m
            .adapters
            .iter()
            .map(|(id, a)| AdapterEntry {
                target: id.to_string(),
                rank: a.rank,
                alpha: a.alpha,
                dropout_p: a.dropout_p,
            })
            .collect(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8]), ModelError> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing LFG1 magic"));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let end = 12usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&bytes[12..end]).map_err(|e| bad(format!("header: {e}")))?;
    Ok((header, &bytes[end..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState, ModelError> {
    let (header, payload) = read_header(bytes)?;
    let cfg = header.config;
    cfg.validate()?;
    let mut table: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        if e.offset != expected_offset {
            return Err(bad(format!("{}: offset {} not contiguous", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let stop = start + 4 * n;
        if stop > payload.len() {
            return Err(bad(format!("{}: payload truncated", e.name)));
        }
        let data = payload[start..stop]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if table.insert(e.name.clone(), (e.shape.clone(), data)).is_some() {
            return Err(bad(format!("duplicate tensor {}", e.name)));
        }
        expected_offset = stop as u64;
    }
    if expected_offset as usize != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }

    let mut take2 = |name: &str, rows: usize, cols: usize| -> Result<Array2<f32>, ModelError> {
        let (shape, data) = table.remove(name).ok_or_else(|| bad(format!("missing {name}")))?;
        if shape != [rows, cols] {
            return Err(bad(format!("{name}: shape {shape:?}, expected [{rows}, {cols}]")));
        }
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    };
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let input_embeddings = take2("embeddings.input", v, d)?;
    let output_embeddings = if cfg.tie_embeddings {
        None
    } else {
        Some(take2("embeddings.output", v, d)?)
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        layers.push(Layer {
            attn_norm: Array1::zeros(d),
            wq: take2(&p("wq"), d, d)?,
            wk: take2(&p("wk"), d, d)?,
            wv: take2(&p("wv"), d, d)?,
            wo: take2(&p("wo"), d, d)?,
            ffn_norm: Array1::zeros(d),
            w_up: take2(&p("w_up"), cfg.d_ff, d)?,
            w_down: take2(&p("w_down"), d, cfg.d_ff)?,
        });
    }
    let mut adapters = BTreeMap::new();
    for a in &header.adapters {
        let id: WeightId = a
            .target
            .parse()
            .map_err(|_| bad(format!("bad adapter target {}", a.target)))?;
        if id.layer >= cfg.n_layers {
            return Err(bad(format!("adapter target {id} out of range")));
        }
        let (d_out, d_in) = layers[id.layer].weight(id.kind).dim();
        adapters.insert(
            id,
            LoraAdapter {
                a: take2(&format!("{id}.lora_a"), a.rank, d_in)?,
                b: take2(&format!("{id}.lora_b"), d_out, a.rank)?,
                rank: a.rank,
                alpha: a.alpha,
                dropout_p: a.dropout_p,
            },
        );
    }
    let mut take1 = |name: &str| -> Result<Array1<f32>, ModelError> {
        let (shape, data) = table.remove(name).ok_or_else(|| bad(format!("missing {name}")))?;
        if shape != [d] {
            return Err(bad(format!("{name}: shape {shape:?}, expected [{d}]")));
        }
        Ok(Array1::from(data))
    };
    for (l, layer) in layers.iter_mut().enumerate() {
        layer.attn_norm = take1(&format!("layers.{l}.attn_norm"))?;
        layer.ffn_norm = take1(&format!("layers.{l}.ffn_norm"))?;
    }
    let final_norm = take1("final_norm")?;
    if let Some(name) = table.keys().next() {
        return Err(bad(format!("unexpected tensor {name}")));
    }
    Ok(ModelState {
        config: cfg,
        input_embeddings,
        output_embeddings,
        layers,
        final_norm,
        adapters,
        base_frozen: header.base_frozen,
    })
}

pub fn save(m: &ModelState, path: impl AsRef<Path>) -> Result<(), ModelError> {
    fs::write(path, to_bytes(m))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelState, ModelError> {
    from_bytes(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the serialized checkpoint.
pub fn fingerprint(m: &ModelState) -> String {
    sha256_hex(&to_bytes(m))
}
