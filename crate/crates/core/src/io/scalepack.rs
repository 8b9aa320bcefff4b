//! `TQSP` scale pack: the absolute scales of every expert for one task.
//!
//! Layout: magic `TQSP`, `u16` version, `u32` header length, header JSON,
//! then `f32` LE values ordered expert-major, layer-minor, `s_out` before
//! `s_in`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{f32_bytes, read_f32s, split_container, write_atomic, write_prefix};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::qlayers::{ScaleMode, ScaleSet};
use crate::training::Method;

pub const MAGIC: &[u8; 4] = b"TQSP";
pub const VERSION: u16 = 1;

/// Training metadata stored alongside the scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackMeta {
    pub task_id: String,
    pub method: Method,
    pub bits: u8,
    pub iterations: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerShape {
    name: String,
    c_out: usize,
    c_in: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: PackMeta,
    n_experts: usize,
    total_steps: usize,
    layers: Vec<LayerShape>,
}

fn method_for(mode: ScaleMode) -> Method {
    match mode {
        ScaleMode::Baseline => Method::Baseline,
        ScaleMode::Mcsu => Method::Tuneqdm,
    }
}

pub fn encode_scalepack(bank: &ExpertBank<f32>, meta: &PackMeta) -> Result<Vec<u8>> {
    if meta.method != method_for(bank.mode()) {
        return Err(Error::Config(format!(
            "pack metadata says {} but the bank is {:?}",
            meta.method,
            bank.mode()
        )));
    }
    let layers: Vec<LayerShape> = bank
        .layer_names()
        .iter()
        .zip(bank.expert(0))
        .map(|(name, s)| LayerShape {
            name: name.clone(),
            c_out: s.c_out(),
            c_in: s.c_in(),
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        n_experts: bank.n_experts(),
        total_steps: bank.total_steps(),
        layers,
    })?;
    let mut out = Vec::new();
    write_prefix(&mut out, MAGIC, VERSION, &header);
    for e in 0..bank.n_experts() {
        for set in bank.expert(e) {
            out.extend(f32_bytes(set.s_out.value.data().iter().copied()));
            out.extend(f32_bytes(set.s_in.value.data().iter().copied()));
        }
    }
    Ok(out)
}

/// Decodes a pack and checks it against the quantized layers of `model`.
/// On mismatch the model is untouched and the error names the first
/// offending layer.
pub fn decode_scalepack(bytes: &[u8], model: &Denoiser<f32>) -> Result<(ExpertBank<f32>, PackMeta)> {
    let (header_bytes, payload, base) = split_container(bytes, MAGIC, VERSION)?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::corrupt(super::PREFIX_LEN as u64, format!("unreadable header: {e}")))?;
    let quant = model.quant_layers();
    for (k, q) in quant.iter().enumerate() {
        match header.layers.get(k) {
            Some(l) if l.name == q.name && l.c_out == q.c_out() && l.c_in == q.c_in() => {}
            Some(l) => {
                return Err(Error::Incompatible(format!(
                    "layer {k}: pack has {} ({}x{}), checkpoint has {} ({}x{})",
                    l.name,
                    l.c_out,
                    l.c_in,
                    q.name,
                    q.c_out(),
                    q.c_in()
                )))
            }
            None => {
                return Err(Error::Incompatible(format!(
                    "pack has no entry for checkpoint layer {}",
                    q.name
                )))
            }
        }
    }
    if let Some(extra) = header.layers.get(quant.len()) {
        return Err(Error::Incompatible(format!("pack layer {} is not in the checkpoint", extra.name)));
    }
    let per_expert: usize = header.layers.iter().map(|l| 4 * (l.c_out + l.c_in)).sum();
    let need = per_expert
        .checked_mul(header.n_experts)
        .ok_or_else(|| Error::corrupt(super::PREFIX_LEN as u64, "expert count overflows"))?;
    if payload.len() != need {
        return Err(Error::corrupt(
            (base + need.min(payload.len())) as u64,
            format!("payload is {} bytes, expected {need}", payload.len()),
        ));
    }
    let mode = header.meta.method.mode();
    let mut pos = 0;
    let mut take = |n: usize| {
        let v = read_f32s(&payload[pos..pos + 4 * n]);
        pos += 4 * n;
        v
    };
    let mut experts = Vec::with_capacity(header.n_experts);
    for _ in 0..header.n_experts {
        let mut sets = Vec::with_capacity(header.layers.len());
        for l in &header.layers {
            let (s_out, s_in) = (take(l.c_out), take(l.c_in));
            sets.push(ScaleSet::from_values(mode, s_out, s_in)?);
        }
        experts.push(sets);
    }
    let names = header.layers.iter().map(|l| l.name.clone()).collect();
    let bank = ExpertBank::from_parts(header.total_steps, mode, names, experts)?;
    Ok((bank, header.meta))
}

pub fn save_scalepack(path: &Path, bank: &ExpertBank<f32>, meta: &PackMeta) -> Result<u64> {
    let bytes = encode_scalepack(bank, meta)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_scalepack(path: &Path, model: &Denoiser<f32>) -> Result<(ExpertBank<f32>, PackMeta)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scalepack(&bytes, model)
}
