//! `TQDM` checkpoint container.
//!
//! Layout: magic `TQDM`, `u16` version, `u32` header length, header JSON,
//! payload. The header carries the architecture, schedule and a layer table
//! whose blob offsets tile the payload exactly. All integers are
//! little-endian.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{f32_bytes, read_f32s, split_container, write_atomic, write_prefix};
use crate::diffusion::{DenoiserConfig, DenseLayer, Denoiser, Layer, ScheduleConfig};
use crate::error::{Error, Result};
use crate::numerics::{Param, Tensor};
use crate::qlayers::{LayerKind, QuantLayer};
use crate::quantizer::{pack_codes, packed_len, unpack_tensor, QuantParams};

pub const MAGIC: &[u8; 4] = b"TQDM";
pub const VERSION: u16 = 1;

static READS: AtomicUsize = AtomicUsize::new(0);

/// Number of checkpoint files read by this process.
pub fn checkpoint_reads() -> usize {
    READS.load(Ordering::SeqCst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BlobKind {
    Codes,
    ZeroPoints,
    Scales,
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Blob {
    kind: BlobKind,
    offset: u64,
    len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: LayerKind,
    shape: Vec<usize>,
    /// `None` for full-precision layers.
    bits: Option<u8>,
    #[serde(default)]
    symmetric: bool,
    blobs: Vec<Blob>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: DenoiserConfig,
    schedule: ScheduleConfig,
    layers: Vec<LayerEntry>,
    payload_len: u64,
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Denoiser<f32>,
    pub schedule: ScheduleConfig,
}

pub fn encode_checkpoint(model: &Denoiser<f32>, schedule: &ScheduleConfig) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut layers = Vec::new();
    for layer in model.layers() {
        let mut blobs = Vec::new();
        let mut push = |kind, bytes: Vec<u8>| {
            blobs.push(Blob {
                kind,
                offset: payload.len() as u64,
                len: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        };
        let (bits, symmetric) = match layer {
            Layer::Quant(q) => {
                let p = q.codes().params();
                push(BlobKind::Codes, pack_codes(q.codes())?);
                push(BlobKind::ZeroPoints, p.zero_point.clone());
                push(BlobKind::Scales, f32_bytes(p.scale.iter().copied()));
                push(BlobKind::Bias, f32_bytes(q.bias().data().iter().copied()));
                (Some(p.bits), p.symmetric)
            }
            Layer::Dense(d) => {
                push(BlobKind::Weight, f32_bytes(d.weight.value.data().iter().copied()));
                push(BlobKind::Bias, f32_bytes(d.bias.value.data().iter().copied()));
                (None, false)
            }
        };
        layers.push(LayerEntry {
            name: layer.name().to_string(),
            kind: layer.kind(),
            shape: layer.weight_shape().to_vec(),
            bits,
            symmetric,
            blobs,
        });
    }
    let header = Header {
        model: model.config().clone(),
        schedule: *schedule,
        layers,
        payload_len: payload.len() as u64,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(super::PREFIX_LEN + header.len() + payload.len());
    write_prefix(&mut out, MAGIC, VERSION, &header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn expected_blobs(entry: &LayerEntry) -> Result<Vec<(BlobKind, u64)>> {
    let numel: usize = entry.shape.iter().product();
    let c_out = *entry.shape.first().ok_or_else(|| Error::corrupt(0, format!("layer {} has no shape", entry.name)))?;
    Ok(match entry.bits {
        Some(bits) => {
            crate::quantizer::check_bits(bits)?;
            vec![
                (BlobKind::Codes, packed_len(numel, bits) as u64),
                (BlobKind::ZeroPoints, c_out as u64),
                (BlobKind::Scales, 4 * c_out as u64),
                (BlobKind::Bias, 4 * c_out as u64),
            ]
        }
        None => vec![(BlobKind::Weight, 4 * numel as u64), (BlobKind::Bias, 4 * c_out as u64)],
    })
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (header_bytes, payload, base) = split_container(bytes, MAGIC, VERSION)?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::corrupt(super::PREFIX_LEN as u64, format!("unreadable header: {e}")))?;
    if header.payload_len != payload.len() as u64 {
        let at = base as u64 + header.payload_len.min(payload.len() as u64);
        return Err(Error::corrupt(
            at,
            format!("payload is {} bytes, header declares {}", payload.len(), header.payload_len),
        ));
    }
    let mut cursor = 0u64;
    let mut layers = Vec::with_capacity(header.layers.len());
    for entry in &header.layers {
        let expected = expected_blobs(entry)?;
        if expected.len() != entry.blobs.len() {
            return Err(Error::corrupt(
                base as u64 + cursor,
                format!("layer {} lists {} blobs, expected {}", entry.name, entry.blobs.len(), expected.len()),
            ));
        }
        let mut parts = Vec::with_capacity(expected.len());
        for (blob, (kind, len)) in entry.blobs.iter().zip(expected) {
            if blob.offset != cursor {
                return Err(Error::corrupt(
                    base as u64 + blob.offset.min(payload.len() as u64),
                    format!(
                        "layer {} {:?} blob starts at {} but the previous blob ends at {cursor} (gap or overlap)",
                        entry.name, blob.kind, blob.offset
                    ),
                ));
            }
            if blob.kind != kind || blob.len != len {
                return Err(Error::corrupt(
                    base as u64 + cursor,
                    format!("layer {} blob {:?}/{} does not match expected {kind:?}/{len}", entry.name, blob.kind, blob.len),
                ));
            }
            let end = cursor + len;
            if end > payload.len() as u64 {
                return Err(Error::corrupt(base as u64 + payload.len() as u64, "blob runs past the payload"));
            }
            parts.push(&payload[cursor as usize..end as usize]);
            cursor = end;
        }
        let shape = entry.shape.clone();
        let c_out = shape[0];
        let at = base as u64 + entry.blobs[0].offset;
        let invalid = |e: Error| Error::corrupt(at, format!("layer {}: {e}", entry.name));
        let layer = match entry.bits {
            Some(bits) => {
                let params = QuantParams {
                    scale: read_f32s(parts[2]),
                    zero_point: parts[1].to_vec(),
                    bits,
                    symmetric: entry.symmetric,
                };
                let codes = unpack_tensor(parts[0], params, shape).map_err(invalid)?;
                let bias = Tensor::new(vec![c_out], read_f32s(parts[3])).map_err(invalid)?;
                Layer::Quant(QuantLayer::new(entry.name.clone(), entry.kind, codes, bias).map_err(invalid)?)
            }
            None => {
                let weight = Tensor::new(shape, read_f32s(parts[0])).map_err(invalid)?;
                let bias = Tensor::new(vec![c_out], read_f32s(parts[1])).map_err(invalid)?;
                Layer::Dense(DenseLayer {
                    name: entry.name.clone(),
                    kind: entry.kind,
                    weight: Param::trainable(weight),
                    bias: Param::trainable(bias),
                })
            }
        };
        layers.push(layer);
    }
    if cursor != payload.len() as u64 {
        return Err(Error::corrupt(base as u64 + cursor, "trailing bytes after the last blob"));
    }
    let model = Denoiser::from_layers(header.model, layers)
        .map_err(|e| Error::corrupt(super::PREFIX_LEN as u64, format!("layer table does not match architecture: {e}")))?;
    header.schedule.build()?;
    Ok(Checkpoint {
        model,
        schedule: header.schedule,
    })
}

pub fn save_checkpoint(path: &Path, model: &Denoiser<f32>, schedule: &ScheduleConfig) -> Result<u64> {
    let bytes = encode_checkpoint(model, schedule)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    READS.fetch_add(1, Ordering::SeqCst);
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::{quantize_model, QuantPolicy};

    fn small() -> Denoiser<f32> {
        let cfg = DenoiserConfig {
            base_width: 4,
            channel_mults: vec![1, 2],
            image_size: 8,
            time_embed_dim: 8,
            sinusoid_dim: 4,
            ..Default::default()
        };
        Denoiser::new(cfg, 1).unwrap()
    }

    #[test]
    fn canonical_round_trip() {
        let q = quantize_model(&small(), 4, QuantPolicy::Interior).unwrap();
        let a = encode_checkpoint(&q, &ScheduleConfig::default()).unwrap();
        let b = encode_checkpoint(&decode_checkpoint(&a).unwrap().model, &ScheduleConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_truncation_and_magic() {
        let a = encode_checkpoint(&small(), &ScheduleConfig::default()).unwrap();
        for cut in [0, 3, 8, 20, a.len() / 2, a.len() - 1] {
            assert!(matches!(decode_checkpoint(&a[..cut]), Err(Error::Corruption { .. })), "cut {cut}");
        }
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Corruption { offset: 0, .. })));
        let mut old = a;
        old[4] = 9;
        assert!(matches!(decode_checkpoint(&old), Err(Error::Migration { found: 9, .. })));
    }
}
