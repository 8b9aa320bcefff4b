use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, Layer, ScheduleConfig};
use crate::error::Result;
use crate::experts::ExpertBank;
use crate::io::{encode_checkpoint, encode_scalepack, PackMeta};
use crate::quantizer::packed_len;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    /// Packed integer codes of the quantized layers.
    pub packed_weight_bytes: u64,
    /// Real32 weights of layers left in full precision.
    pub dense_weight_bytes: u64,
    /// Per-channel scale (f32) and zero-point (u8) metadata.
    pub scale_zero_bytes: u64,
    /// Every weight stored as real32.
    pub fp32_weight_bytes: u64,
    /// `fp32_weight_bytes / (packed + dense + scale_zero)`.
    pub compression_ratio: f64,
    /// Size of the encoded checkpoint file.
    pub checkpoint_bytes: u64,
    /// Size of the encoded scale pack file, when a bank is given.
    pub scalepack_bytes: Option<u64>,
    pub pack_to_checkpoint: Option<f64>,
    pub trainable_params: Option<usize>,
    pub total_params: usize,
}

/// Byte accounting for a quantized model and optionally one scale pack. File
/// sizes come from the actual encoders.
pub fn storage_report(
    model: &Denoiser<f32>,
    schedule: &ScheduleConfig,
    pack: Option<(&ExpertBank<f32>, &PackMeta)>,
) -> Result<StorageReport> {
    let (mut packed, mut dense, mut meta, mut fp) = (0u64, 0u64, 0u64, 0u64);
    for layer in model.layers() {
        let numel: usize = layer.weight_shape().iter().product();
        fp += 4 * numel as u64;
        match layer {
            Layer::Quant(q) => {
                packed += packed_len(numel, q.codes().bits()) as u64;
                meta += 5 * q.c_out() as u64;
            }
            Layer::Dense(_) => dense += 4 * numel as u64,
        }
    }
    let checkpoint_bytes = encode_checkpoint(model, schedule)?.len() as u64;
    let scalepack_bytes = match pack {
        Some((bank, m)) => Some(encode_scalepack(bank, m)?.len() as u64),
        None => None,
    };
    Ok(StorageReport {
        packed_weight_bytes: packed,
        dense_weight_bytes: dense,
        scale_zero_bytes: meta,
        fp32_weight_bytes: fp,
        compression_ratio: fp as f64 / (packed + dense + meta) as f64,
        checkpoint_bytes,
        scalepack_bytes,
        pack_to_checkpoint: scalepack_bytes.map(|b| b as f64 / checkpoint_bytes as f64),
        trainable_params: pack.map(|(b, _)| b.trainable_param_count()),
        total_params: model.param_count(),
    })
}
