//! Per-output-channel asymmetric uniform quantization and code packing.
//!
//! Codes follow `q = clamp(round(w / s) + z, 0, 2^b - 1)` with
//! round-half-away-from-zero, and dequantize as `s * (q - z)`.

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::qlayers::QuantLayer;

/// Scale floor used for channels whose calibration range is empty.
pub const SCALE_FLOOR: f64 = 1e-8;

pub const SUPPORTED_BITS: [u8; 2] = [4, 8];

pub fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unsupported bit width {bits}; valid widths are 4 and 8"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: Vec<f32>,
    pub zero_point: Vec<u8>,
    pub bits: u8,
    pub symmetric: bool,
}

impl QuantParams {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.scale.len() != self.zero_point.len() {
            return Err(Error::Dimension(format!(
                "{} scales but {} zero-points",
                self.scale.len(),
                self.zero_point.len()
            )));
        }
        if let Some(s) = self.scale.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("quantization scale {s} is not positive")));
        }
        if let Some(z) = self.zero_point.iter().find(|&&z| z > self.max_code()) {
            return Err(Error::Domain(format!(
                "zero-point {z} exceeds {}-bit range",
                self.bits
            )));
        }
        Ok(())
    }
}

/// Integer codes plus the metadata needed to map them back to reals.
/// Codes cannot be modified after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    codes: Vec<u8>,
    params: QuantParams,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn from_parts(codes: Vec<u8>, params: QuantParams, shape: Vec<usize>) -> Result<Self> {
        params.validate()?;
        let n: usize = shape.iter().product();
        if codes.len() != n {
            return Err(Error::Dimension(format!(
                "{} codes for shape {shape:?}",
                codes.len()
            )));
        }
        if shape.first() != Some(&params.channels()) {
            return Err(Error::Dimension(format!(
                "shape {shape:?} does not lead with {} channels",
                params.channels()
            )));
        }
        if let Some(pos) = codes.iter().position(|&c| c > params.max_code()) {
            return Err(Error::corrupt(
                pos as u64,
                format!("code {} exceeds {}-bit range", codes[pos], params.bits),
            ));
        }
        Ok(Self {
            codes,
            params,
            shape,
        })
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> u8 {
        self.params.bits
    }

    pub fn numel(&self) -> usize {
        self.codes.len()
    }

    fn per_channel(&self) -> usize {
        self.codes.len() / self.shape[0].max(1)
    }

    /// `codes - zero_point`, the frozen factor of the effective weight.
    pub fn centered<F: Real>(&self) -> Tensor<F> {
        let per = self.per_channel();
        let data = self
            .codes
            .iter()
            .enumerate()
            .map(|(j, &c)| F::of(c as f64 - self.params.zero_point[j / per] as f64))
            .collect();
        Tensor::new(self.shape.clone(), data).expect("shape")
    }
}

fn channel_range(values: &[f32]) -> (f64, f64) {
    // The range always contains zero so that zero-points stay representable.
    values.iter().fold((0.0f64, 0.0f64), |(lo, hi), &v| {
        (lo.min(v as f64), hi.max(v as f64))
    })
}

/// Smallest `f32` that is `>= x`.
fn f32_at_least(x: f64) -> f32 {
    let f = x as f32;
    if (f as f64) < x {
        f.next_up()
    } else {
        f
    }
}

/// Asymmetric min-max calibration along the leading (output-channel) axis.
pub fn calibrate_minmax(weight: &Tensor<f32>, bits: u8) -> Result<QuantParams> {
    check_bits(bits)?;
    if weight.numel() == 0 || weight.shape().is_empty() {
        return Err(Error::Dimension("cannot calibrate an empty weight".into()));
    }
    let c_out = weight.shape()[0];
    let levels = ((1u32 << bits) - 1) as f64;
    let per = weight.numel() / c_out;
    let mut scale = Vec::with_capacity(c_out);
    let mut zero_point = Vec::with_capacity(c_out);
    for row in weight.data().chunks(per) {
        let (lo, hi) = channel_range(row);
        if hi == lo {
            scale.push(SCALE_FLOOR as f32);
            zero_point.push(0);
            continue;
        }
        // Rounded up so that `(hi - lo) / s` never exceeds the code range.
        let step = ((hi - lo) / levels).max(SCALE_FLOOR);
        let s = f32_at_least(step);
        let z = (-lo / step).round().clamp(0.0, levels);
        scale.push(s);
        zero_point.push(z as u8);
    }
    Ok(QuantParams {
        scale,
        zero_point,
        bits,
        symmetric: false,
    })
}

#[inline]
fn code_for(w: f64, scale: f64, zero_point: u8, max: f64) -> u8 {
    ((w / scale).round() + zero_point as f64).clamp(0.0, max) as u8
}

#[inline]
fn value_for(code: u8, scale: f64, zero_point: u8) -> f64 {
    scale * (code as f64 - zero_point as f64)
}

pub fn quantize(weight: &Tensor<f32>, params: &QuantParams) -> Result<QuantizedTensor> {
    params.validate()?;
    let c_out = weight.shape().first().copied().unwrap_or(0);
    if c_out != params.channels() {
        return Err(Error::Dimension(format!(
            "weight {:?} has {c_out} channels, params have {}",
            weight.shape(),
            params.channels()
        )));
    }
    let max = params.max_code() as f64;
    let per = weight.numel() / c_out.max(1);
    let codes = weight
        .data()
        .iter()
        .enumerate()
        .map(|(j, &w)| {
            let o = j / per;
            code_for(w as f64, params.scale[o] as f64, params.zero_point[o], max)
        })
        .collect();
    QuantizedTensor::from_parts(codes, params.clone(), weight.shape().to_vec())
}

/// `s[o] * (codes - z[o])`, evaluated in `f64` and rounded once to `F`.
pub fn dequantize_as<F: Real>(q: &QuantizedTensor) -> Tensor<F> {
    let per = q.per_channel();
    let p = q.params();
    let data = q
        .codes()
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            let o = j / per;
            F::of(value_for(c, p.scale[o] as f64, p.zero_point[o]))
        })
        .collect();
    Tensor::new(q.shape().to_vec(), data).expect("shape")
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor<f32> {
    dequantize_as(q)
}

pub fn packed_len(n_elements: usize, bits: u8) -> usize {
    (n_elements * bits as usize).div_ceil(8)
}

/// 8-bit: one byte per code. 4-bit: two codes per byte, the even flat index
/// in the low nibble; an odd trailing element leaves the high nibble zero.
pub fn pack_codes(q: &QuantizedTensor) -> Result<Vec<u8>> {
    pack_raw(q.codes(), q.bits())
}

pub(crate) fn pack_raw(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let max = ((1u16 << bits) - 1) as u8;
    if let Some(pos) = codes.iter().position(|&c| c > max) {
        return Err(Error::corrupt(pos as u64, format!("code {} exceeds {bits}-bit range", codes[pos])));
    }
    Ok(match bits {
        8 => codes.to_vec(),
        _ => codes
            .chunks(2)
            .map(|pair| pair[0] | (pair.get(1).copied().unwrap_or(0) << 4))
            .collect(),
    })
}

pub fn unpack_codes(bytes: &[u8], bits: u8, n_elements: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let expected = packed_len(n_elements, bits);
    if bytes.len() != expected {
        return Err(Error::corrupt(
            bytes.len().min(expected) as u64,
            format!("packed buffer holds {} bytes, expected {expected}", bytes.len()),
        ));
    }
    if bits == 8 {
        return Ok(bytes.to_vec());
    }
    if n_elements % 2 == 1 && bytes[expected - 1] >> 4 != 0 {
        return Err(Error::corrupt(
            (expected - 1) as u64,
            "padding nibble of odd-length 4-bit buffer is not zero",
        ));
    }
    let mut codes = Vec::with_capacity(n_elements);
    for &b in bytes {
        codes.push(b & 0x0F);
        codes.push(b >> 4);
    }
    codes.truncate(n_elements);
    Ok(codes)
}

/// Rebuilds a quantized tensor from its packed form.
pub fn unpack_tensor(bytes: &[u8], params: QuantParams, shape: Vec<usize>) -> Result<QuantizedTensor> {
    let n = shape.iter().product();
    let codes = unpack_codes(bytes, params.bits, n)?;
    QuantizedTensor::from_parts(codes, params, shape)
}

/// Which layers of a model get quantized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantPolicy {
    /// All layers except the first and last.
    #[default]
    Interior,
    All,
    None,
}

/// Replaces the weights of every layer selected by `policy` with integer
/// codes plus per-channel scale/zero-point. Biases stay full precision.
pub fn quantize_model(model: &Denoiser<f32>, bits: u8, policy: QuantPolicy) -> Result<Denoiser<f32>> {
    check_bits(bits)?;
    let n = model.layers().len();
    let mut out = model.clone();
    for idx in 0..n {
        let select = match policy {
            QuantPolicy::None => false,
            QuantPolicy::All => true,
            QuantPolicy::Interior => idx != 0 && idx != n - 1,
        };
        if !select {
            continue;
        }
        let Some(dense) = model.layers()[idx].as_dense() else {
            continue;
        };
        let params = calibrate_minmax(&dense.weight.value, bits)?;
        let codes = quantize(&dense.weight.value, &params)?;
        let layer = QuantLayer::new(dense.name.clone(), dense.kind, codes, dense.bias.value.clone())?;
        out.replace_with_quant(idx, layer);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn minmax_symmetric_pair_eight_bit() {
        let p = calibrate_minmax(&w(&[1, 2], &[-1.0, 1.0]), 8).unwrap();
        assert!((p.scale[0] as f64 - 2.0 / 255.0).abs() < 1e-9);
        assert_eq!(p.zero_point[0], 128);
    }

    #[test]
    fn minmax_degenerate_and_four_bit() {
        let p = calibrate_minmax(&w(&[1, 3], &[0.0; 3]), 8).unwrap();
        assert_eq!(p.scale[0] as f64, SCALE_FLOOR as f32 as f64);
        assert_eq!(p.zero_point[0], 0);

        let p = calibrate_minmax(&w(&[1, 2], &[0.0, 15.0]), 4).unwrap();
        assert_eq!(p.scale[0], 1.0);
        assert_eq!(p.zero_point[0], 0);
    }

    #[test]
    fn bad_bits_is_config_error() {
        assert!(matches!(calibrate_minmax(&w(&[1, 1], &[1.0]), 12), Err(Error::Config(_))));
    }

    #[test]
    fn two_bit_example_codes_and_dequant() {
        // b = 2, so the largest code is 3
        let codes: Vec<u8> = [-2.4f64, 0.6, 3.0].iter().map(|&x| code_for(x, 1.0, 2, 3.0)).collect();
        assert_eq!(codes, vec![0, 3, 3]);
        let deq: Vec<f64> = codes.iter().map(|&c| value_for(c, 1.0, 2)).collect();
        assert_eq!(deq, vec![-2.0, 1.0, 1.0]);
        assert_eq!(code_for(-0.5, 1.0, 2, 3.0), 1, "half rounds away from zero");
    }

    #[test]
    fn lattice_points_round_trip_and_clamp() {
        let params = QuantParams {
            scale: vec![0.5],
            zero_point: vec![8],
            bits: 4,
            symmetric: false,
        };
        let vals: Vec<f32> = (0..16).map(|k| 0.5 * (k as f32 - 8.0)).collect();
        let q = quantize(&w(&[1, 16], &vals), &params).unwrap();
        assert_eq!(q.codes(), (0..16).collect::<Vec<u8>>().as_slice());

        let p8 = QuantParams {
            scale: vec![0.01],
            zero_point: vec![0],
            bits: 8,
            symmetric: false,
        };
        let q = quantize(&w(&[1, 1], &[1e6]), &p8).unwrap();
        assert_eq!(q.codes(), &[255]);
    }

    #[test]
    fn codes_equal_to_zero_point_dequantize_to_zero() {
        let params = QuantParams {
            scale: vec![0.3, 0.7],
            zero_point: vec![5, 9],
            bits: 4,
            symmetric: false,
        };
        let q = QuantizedTensor::from_parts(vec![5, 5, 9, 9], params, vec![2, 2]).unwrap();
        assert!(dequantize(&q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pack_examples() {
        let p4 = QuantParams {
            scale: vec![1.0],
            zero_point: vec![0],
            bits: 4,
            symmetric: false,
        };
        let q = QuantizedTensor::from_parts(vec![1, 2], p4.clone(), vec![1, 2]).unwrap();
        assert_eq!(pack_codes(&q).unwrap(), vec![0x21]);
        let q = QuantizedTensor::from_parts(vec![7], p4, vec![1, 1]).unwrap();
        assert_eq!(pack_codes(&q).unwrap(), vec![0x07]);
        assert_eq!(pack_raw(&[255], 8).unwrap(), vec![0xFF]);

        assert_eq!(unpack_codes(&[0x21], 4, 2).unwrap(), vec![1, 2]);
        assert_eq!(unpack_codes(&[0xFF], 8, 1).unwrap(), vec![255]);
    }

    #[test]
    fn unpack_rejects_bad_lengths_and_codes() {
        assert!(matches!(unpack_codes(&[0x21, 0x00], 4, 2), Err(Error::Corruption { .. })));
        assert!(matches!(unpack_codes(&[0xF7], 4, 1), Err(Error::Corruption { .. })));
        assert!(matches!(pack_raw(&[16], 4), Err(Error::Corruption { .. })));
    }
}
