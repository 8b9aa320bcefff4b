use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{self, Stream};
use crate::numerics::{linear_forward, Tensor};
use crate::quantizer::{calibrate_minmax, dequantize, pack_codes, quantize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub bits: u8,
    pub packed_bytes: usize,
    pub max_abs_diff: f64,
    pub fp_median_s: f64,
    pub dequant_median_s: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    if v.len() % 2 == 1 {
        v[h]
    } else {
        0.5 * (v[h - 1] + v[h])
    }
}

fn code_at(packed: &[u8], bits: u8, idx: usize) -> u8 {
    match bits {
        8 => packed[idx],
        _ => {
            let b = packed[idx / 2];
            if idx % 2 == 0 {
                b & 0x0f
            } else {
                b >> 4
            }
        }
    }
}

/// `y = x·W^T` from packed codes, dequantizing one weight row at a time.
fn dequant_matmul(x: &[f32], m: usize, k: usize, n: usize, packed: &[u8], bits: u8, scale: &[f32], zp: &[u8]) -> Vec<f32> {
    let mut y = vec![0f32; m * n];
    let mut row = vec![0f32; k];
    for o in 0..n {
        let (s, z) = (scale[o], zp[o] as f32);
        for (j, w) in row.iter_mut().enumerate() {
            *w = s * (code_at(packed, bits, o * k + j) as f32 - z);
        }
        for r in 0..m {
            let xr = &x[r * k..(r + 1) * k];
            y[r * n + o] = xr.iter().zip(&row).map(|(a, b)| a * b).sum();
        }
    }
    y
}

/// Times a full-precision matmul against dequantize-on-the-fly from packed
/// codes for each `(m, k, n)`. Refuses to report if the two outputs differ by
/// more than `1e-5` relative to the output magnitude.
pub fn bench_dequant_matmul(sizes: &[(usize, usize, usize)], bits: u8, repetitions: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(Error::Config("repetitions must be positive".into()));
    }
    let mut out = Vec::new();
    for (case, &(m, k, n)) in sizes.iter().enumerate() {
        if m == 0 || k == 0 || n == 0 {
            return Err(Error::Config(format!("sizes must be positive, got {m}x{k}x{n}")));
        }
        let mut rng = rng::substream(seed, Stream::Data, case as u64);
        let w = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
        let x = rng::normal_tensor::<f32>(&mut rng, vec![m, k]);
        let params = calibrate_minmax(&w, bits)?;
        let q = quantize(&w, &params)?;
        let packed = pack_codes(&q)?;
        let w_hat = dequantize(&q);

        let reference = linear_forward(&x, &w_hat, None)?;
        let fast = dequant_matmul(x.data(), m, k, n, &packed, bits, &params.scale, &params.zero_point);
        let scale = reference.data().iter().fold(1.0f64, |a, &v| a.max(v.abs() as f64));
        let diff = reference
            .data()
            .iter()
            .zip(&fast)
            .fold(0.0f64, |a, (&r, &f)| a.max((r as f64 - f as f64).abs()));
        if diff > 1e-5 * scale {
            return Err(Error::Correctness(format!(
                "dequantized matmul differs from materialized weights by {diff:e} at {m}x{k}x{n}"
            )));
        }

        let time = |f: &mut dyn FnMut()| {
            median(
                (0..repetitions)
                    .map(|_| {
                        let t = Instant::now();
                        f();
                        t.elapsed().as_secs_f64()
                    })
                    .collect(),
            )
        };
        let fp_median_s = time(&mut || {
            std::hint::black_box(linear_forward(&x, &w_hat, None).ok());
        });
        let dequant_median_s = time(&mut || {
            std::hint::black_box(dequant_matmul(x.data(), m, k, n, &packed, bits, &params.scale, &params.zero_point));
        });
        out.push(BenchRow {
            m,
            k,
            n,
            bits,
            packed_bytes: packed.len(),
            max_abs_diff: diff,
            fp_median_s,
            dequant_median_s,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_bit_is_half_of_eight() {
        let a = bench_dequant_matmul(&[(3, 17, 5)], 4, 1, 0).unwrap();
        let b = bench_dequant_matmul(&[(3, 17, 5)], 8, 3, 0).unwrap();
        assert_eq!(a[0].packed_bytes, 43);
        assert_eq!(b[0].packed_bytes, 85);
        assert!(bench_dequant_matmul(&[(0, 1, 1)], 4, 1, 0).is_err());
    }
}
