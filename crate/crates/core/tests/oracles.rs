//! Kernels and gradients against brute-force and finite-difference oracles.

use qdm_core::diffusion::{Bindings, Denoiser, DenoiserConfig, ScaleChoice};
use qdm_core::numerics::rng::{self, Stream};
use qdm_core::numerics::{conv2d_forward, grad_check, linear_forward, Param, Tape, Tensor};
use qdm_core::qlayers::ScaleMode;
use qdm_core::quantizer::{quantize_model, QuantPolicy};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    rng::normal_tensor(&mut rng::substream(seed, Stream::Data, 77), shape.to_vec())
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bi in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b[o];
                    for i in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((bi * ci + i) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((o * ci + i) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((bi * co + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out).unwrap()
}

#[test]
fn conv_matches_brute_force() {
    for (seed, (stride, pad, h)) in [(1, 0, 5), (1, 1, 6), (2, 1, 7), (2, 0, 8), (1, 2, 4)].into_iter().enumerate() {
        let x = randn(&[2, 3, h, h + 1], seed as u64);
        let w = randn(&[4, 3, 3, 3], 100 + seed as u64);
        let b = randn(&[4], 200 + seed as u64);
        let fast = conv2d_forward(&x, &w, Some(&b), stride, pad).unwrap();
        let slow = naive_conv(&x, &w, b.data(), stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad}");
    }
}

#[test]
fn linear_matches_brute_force() {
    let x = randn(&[5, 7], 1);
    let w = randn(&[3, 7], 2);
    let b = randn(&[3], 3);
    let y = linear_forward(&x, &w, Some(&b)).unwrap();
    for r in 0..5 {
        for o in 0..3 {
            let e: f64 = b.data()[o] + (0..7).map(|i| x.data()[r * 7 + i] * w.data()[o * 7 + i]).sum::<f64>();
            assert!((y.data()[r * 3 + o] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn tape_ops_match_finite_differences() {
    let mut params = vec![
        Param::trainable(randn(&[2, 2, 4, 4], 10)),
        Param::trainable(randn(&[3, 2, 3, 3], 11)),
        Param::trainable(randn(&[3], 12)),
        Param::trainable(randn(&[2, 5], 13)),
        Param::trainable(randn(&[3, 5], 14)),
        Param::trainable(randn(&[2, 3, 4, 4], 15)),
    ];
    let err = grad_check(&mut params, 1e-6, |t, v| {
        let h = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        let h = t.silu(h);
        let e = t.linear(v[3], v[4], None)?;
        let h = t.add_channel(h, e)?;
        let h = t.upsample2x(h)?;
        let h2 = t.mul(h, h)?;
        let h = t.sub(h2, h)?;
        let h = t.scale(h, 0.3);
        t.weighted_mse(h, v[5], vec![0.7, 1.3])
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn channel_scale_matches_finite_differences() {
    let centered = std::sync::Arc::new(randn(&[3, 4, 3, 3], 20).map(|v| v.round()));
    let mut params = vec![
        Param::trainable(randn(&[3], 21)),
        Param::trainable(randn(&[4], 22)),
        Param::frozen(randn(&[2, 4, 5, 5], 23)),
    ];
    let err = grad_check(&mut params, 1e-6, |t, v| {
        let w = t.channel_scale(centered.clone(), v[0], v[1])?;
        let y = t.conv2d(v[2], w, None, 1, 1)?;
        let y = t.silu(y);
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 8,
        base_width: 4,
        channel_mults: vec![1, 2],
        time_embed_dim: 8,
        sinusoid_dim: 4,
        ..Default::default()
    }
}

fn loss_of(model: &Denoiser<f64>, x: &Tensor<f64>, ts: &[usize], sets: Option<&[qdm_core::qlayers::ScaleSet<f64>]>, target: &Tensor<f64>) -> f64 {
    let choice = sets.map_or(ScaleChoice::Ptq, ScaleChoice::Sets);
    let y = model.predict(x, ts, choice).unwrap();
    y.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.numel() as f64
}

#[test]
fn denoiser_scale_gradients_match_finite_differences() {
    let fp = Denoiser::<f32>::new(tiny(), 3).unwrap();
    let q = quantize_model(&fp, 4, QuantPolicy::Interior).unwrap().cast::<f64>();
    let mut sets = q.ptq_scale_sets(ScaleMode::Mcsu);
    for (k, s) in sets.iter_mut().enumerate() {
        let jitter = randn(&[s.c_in()], 40 + k as u64);
        s.s_in.value = jitter.map(|v| 1.0 + 0.1 * v);
    }
    let x = randn(&[2, 1, 8, 8], 30);
    let target = randn(&[2, 1, 8, 8], 31);
    let ts = [3, 71];

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tv = tape.constant(target.clone());
    let mut binds = Bindings::scales_only();
    let pred = q.forward(&mut tape, xv, &ts, ScaleChoice::Sets(&sets), &mut binds).unwrap();
    let loss = tape.weighted_mse(pred, tv, vec![0.5, 0.5]).unwrap();
    let grads = tape.backward(loss).unwrap();
    Denoiser::accumulate_scales(&mut sets, &grads, &binds).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for l in 0..sets.len() {
        for which in 0..2 {
            let n = if which == 0 { sets[l].c_out() } else { sets[l].c_in() };
            for j in (0..n).step_by(3) {
                let analytic = if which == 0 { sets[l].s_out.grad.data()[j] } else { sets[l].s_in.grad.data()[j] };
                let mut probe = sets.clone();
                let bump = |p: &mut Vec<qdm_core::qlayers::ScaleSet<f64>>, d: f64| {
                    let t = if which == 0 { &mut p[l].s_out } else { &mut p[l].s_in };
                    t.value.data_mut()[j] += d;
                };
                bump(&mut probe, h);
                let up = loss_of(&q, &x, &ts, Some(&probe), &target);
                bump(&mut probe, -2.0 * h);
                let down = loss_of(&q, &x, &ts, Some(&probe), &target);
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-6));
            }
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn denoiser_dense_gradients_match_finite_differences() {
    let mut m = Denoiser::<f64>::new(tiny(), 5).unwrap();
    let x = randn(&[2, 1, 8, 8], 50);
    let target = randn(&[2, 1, 8, 8], 51);
    let ts = [0, 55];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let tv = tape.constant(target.clone());
    let mut binds = Bindings::dense();
    let pred = m.forward(&mut tape, xv, &ts, ScaleChoice::Ptq, &mut binds).unwrap();
    let loss = tape.weighted_mse(pred, tv, vec![0.5, 0.5]).unwrap();
    let grads = tape.backward(loss).unwrap();
    m.accumulate_dense(&grads, &binds).unwrap();

    let h = 1e-6;
    let n_params = m.dense_params().len();
    let mut worst: f64 = 0.0;
    for p in (0..n_params).step_by(2) {
        let numel = m.dense_params()[p].numel();
        for j in (0..numel).step_by(numel / 3 + 1) {
            let analytic = m.dense_params()[p].grad.data()[j];
            let mut probe = m.clone();
            probe.dense_params_mut()[p].value.data_mut()[j] += h;
            let up = loss_of(&probe, &x, &ts, None, &target);
            probe.dense_params_mut()[p].value.data_mut()[j] -= 2.0 * h;
            let down = loss_of(&probe, &x, &ts, None, &target);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max((analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-6));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}
