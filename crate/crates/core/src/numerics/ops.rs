//! Forward and backward kernels for the layer types the denoiser uses.

use super::gemm::{mm, mm_nt, mm_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// `out[b,o] = sum_i input[b,i] * weight[o,i] + bias[o]`.
pub fn linear_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    let (batch, c_in, c_out) = linear_dims(input.shape(), weight.shape())?;
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "linear bias {:?} does not match {c_out} outputs",
                b.shape()
            )));
        }
    }
    let mut out = vec![F::zero(); batch * c_out];
    if let Some(b) = bias {
        for row in out.chunks_mut(c_out) {
            row.copy_from_slice(b.data());
        }
    }
    mm_nt(batch, c_in, c_out, input.data(), weight.data(), &mut out, bias.is_some());
    Tensor::new(vec![batch, c_out], out)
}

pub(crate) fn linear_dims(input: &[usize], weight: &[usize]) -> Result<(usize, usize, usize)> {
    match (input, weight) {
        ([b, ci], [co, wi]) if ci == wi => Ok((*b, *ci, *co)),
        _ => Err(Error::Dimension(format!(
            "linear input {input:?} incompatible with weight {weight:?}"
        ))),
    }
}

/// Returns `(d_input, d_weight, d_bias)`; the first two only when requested.
pub(crate) fn linear_backward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    d_out: &Tensor<F>,
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Tensor<F>) {
    let (batch, c_in) = (input.shape()[0], input.shape()[1]);
    let c_out = weight.shape()[0];
    let d_input = need_input.then(|| {
        let mut dx = vec![F::zero(); batch * c_in];
        mm(batch, c_out, c_in, d_out.data(), weight.data(), &mut dx, false);
        Tensor::new(vec![batch, c_in], dx).expect("shape")
    });
    let d_weight = need_weight.then(|| {
        let mut dw = vec![F::zero(); c_out * c_in];
        mm_tn(c_out, batch, c_in, d_out.data(), input.data(), &mut dw, false);
        Tensor::new(vec![c_out, c_in], dw).expect("shape")
    });
    let mut db = vec![F::zero(); c_out];
    for row in d_out.data().chunks(c_out) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc += g;
        }
    }
    (d_input, d_weight, Tensor::new(vec![c_out], db).expect("shape"))
}

/// Geometry of one conv2d call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let ([batch, c_in, h, w], [c_out, wc_in, kh, kw]) = (input, weight) else {
            return Err(Error::Dimension(format!(
                "conv2d expects 4-d input and weight, got {input:?} and {weight:?}"
            )));
        };
        if c_in != wc_in || kh != kw {
            return Err(Error::Dimension(format!(
                "conv2d input {input:?} incompatible with weight {weight:?}"
            )));
        }
        if kh % 2 == 0 {
            return Err(Error::Dimension(format!("conv2d kernel {kh} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        let k = *kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Dimension(format!(
                "conv2d output extent is not positive for input {input:?}, kernel {k}, padding {pad}"
            )));
        }
        Ok(Self {
            batch: *batch,
            c_in: *c_in,
            h: *h,
            w: *w,
            c_out: *c_out,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<F: Real>(g: &ConvGeom, image: &[F], cols: &mut [F]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &image[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(g: &ConvGeom, cols: &[F], image: &mut [F]) {
    let p = g.positions();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input [B,C_in,H,W]` with `weight [C_out,C_in,k,k]`.
pub fn conv2d_forward<F: Real>(
    input: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::Dimension(format!(
                "conv2d bias {:?} does not match {} outputs",
                b.shape(),
                g.c_out
            )));
        }
    }
    Ok(conv2d_raw(&g, input.data(), weight.data(), bias.map(|b| b.data())))
}

pub(crate) fn conv2d_raw<F: Real>(
    g: &ConvGeom,
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
) -> Tensor<F> {
    let (patch, p) = (g.patch(), g.positions());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let mut out = vec![F::zero(); g.batch * out_stride];
    let mut cols = vec![F::zero(); patch * p];
    for b in 0..g.batch {
        im2col(g, &input[b * in_stride..(b + 1) * in_stride], &mut cols);
        let dst = &mut out[b * out_stride..(b + 1) * out_stride];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        mm(g.c_out, patch, p, weight, &cols, dst, bias.is_some());
    }
    Tensor::new(vec![g.batch, g.c_out, g.ho, g.wo], out).expect("shape")
}

/// Returns `(d_input, d_weight, d_bias)`; the first two only when requested.
pub(crate) fn conv2d_backward<F: Real>(
    g: &ConvGeom,
    input: &[F],
    weight: &[F],
    d_out: &[F],
    need_input: bool,
    need_weight: bool,
) -> (Option<Tensor<F>>, Option<Tensor<F>>, Tensor<F>) {
    let (patch, p) = (g.patch(), g.positions());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * p;
    let mut cols = vec![F::zero(); patch * p];
    let mut dx = need_input.then(|| vec![F::zero(); g.batch * in_stride]);
    let mut dw = need_weight.then(|| vec![F::zero(); g.c_out * patch]);
    let mut db = vec![F::zero(); g.c_out];
    for b in 0..g.batch {
        let dy = &d_out[b * out_stride..(b + 1) * out_stride];
        for (o, chunk) in dy.chunks(p).enumerate() {
            db[o] += chunk.iter().copied().sum::<F>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(g, &input[b * in_stride..(b + 1) * in_stride], &mut cols);
            mm_nt(g.c_out, p, patch, dy, &cols, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            mm_tn(patch, g.c_out, p, weight, dy, &mut cols, false);
            col2im(g, &cols, &mut dx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    (
        dx.map(|d| Tensor::new(vec![g.batch, g.c_in, g.h, g.w], d).expect("shape")),
        dw.map(|d| Tensor::new(vec![g.c_out, g.c_in, g.k, g.k], d).expect("shape")),
        Tensor::new(vec![g.c_out], db).expect("shape"),
    )
}
