use std::sync::Arc;

use super::ops::{self, ConvGeom};
use super::{Param, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Silu(Var),
    /// `[B,C,H,W] + [B,C]` broadcast over the spatial axes.
    AddChannel(Var, Var),
    Upsample2x(Var),
    Sum(Var),
    /// `sum_b weights[b] * mean((a_b - b_b)^2)`.
    WeightedMse {
        pred: Var,
        target: Var,
        weights: Vec<F>,
    },
    /// `w[o, i, ..] = s_out[o] * centered[o, i, ..] * s_in[i]`.
    ChannelScale {
        centered: Arc<Tensor<F>>,
        s_out: Var,
        s_in: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a computation so that [`Tape::backward`] can replay it in reverse.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value recorded on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf bound to `p`; it collects a gradient only if `p` is trainable.
    pub fn param(&mut self, p: &Param<F>) -> Var {
        self.push(p.value.clone(), Op::Leaf, p.trainable)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear_forward(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        let out =
            ops::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, padding)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn add_channel(&mut self, x: Var, e: Var) -> Result<Var> {
        let (xs, es) = (self.value(x).shape(), self.value(e).shape());
        if xs.len() != 4 || es.len() != 2 || xs[0] != es[0] || xs[1] != es[1] {
            return Err(Error::Dimension(format!(
                "cannot broadcast {es:?} over {xs:?}"
            )));
        }
        let hw = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        let ev = self.value(e).data();
        for (chunk, &v) in out.data_mut().chunks_mut(hw).zip(ev) {
            for z in chunk {
                *z += v;
            }
        }
        let rg = self.rg(x) || self.rg(e);
        Ok(self.push(out, Op::AddChannel(x, e), rg))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let [b, c, h, w] = s[..] else {
            return Err(Error::Dimension(format!("upsample expects 4-d input, got {s:?}")));
        };
        let src = self.value(x).data();
        let mut out = vec![F::zero(); b * c * 4 * h * w];
        for plane in 0..b * c {
            let sp = &src[plane * h * w..][..h * w];
            let dp = &mut out[plane * 4 * h * w..][..4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dp[y * 2 * w + xx] = sp[(y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// `sum_b weights[b] * mean_pixels((pred_b - target_b)^2)`.
    pub fn weighted_mse(&mut self, pred: Var, target: Var, weights: Vec<F>) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        t.expect_shape(p.shape(), "weighted_mse")?;
        let batch = p.shape().first().copied().unwrap_or(1);
        if weights.len() != batch {
            return Err(Error::Dimension(format!(
                "weighted_mse: {} weights for batch of {batch}",
                weights.len()
            )));
        }
        let per = p.numel() / batch.max(1);
        let mut total = F::zero();
        for (bi, &wb) in weights.iter().enumerate() {
            let s: F = p.data()[bi * per..(bi + 1) * per]
                .iter()
                .zip(&t.data()[bi * per..(bi + 1) * per])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            total += wb * s / F::of(per as f64);
        }
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedMse {
                pred,
                target,
                weights,
            },
            rg,
        ))
    }

    /// Effective weight `s_out[o] * centered[o,i,..] * s_in[i]`.
    pub fn channel_scale(&mut self, centered: Arc<Tensor<F>>, s_out: Var, s_in: Var) -> Result<Var> {
        let w = channel_scale_value(&centered, self.value(s_out), self.value(s_in))?;
        let rg = self.rg(s_out) || self.rg(s_in);
        Ok(self.push(
            w,
            Op::ChannelScale {
                centered,
                s_out,
                s_in,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Grads<F>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Ok(Grads { grads });
        }
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![F::one()])?);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        self.rg(*x),
                        self.rg(*w),
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, self.rg(*b).then_some(db));
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = ops::conv2d_backward(
                        geom,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        g.data(),
                        self.rg(*x),
                        self.rg(*w),
                    );
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        acc(&mut grads, *b, self.rg(*b).then_some(db));
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, self.rg(*a).then(|| g.clone()));
                    acc(&mut grads, *b, self.rg(*b).then_some(g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, self.rg(*a).then(|| g.clone()));
                    acc(&mut grads, *b, self.rg(*b).then(|| g.map(|v| -v)));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let da = self.rg(*a).then(|| g.zip_map(vb, |x, y| x * y).expect("shape"));
                    let db = self.rg(*b).then(|| g.zip_map(va, |x, y| x * y).expect("shape"));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, Some(g.map(|v| v * c)));
                }
                Op::Silu(a) => {
                    let d = g
                        .zip_map(self.value(*a), |gv, x| {
                            let s = sigmoid(x);
                            gv * (s + x * s * (F::one() - s))
                        })
                        .expect("shape");
                    acc(&mut grads, *a, Some(d));
                }
                Op::AddChannel(x, e) => {
                    if self.rg(*e) {
                        let es = self.value(*e).shape().to_vec();
                        let hw = g.numel() / (es[0] * es[1]);
                        let de: Vec<F> = g.data().chunks(hw).map(|c| c.iter().copied().sum()).collect();
                        acc(&mut grads, *e, Some(Tensor::new(es, de)?));
                    }
                    acc(&mut grads, *x, self.rg(*x).then_some(g));
                }
                Op::Upsample2x(x) => {
                    let s = self.value(*x).shape().to_vec();
                    let (h, w) = (s[2], s[3]);
                    let mut d = vec![F::zero(); self.value(*x).numel()];
                    for (plane, dp) in d.chunks_mut(h * w).enumerate() {
                        let gp = &g.data()[plane * 4 * h * w..][..4 * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                dp[(y / 2) * w + xx / 2] += gp[y * 2 * w + xx];
                            }
                        }
                    }
                    acc(&mut grads, *x, Some(Tensor::new(s, d)?));
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    acc(&mut grads, *a, Some(Tensor::full(self.value(*a).shape().to_vec(), gv)));
                }
                Op::WeightedMse {
                    pred,
                    target,
                    weights,
                } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let batch = weights.len();
                    let per = p.numel() / batch.max(1);
                    let gv = g.item();
                    let mut d = vec![F::zero(); p.numel()];
                    for (bi, &wb) in weights.iter().enumerate() {
                        let coef = gv * wb * F::of(2.0) / F::of(per as f64);
                        for j in bi * per..(bi + 1) * per {
                            d[j] = coef * (p.data()[j] - t.data()[j]);
                        }
                    }
                    let d = Tensor::new(p.shape().to_vec(), d)?;
                    acc(&mut grads, *target, self.rg(*target).then(|| d.map(|v| -v)));
                    acc(&mut grads, *pred, self.rg(*pred).then_some(d));
                }
                Op::ChannelScale {
                    centered,
                    s_out,
                    s_in,
                } => {
                    let (go, gi) = channel_scale_grads(
                        centered,
                        self.value(*s_out).data(),
                        self.value(*s_in).data(),
                        g.data(),
                    );
                    let so = self.value(*s_out).shape().to_vec();
                    let si = self.value(*s_in).shape().to_vec();
                    acc(&mut grads, *s_out, self.rg(*s_out).then(|| Tensor::new(so, go).expect("shape")));
                    acc(&mut grads, *s_in, self.rg(*s_in).then(|| Tensor::new(si, gi).expect("shape")));
                }
            }
        }
        Ok(Grads { grads })
    }
}

fn acc<F: Real>(grads: &mut [Option<Tensor<F>>], v: Var, g: Option<Tensor<F>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g).expect("gradient shape"),
        slot => *slot = Some(g),
    }
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub(crate) fn channel_scale_value<F: Real>(
    centered: &Tensor<F>,
    s_out: &Tensor<F>,
    s_in: &Tensor<F>,
) -> Result<Tensor<F>> {
    let shape = centered.shape();
    if shape.len() < 2 || s_out.numel() != shape[0] || s_in.numel() != shape[1] {
        return Err(Error::Dimension(format!(
            "scales of length {} (out) and {} (in) do not fit weight {:?}",
            s_out.numel(),
            s_in.numel(),
            shape
        )));
    }
    let (c_out, c_in) = (shape[0], shape[1]);
    let spatial = centered.numel() / (c_out * c_in).max(1);
    let mut w = centered.clone();
    for (o, row) in w.data_mut().chunks_mut(c_in * spatial).enumerate() {
        let so = s_out.data()[o];
        for (i, taps) in row.chunks_mut(spatial).enumerate() {
            let f = so * s_in.data()[i];
            for v in taps {
                *v *= f;
            }
        }
    }
    Ok(w)
}

/// Closed-form gradients of the channel-scaled weight with respect to both
/// scale vectors, given the weight gradient `g`.
pub(crate) fn channel_scale_grads<F: Real>(
    centered: &Tensor<F>,
    s_out: &[F],
    s_in: &[F],
    g: &[F],
) -> (Vec<F>, Vec<F>) {
    let (c_out, c_in) = (s_out.len(), s_in.len());
    let spatial = centered.numel() / (c_out * c_in).max(1);
    let mut go = vec![F::zero(); c_out];
    let mut gi = vec![F::zero(); c_in];
    let q = centered.data();
    for o in 0..c_out {
        let mut row_acc = F::zero();
        for i in 0..c_in {
            let base = (o * c_in + i) * spatial;
            let mut dot = F::zero();
            for j in base..base + spatial {
                dot += g[j] * q[j];
            }
            row_acc += dot * s_in[i];
            gi[i] += dot * s_out[o];
        }
        go[o] = row_acc;
    }
    (go, gi)
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Accumulates the gradient of `v` into `p` (no-op for frozen params).
    pub fn accumulate_into(&self, v: Var, p: &mut Param<F>) -> Result<()> {
        match self.get(v) {
            Some(g) => p.accumulate(g),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(data: &[f64], trainable: bool) -> Param<f64> {
        Param::new(Tensor::from_f64(vec![data.len()], data).unwrap(), trainable)
    }

    #[test]
    fn sum_gives_ones() {
        let mut w = p(&[1., -2., 3.], true);
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let s = tape.sum(v);
        tape.backward(s).unwrap().accumulate_into(v, &mut w).unwrap();
        assert_eq!(w.grad.data(), &[1., 1., 1.]);
    }

    #[test]
    fn half_square_gives_value() {
        let mut w = p(&[1., -2., 3.], true);
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap().accumulate_into(v, &mut w).unwrap();
        assert_eq!(w.grad.data(), w.value.data());
    }

    #[test]
    fn frozen_param_untouched() {
        let mut a = p(&[1., 2.], true);
        let mut b = p(&[3., 4.], false);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&a), tape.param(&b));
        let m = tape.mul(va, vb).unwrap();
        let s = tape.sum(m);
        let grads = tape.backward(s).unwrap();
        grads.accumulate_into(va, &mut a).unwrap();
        grads.accumulate_into(vb, &mut b).unwrap();
        assert_eq!(a.grad.data(), &[3., 4.]);
        assert_eq!(b.grad.data(), &[0., 0.]);
        assert!(grads.get(vb).is_none());
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let w = p(&[1., 2.], true);
        let mut tape = Tape::new();
        let v = tape.param(&w);
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn two_backward_passes_accumulate_twice() {
        let mut w = p(&[0.5, -1.5], true);
        let mut tape = Tape::new();
        let v = tape.param(&w);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let grads = tape.backward(s).unwrap();
        grads.accumulate_into(v, &mut w).unwrap();
        let once = w.grad.clone();
        tape.backward(s).unwrap().accumulate_into(v, &mut w).unwrap();
        for (a, b) in w.grad.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }
}
