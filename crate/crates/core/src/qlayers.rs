//! Quantized linear/conv2d layers whose only trainable parameters are the
//! quantization scales.
//!
//! The effective weight is `W[o,i,..] = s_out[o] * (codes[o,i,..] - z[o]) * s_in[i]`.
//! With `s_in` fixed at one this is the plain per-channel scale update; the
//! multi-channel-wise mode trains `s_in` as well, so every update to a layer
//! is a rank-1 rescaling of its dequantized weight.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{self, ConvGeom};
use crate::numerics::{Param, Real, Tape, Tensor, Var};
use crate::quantizer::QuantizedTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum LayerKind {
    Linear,
    Conv2d { stride: usize, padding: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Only `s_out` trains; `s_in` is frozen at one.
    Baseline,
    /// Both `s_out` and `s_in` train.
    Mcsu,
}

/// One layer's scale pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSet<F> {
    pub s_out: Param<F>,
    pub s_in: Param<F>,
    mode: ScaleMode,
}

impl<F: Real> ScaleSet<F> {
    pub fn baseline(s_out: Vec<F>, c_in: usize) -> Self {
        let c_out = s_out.len();
        Self {
            s_out: Param::trainable(Tensor::new(vec![c_out], s_out).expect("shape")),
            s_in: Param::frozen(Tensor::ones(vec![c_in])),
            mode: ScaleMode::Baseline,
        }
    }

    pub fn mcsu(s_out: Vec<F>, s_in: Vec<F>) -> Self {
        let (c_out, c_in) = (s_out.len(), s_in.len());
        Self {
            s_out: Param::trainable(Tensor::new(vec![c_out], s_out).expect("shape")),
            s_in: Param::trainable(Tensor::new(vec![c_in], s_in).expect("shape")),
            mode: ScaleMode::Mcsu,
        }
    }

    /// Rebuilds a set from stored values, enforcing the mode's invariants.
    pub fn from_values(mode: ScaleMode, s_out: Vec<F>, s_in: Vec<F>) -> Result<Self> {
        match mode {
            ScaleMode::Mcsu => Ok(Self::mcsu(s_out, s_in)),
            ScaleMode::Baseline => {
                if s_in.iter().any(|&v| v != F::one()) {
                    return Err(Error::Domain("baseline scale sets must have s_in = 1".into()));
                }
                Ok(Self::baseline(s_out, s_in.len()))
            }
        }
    }

    pub fn mode(&self) -> ScaleMode {
        self.mode
    }

    pub fn c_out(&self) -> usize {
        self.s_out.numel()
    }

    pub fn c_in(&self) -> usize {
        self.s_in.numel()
    }

    pub fn trainable_count(&self) -> usize {
        self.c_out() + if self.s_in.trainable { self.c_in() } else { 0 }
    }

    pub fn params(&self) -> [&Param<F>; 2] {
        [&self.s_out, &self.s_in]
    }

    pub fn params_mut(&mut self) -> [&mut Param<F>; 2] {
        [&mut self.s_out, &mut self.s_in]
    }

    pub fn zero_grad(&mut self) {
        self.s_out.zero_grad();
        self.s_in.zero_grad();
    }

    pub fn cast<G: Real>(&self) -> ScaleSet<G> {
        ScaleSet {
            s_out: self.s_out.cast(),
            s_in: self.s_in.cast(),
            mode: self.mode,
        }
    }

    /// Bitwise equality of the scale values.
    pub fn same_values(&self, other: &Self) -> bool {
        let bits = |t: &Tensor<F>| t.to_f64_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        self.mode == other.mode
            && bits(&self.s_out.value) == bits(&other.s_out.value)
            && bits(&self.s_in.value) == bits(&other.s_in.value)
    }
}

/// Trainable scalars per layer: `C_out * N` for baseline, `(C_out + C_in) * N`
/// for the multi-channel-wise update.
pub fn trainable_param_count(c_out: usize, c_in: usize, mode: ScaleMode, n_experts: usize) -> usize {
    let per = match mode {
        ScaleMode::Baseline => c_out,
        ScaleMode::Mcsu => c_out + c_in,
    };
    per * n_experts
}

/// A layer with frozen integer codes, frozen zero-points and a frozen
/// full-precision bias.
#[derive(Debug, Clone)]
pub struct QuantLayer<F> {
    pub name: String,
    pub kind: LayerKind,
    codes: QuantizedTensor,
    bias: Param<F>,
    centered: Arc<Tensor<F>>,
}

impl<F: Real> QuantLayer<F> {
    pub fn new(name: String, kind: LayerKind, codes: QuantizedTensor, bias: Tensor<F>) -> Result<Self> {
        let rank = codes.shape().len();
        let ok_rank = match kind {
            LayerKind::Linear => rank == 2,
            LayerKind::Conv2d { .. } => rank == 4 && codes.shape()[2] == codes.shape()[3],
        };
        if !ok_rank {
            return Err(Error::Dimension(format!(
                "layer {name}: weight shape {:?} does not fit {kind:?}",
                codes.shape()
            )));
        }
        if bias.shape() != [codes.shape()[0]] {
            return Err(Error::Dimension(format!(
                "layer {name}: bias {:?} does not match {} output channels",
                bias.shape(),
                codes.shape()[0]
            )));
        }
        let centered = Arc::new(codes.centered());
        Ok(Self {
            name,
            kind,
            codes,
            bias: Param::frozen(bias),
            centered,
        })
    }

    pub fn codes(&self) -> &QuantizedTensor {
        &self.codes
    }

    pub fn bias(&self) -> &Tensor<F> {
        &self.bias.value
    }

    pub fn centered(&self) -> &Tensor<F> {
        &self.centered
    }

    pub fn shape(&self) -> &[usize] {
        self.codes.shape()
    }

    pub fn c_out(&self) -> usize {
        self.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.shape()[1]
    }

    /// The post-training scale as a starting point for fine-tuning.
    pub fn ptq_scales(&self, mode: ScaleMode) -> ScaleSet<F> {
        let s_out: Vec<F> = self.codes.params().scale.iter().map(|&s| F::of(s as f64)).collect();
        match mode {
            ScaleMode::Baseline => ScaleSet::baseline(s_out, self.c_in()),
            ScaleMode::Mcsu => ScaleSet::mcsu(s_out, vec![F::one(); self.c_in()]),
        }
    }

    fn check_scales(&self, scales: &ScaleSet<F>) -> Result<()> {
        if scales.c_out() != self.c_out() || scales.c_in() != self.c_in() {
            return Err(Error::Dimension(format!(
                "layer {}: scales ({}, {}) do not match channels ({}, {})",
                self.name,
                scales.c_out(),
                scales.c_in(),
                self.c_out(),
                self.c_in()
            )));
        }
        Ok(())
    }

    pub fn effective_weight(&self, scales: &ScaleSet<F>) -> Result<Tensor<F>> {
        self.check_scales(scales)?;
        crate::numerics::tape::channel_scale_value(&self.centered, &scales.s_out.value, &scales.s_in.value)
    }

    /// Eager forward pass.
    pub fn forward(&self, input: &Tensor<F>, scales: &ScaleSet<F>) -> Result<Tensor<F>> {
        let w = self.effective_weight(scales)?;
        match self.kind {
            LayerKind::Linear => ops::linear_forward(input, &w, Some(&self.bias.value)),
            LayerKind::Conv2d { stride, padding } => {
                ops::conv2d_forward(input, &w, Some(&self.bias.value), stride, padding)
            }
        }
    }

    /// Records the forward pass on `tape`. Returns the output and the tape
    /// variables bound to `s_out` and `s_in`.
    pub fn record(&self, tape: &mut Tape<F>, x: Var, scales: &ScaleSet<F>) -> Result<(Var, Var, Var)> {
        self.check_scales(scales)?;
        let so = tape.param(&scales.s_out);
        let si = tape.param(&scales.s_in);
        let w = tape.channel_scale(Arc::clone(&self.centered), so, si)?;
        let b = tape.param(&self.bias);
        let y = match self.kind {
            LayerKind::Linear => tape.linear(x, w, Some(b))?,
            LayerKind::Conv2d { stride, padding } => tape.conv2d(x, w, Some(b), stride, padding)?,
        };
        Ok((y, so, si))
    }

    /// Closed-form scale gradients from `G = dL/dW_eff`:
    /// `g_out[o] = sum_i G[o,i]·q[o,i]·s_in[i]`, `g_in[i] = sum_o G[o,i]·q[o,i]·s_out[o]`,
    /// with spatial taps summed for conv kernels. Frozen `s_in` gets zeros.
    pub fn scale_gradients_from_weight_grad(
        &self,
        weight_grad: &Tensor<F>,
        scales: &ScaleSet<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        self.check_scales(scales)?;
        weight_grad.expect_shape(self.shape(), "weight gradient")?;
        let (go, gi) = crate::numerics::tape::channel_scale_grads(
            &self.centered,
            scales.s_out.value.data(),
            scales.s_in.value.data(),
            weight_grad.data(),
        );
        let gi = if scales.s_in.trainable {
            gi
        } else {
            vec![F::zero(); self.c_in()]
        };
        Ok((
            Tensor::new(vec![self.c_out()], go)?,
            Tensor::new(vec![self.c_in()], gi)?,
        ))
    }

    /// Scale gradients for a forward pass on `input` whose output received
    /// the upstream gradient `d_out`. Batch and spatial positions are summed.
    pub fn scale_gradients(
        &self,
        input: &Tensor<F>,
        d_out: &Tensor<F>,
        scales: &ScaleSet<F>,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        let w = self.effective_weight(scales)?;
        let g = match self.kind {
            LayerKind::Linear => {
                let (b, _, co) = ops::linear_dims(input.shape(), w.shape())?;
                d_out.expect_shape(&[b, co], "upstream gradient")?;
                ops::linear_backward(input, &w, d_out, false, true).1
            }
            LayerKind::Conv2d { stride, padding } => {
                let geom = ConvGeom::new(input.shape(), w.shape(), stride, padding)?;
                d_out.expect_shape(&[geom.batch, geom.c_out, geom.ho, geom.wo], "upstream gradient")?;
                ops::conv2d_backward(&geom, input.data(), w.data(), d_out.data(), false, true).1
            }
        }
        .expect("weight gradient requested");
        self.scale_gradients_from_weight_grad(&g, scales)
    }

    pub fn trainable_param_count(&self, mode: ScaleMode, n_experts: usize) -> usize {
        trainable_param_count(self.c_out(), self.c_in(), mode, n_experts)
    }

    pub fn cast<G: Real>(&self) -> QuantLayer<G> {
        QuantLayer::new(self.name.clone(), self.kind, self.codes.clone(), self.bias.value.cast())
            .expect("valid layer")
    }
}
