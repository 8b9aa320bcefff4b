use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{self, Stream};
use crate::numerics::{Grads, Param, Real, Tape, Tensor, Var};
use crate::qlayers::{LayerKind, QuantLayer, ScaleSet};

/// Residual conv U-Net. Level `l` runs at `image_size / 2^l` with
/// `base_width * channel_mults[l]` channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    pub time_embed_dim: usize,
    pub sinusoid_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 1,
            base_width: 16,
            channel_mults: vec![1, 2, 4],
            res_blocks: 1,
            time_embed_dim: 64,
            sinusoid_dim: 32,
        }
    }
}

impl DenoiserConfig {
    /// Wide low-resolution variant with the weight distribution of a large
    /// U-Net (most parameters in the deepest levels). Used for storage
    /// accounting; far too slow to train on a CPU.
    pub fn wide() -> Self {
        Self {
            base_width: 128,
            channel_mults: vec![1, 2, 4, 8],
            ..Self::default()
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        self.channel_mults.iter().map(|m| m * self.base_width).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.base_width,
            self.res_blocks,
            self.time_embed_dim,
            self.sinusoid_dim,
        ];
        if positive.contains(&0) || self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(Error::Config(format!("denoiser extents must be positive: {self:?}")));
        }
        if self.sinusoid_dim % 2 != 0 {
            return Err(Error::Config("sinusoid_dim must be even".into()));
        }
        let halvings = self.channel_mults.len() - 1;
        if self.image_size % (1 << halvings) != 0 {
            return Err(Error::Config(format!(
                "image size {} cannot be halved {halvings} times",
                self.image_size
            )));
        }
        Ok(())
    }
}

/// Full-precision layer.
#[derive(Debug, Clone)]
pub struct DenseLayer<F> {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Param<F>,
    pub bias: Param<F>,
}

#[derive(Debug, Clone)]
pub enum Layer<F> {
    Dense(DenseLayer<F>),
    Quant(QuantLayer<F>),
}

impl<F: Real> Layer<F> {
    pub fn name(&self) -> &str {
        match self {
            Layer::Dense(d) => &d.name,
            Layer::Quant(q) => &q.name,
        }
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(d) => d.kind,
            Layer::Quant(q) => q.kind,
        }
    }

    pub fn weight_shape(&self) -> &[usize] {
        match self {
            Layer::Dense(d) => d.weight.value.shape(),
            Layer::Quant(q) => q.shape(),
        }
    }

    pub fn as_dense(&self) -> Option<&DenseLayer<F>> {
        match self {
            Layer::Dense(d) => Some(d),
            Layer::Quant(_) => None,
        }
    }

    pub fn as_quant(&self) -> Option<&QuantLayer<F>> {
        match self {
            Layer::Quant(q) => Some(q),
            Layer::Dense(_) => None,
        }
    }
}

/// Static description of one layer slot, derived from the config.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv1: usize,
    temb: usize,
    conv2: usize,
}

#[derive(Debug, Clone)]
struct Plan {
    conv_in: usize,
    time: [usize; 2],
    enc: Vec<Vec<Block>>,
    down: Vec<usize>,
    up: Vec<usize>,
    dec: Vec<Vec<Block>>,
    conv_out: usize,
}

fn build_plan(cfg: &DenoiserConfig) -> (Plan, Vec<LayerSpec>) {
    let mut specs = Vec::new();
    let mut push = |name: String, kind: LayerKind, shape: Vec<usize>| {
        specs.push(LayerSpec { name, kind, shape });
        specs.len() - 1
    };
    let conv = |stride| LayerKind::Conv2d { stride, padding: 1 };
    let widths = cfg.widths();
    let te = cfg.time_embed_dim;

    let conv_in = push("conv_in".into(), conv(1), vec![widths[0], cfg.channels, 3, 3]);
    let time = [
        push("time.0".into(), LayerKind::Linear, vec![te, cfg.sinusoid_dim]),
        push("time.1".into(), LayerKind::Linear, vec![te, te]),
    ];
    let block = |prefix: String, w: usize, push: &mut dyn FnMut(String, LayerKind, Vec<usize>) -> usize| Block {
        conv1: push(format!("{prefix}.conv1"), conv(1), vec![w, w, 3, 3]),
        temb: push(format!("{prefix}.temb"), LayerKind::Linear, vec![w, te]),
        conv2: push(format!("{prefix}.conv2"), conv(1), vec![w, w, 3, 3]),
    };
    let levels = widths.len();
    let mut enc = Vec::new();
    let mut down = Vec::new();
    for (l, &w) in widths.iter().enumerate() {
        enc.push((0..cfg.res_blocks).map(|b| block(format!("enc.{l}.{b}"), w, &mut push)).collect());
        if l + 1 < levels {
            down.push(push(format!("down.{l}"), conv(2), vec![widths[l + 1], w, 3, 3]));
        }
    }
    let mut up = vec![0; levels - 1];
    let mut dec = vec![Vec::new(); levels - 1];
    for l in (0..levels - 1).rev() {
        up[l] = push(format!("up.{l}"), conv(1), vec![widths[l], widths[l + 1], 3, 3]);
        dec[l] = (0..cfg.res_blocks)
            .map(|b| block(format!("dec.{l}.{b}"), widths[l], &mut push))
            .collect();
    }
    let conv_out = push("conv_out".into(), conv(1), vec![cfg.channels, widths[0], 3, 3]);
    (
        Plan {
            conv_in,
            time,
            enc,
            down,
            up,
            dec,
            conv_out,
        },
        specs,
    )
}

/// Which scales the quantized layers use during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum ScaleChoice<'a, F> {
    /// The post-training scales, `s_in = 1`, nothing trainable.
    Ptq,
    /// One scale set per quantized layer, in model order.
    Sets(&'a [ScaleSet<F>]),
}

/// Identifies the parameter a tape leaf was bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Weight(usize),
    Bias(usize),
    ScaleOut(usize),
    ScaleIn(usize),
}

/// Collects the tape variables of trainable parameters during a forward pass.
#[derive(Debug, Default)]
pub struct Bindings {
    /// Record full-precision weights and biases as trainable leaves.
    pub dense: bool,
    entries: Vec<(Slot, Var)>,
}

impl Bindings {
    pub fn dense() -> Self {
        Self {
            dense: true,
            entries: Vec::new(),
        }
    }

    pub fn scales_only() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[(Slot, Var)] {
        &self.entries
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser<F> {
    config: DenoiserConfig,
    layers: Vec<Layer<F>>,
    plan: Plan,
    /// Position of each layer among the quantized layers.
    qindex: Vec<Option<usize>>,
}

fn sinusoid(ts: &[usize], dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let freqs = (0..half).map(|j| (-(10000f64.ln()) * j as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t as f64 * f).collect();
        out.extend(args.iter().map(|a| a.sin()));
        out.extend(args.iter().map(|a| a.cos()));
    }
    out
}

impl<F: Real> Denoiser<F> {
    /// Fresh full-precision model; weights and biases drawn uniformly from
    /// `±1/sqrt(fan_in)`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (_, specs) = build_plan(&config);
        let mut rng = rng::stream(seed, Stream::Init);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let fan_in: usize = spec.shape[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut draw = |n: usize| -> Vec<F> {
                    (0..n).map(|_| F::of(rng.random_range(-bound..bound))).collect()
                };
                let n: usize = spec.shape.iter().product();
                let weight = Tensor::new(spec.shape.clone(), draw(n)).expect("shape");
                let bias = Tensor::new(vec![spec.shape[0]], draw(spec.shape[0])).expect("shape");
                Layer::Dense(DenseLayer {
                    name: spec.name,
                    kind: spec.kind,
                    weight: Param::trainable(weight),
                    bias: Param::trainable(bias),
                })
            })
            .collect();
        Self::from_layers(config, layers)
    }

    /// Assembles a model from layers, checking them against the architecture.
    pub fn from_layers(config: DenoiserConfig, layers: Vec<Layer<F>>) -> Result<Self> {
        config.validate()?;
        let (plan, specs) = build_plan(&config);
        if specs.len() != layers.len() {
            return Err(Error::Dimension(format!(
                "architecture has {} layers, got {}",
                specs.len(),
                layers.len()
            )));
        }
        for (spec, layer) in specs.iter().zip(&layers) {
            if spec.name != layer.name() || spec.kind != layer.kind() || spec.shape != layer.weight_shape() {
                return Err(Error::Dimension(format!(
                    "layer {} ({:?}, {:?}) does not match expected {} ({:?}, {:?})",
                    layer.name(),
                    layer.kind(),
                    layer.weight_shape(),
                    spec.name,
                    spec.kind,
                    spec.shape
                )));
            }
        }
        let mut model = Self {
            config,
            layers,
            plan,
            qindex: Vec::new(),
        };
        model.reindex();
        Ok(model)
    }

    fn reindex(&mut self) {
        let mut next = 0;
        self.qindex = self
            .layers
            .iter()
            .map(|l| {
                l.as_quant().map(|_| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<F>] {
        &mut self.layers
    }

    pub(crate) fn replace_with_quant(&mut self, idx: usize, layer: QuantLayer<F>) {
        self.layers[idx] = Layer::Quant(layer);
        self.reindex();
    }

    pub fn quant_layers(&self) -> Vec<&QuantLayer<F>> {
        self.layers.iter().filter_map(Layer::as_quant).collect()
    }

    pub fn n_quant_layers(&self) -> usize {
        self.qindex.iter().flatten().count()
    }

    /// Total scalar parameter count (weights and biases).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let s = l.weight_shape();
                s.iter().product::<usize>() + s[0]
            })
            .sum()
    }

    /// Trainable full-precision parameters in a stable order.
    pub fn dense_params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some([&mut d.weight, &mut d.bias]),
                Layer::Quant(_) => None,
            })
            .flatten()
            .collect()
    }

    pub fn dense_params(&self) -> Vec<&Param<F>> {
        self.layers
            .iter()
            .filter_map(Layer::as_dense)
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    /// Default scale sets (the PTQ scales) for every quantized layer.
    pub fn ptq_scale_sets(&self, mode: crate::qlayers::ScaleMode) -> Vec<ScaleSet<F>> {
        self.quant_layers().iter().map(|q| q.ptq_scales(mode)).collect()
    }

    fn apply(
        &self,
        tape: &mut Tape<F>,
        idx: usize,
        x: Var,
        scales: ScaleChoice<'_, F>,
        binds: &mut Bindings,
    ) -> Result<Var> {
        match &self.layers[idx] {
            Layer::Dense(d) => {
                let (w, b) = if binds.dense {
                    let (w, b) = (tape.param(&d.weight), tape.param(&d.bias));
                    if d.weight.trainable {
                        binds.entries.push((Slot::Weight(idx), w));
                    }
                    if d.bias.trainable {
                        binds.entries.push((Slot::Bias(idx), b));
                    }
                    (w, b)
                } else {
                    (tape.constant(d.weight.value.clone()), tape.constant(d.bias.value.clone()))
                };
                match d.kind {
                    LayerKind::Linear => tape.linear(x, w, Some(b)),
                    LayerKind::Conv2d { stride, padding } => tape.conv2d(x, w, Some(b), stride, padding),
                }
            }
            Layer::Quant(q) => {
                let qi = self.qindex[idx].expect("quantized layer index");
                match scales {
                    ScaleChoice::Ptq => {
                        let mut set = q.ptq_scales(crate::qlayers::ScaleMode::Baseline);
                        set.s_out.trainable = false;
                        Ok(q.record(tape, x, &set)?.0)
                    }
                    ScaleChoice::Sets(sets) => {
                        let set = sets.get(qi).ok_or_else(|| {
                            Error::Lookup(format!("no scale set for quantized layer {}", q.name))
                        })?;
                        let (y, so, si) = q.record(tape, x, set)?;
                        if set.s_out.trainable {
                            binds.entries.push((Slot::ScaleOut(qi), so));
                        }
                        if set.s_in.trainable {
                            binds.entries.push((Slot::ScaleIn(qi), si));
                        }
                        Ok(y)
                    }
                }
            }
        }
    }

    fn res_block(
        &self,
        tape: &mut Tape<F>,
        h: Var,
        emb: Var,
        blk: Block,
        scales: ScaleChoice<'_, F>,
        binds: &mut Bindings,
    ) -> Result<Var> {
        let r = tape.silu(h);
        let r = self.apply(tape, blk.conv1, r, scales, binds)?;
        let e = self.apply(tape, blk.temb, emb, scales, binds)?;
        let r = tape.add_channel(r, e)?;
        let r = tape.silu(r);
        let r = self.apply(tape, blk.conv2, r, scales, binds)?;
        tape.add(h, r)
    }

    /// Records the noise prediction for a batch `x [B,C,H,W]` at timesteps `ts`.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        ts: &[usize],
        scales: ScaleChoice<'_, F>,
        binds: &mut Bindings,
    ) -> Result<Var> {
        let xs = tape.value(x).shape().to_vec();
        let c = &self.config;
        if xs != [ts.len(), c.channels, c.image_size, c.image_size] {
            return Err(Error::Dimension(format!(
                "denoiser expects [{}, {}, {}, {}], got {xs:?}",
                ts.len(),
                c.channels,
                c.image_size,
                c.image_size
            )));
        }
        let p = &self.plan;
        let sin = Tensor::from_f64(vec![ts.len(), c.sinusoid_dim], &sinusoid(ts, c.sinusoid_dim))?;
        let sin = tape.constant(sin);
        let e = self.apply(tape, p.time[0], sin, scales, binds)?;
        let e = tape.silu(e);
        let e = self.apply(tape, p.time[1], e, scales, binds)?;
        let emb = tape.silu(e);

        let mut h = self.apply(tape, p.conv_in, x, scales, binds)?;
        let mut skips = Vec::with_capacity(p.enc.len());
        for (l, blocks) in p.enc.iter().enumerate() {
            for &blk in blocks {
                h = self.res_block(tape, h, emb, blk, scales, binds)?;
            }
            skips.push(h);
            if let Some(&d) = p.down.get(l) {
                h = self.apply(tape, d, h, scales, binds)?;
            }
        }
        for l in (0..p.up.len()).rev() {
            h = tape.upsample2x(h)?;
            h = self.apply(tape, p.up[l], h, scales, binds)?;
            h = tape.add(h, skips[l])?;
            for &blk in &p.dec[l] {
                h = self.res_block(tape, h, emb, blk, scales, binds)?;
            }
        }
        let h = tape.silu(h);
        self.apply(tape, p.conv_out, h, scales, binds)
    }

    /// Eager noise prediction.
    pub fn predict(&self, x: &Tensor<F>, ts: &[usize], scales: ScaleChoice<'_, F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, ts, scales, &mut Bindings::scales_only())?;
        Ok(tape.value(out).clone())
    }

    /// Adds the gradients of bound full-precision parameters into the model.
    pub fn accumulate_dense(&mut self, grads: &Grads<F>, binds: &Bindings) -> Result<()> {
        for &(slot, var) in binds.entries() {
            match slot {
                Slot::Weight(i) | Slot::Bias(i) => {
                    if let Layer::Dense(d) = &mut self.layers[i] {
                        let p = if matches!(slot, Slot::Weight(_)) {
                            &mut d.weight
                        } else {
                            &mut d.bias
                        };
                        grads.accumulate_into(var, p)?;
                    }
                }
                Slot::ScaleOut(_) | Slot::ScaleIn(_) => {}
            }
        }
        Ok(())
    }

    /// Adds the gradients of bound scale parameters into `sets`.
    pub fn accumulate_scales(sets: &mut [ScaleSet<F>], grads: &Grads<F>, binds: &Bindings) -> Result<()> {
        for &(slot, var) in binds.entries() {
            match slot {
                Slot::ScaleOut(q) => grads.accumulate_into(var, &mut sets[q].s_out)?,
                Slot::ScaleIn(q) => grads.accumulate_into(var, &mut sets[q].s_in)?,
                Slot::Weight(_) | Slot::Bias(_) => {}
            }
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> Denoiser<G> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(DenseLayer {
                    name: d.name.clone(),
                    kind: d.kind,
                    weight: d.weight.cast(),
                    bias: d.bias.cast(),
                }),
                Layer::Quant(q) => Layer::Quant(q.cast()),
            })
            .collect();
        Denoiser::from_layers(self.config.clone(), layers).expect("same architecture")
    }

    /// Marks all full-precision parameters trainable or frozen.
    pub fn set_dense_trainable(&mut self, trainable: bool) {
        for p in self.dense_params_mut() {
            p.trainable = trainable;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_size_and_order() {
        let m = Denoiser::<f32>::new(DenoiserConfig::default(), 0).unwrap();
        let n = m.param_count();
        assert!((50_000..=200_000).contains(&n), "{n}");
        assert_eq!(m.layers()[0].name(), "conv_in");
        assert_eq!(m.layers().last().unwrap().name(), "conv_out");
    }

    #[test]
    fn forward_shape_and_determinism() {
        let cfg = DenoiserConfig {
            base_width: 4,
            channel_mults: vec![1, 2],
            image_size: 8,
            time_embed_dim: 8,
            sinusoid_dim: 4,
            ..Default::default()
        };
        let m = Denoiser::<f64>::new(cfg.clone(), 3).unwrap();
        let x = Tensor::<f64>::ones(vec![2, 1, 8, 8]);
        let a = m.predict(&x, &[1, 7], ScaleChoice::Ptq).unwrap();
        let b = Denoiser::<f64>::new(cfg, 3).unwrap().predict(&x, &[1, 7], ScaleChoice::Ptq).unwrap();
        assert_eq!(a.shape(), &[2, 1, 8, 8]);
        assert_eq!(a, b);
        assert!(m.predict(&x, &[1], ScaleChoice::Ptq).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = DenoiserConfig {
            image_size: 6,
            channel_mults: vec![1, 2, 4],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(DenoiserConfig::wide().validate().is_ok());
    }
}
