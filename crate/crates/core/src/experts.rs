//! Timestep-aware scale banks: `N` independent scale sets per quantized layer,
//! one per uniform slice of the denoising timeline, routed by `floor(t * N / T)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::rng::{self, Stream};
use crate::numerics::Real;
use crate::qlayers::{ScaleMode, ScaleSet};

/// Index of the expert that owns timestep `t` out of `total` steps.
/// `t == total` is clamped into the last expert.
pub fn expert_index(t: i64, n_experts: usize, total: usize) -> Result<usize> {
    if n_experts == 0 {
        return Err(Error::Config("at least one expert is required".into()));
    }
    if t < 0 || t as u64 > total as u64 {
        return Err(Error::Domain(format!("timestep {t} outside [0, {total}]")));
    }
    let idx = (t as u128 * n_experts as u128 / total.max(1) as u128) as usize;
    Ok(idx.min(n_experts - 1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleInit {
    pub mean: f64,
    pub std: f64,
}

impl Default for ScaleInit {
    fn default() -> Self {
        Self { mean: 1.0, std: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBank<F> {
    total_steps: usize,
    mode: ScaleMode,
    layer_names: Vec<String>,
    /// `experts[e][l]` is expert `e`'s scale set for quantized layer `l`.
    experts: Vec<Vec<ScaleSet<F>>>,
}

impl<F: Real> ExpertBank<F> {
    /// Clones the PTQ scale into `s_out` for every expert and draws `s_in`
    /// from `Normal(mean, std^2)`, consuming draws layer by layer and, within
    /// a layer, expert by expert. Baseline banks keep `s_in` at exactly one.
    pub fn init(
        model: &Denoiser<F>,
        n_experts: usize,
        total_steps: usize,
        mode: ScaleMode,
        init: ScaleInit,
        seed: u64,
    ) -> Result<Self> {
        if n_experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        if total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if !(init.std >= 0.0) || !init.mean.is_finite() {
            return Err(Error::Config(format!(
                "invalid scale init mean {} std {}",
                init.mean, init.std
            )));
        }
        let layers = model.quant_layers();
        let mut rng = rng::stream(seed, Stream::ScaleInit);
        let mut experts: Vec<Vec<ScaleSet<F>>> = vec![Vec::with_capacity(layers.len()); n_experts];
        for layer in &layers {
            for bucket in experts.iter_mut() {
                let base = layer.ptq_scales(mode);
                let set = match mode {
                    ScaleMode::Baseline => base,
                    ScaleMode::Mcsu => {
                        let s_in = (0..layer.c_in())
                            .map(|_| F::of(init.mean + init.std * rng::normal(&mut rng)))
                            .collect();
                        ScaleSet::mcsu(base.s_out.value.into_data(), s_in)
                    }
                };
                bucket.push(set);
            }
        }
        Ok(Self {
            total_steps,
            mode,
            layer_names: layers.iter().map(|l| l.name.clone()).collect(),
            experts,
        })
    }

    /// Assembles a bank from stored scale sets (used when loading packs).
    pub fn from_parts(
        total_steps: usize,
        mode: ScaleMode,
        layer_names: Vec<String>,
        experts: Vec<Vec<ScaleSet<F>>>,
    ) -> Result<Self> {
        if experts.is_empty() || total_steps == 0 {
            return Err(Error::Config("a bank needs at least one expert and one step".into()));
        }
        for (e, sets) in experts.iter().enumerate() {
            if sets.len() != layer_names.len() {
                return Err(Error::Dimension(format!(
                    "expert {e} has {} scale sets for {} layers",
                    sets.len(),
                    layer_names.len()
                )));
            }
            for (l, set) in sets.iter().enumerate() {
                let first = &experts[0][l];
                if set.mode() != mode || set.c_out() != first.c_out() || set.c_in() != first.c_in() {
                    return Err(Error::Dimension(format!(
                        "expert {e} layer {} differs in shape or mode from expert 0",
                        layer_names[l]
                    )));
                }
            }
        }
        Ok(Self {
            total_steps,
            mode,
            layer_names,
            experts,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn mode(&self) -> ScaleMode {
        self.mode
    }

    pub fn layer_names(&self) -> &[String] {
        &self.layer_names
    }

    pub fn n_layers(&self) -> usize {
        self.layer_names.len()
    }

    /// Half-open timestep interval owned by each expert.
    pub fn intervals(&self) -> Vec<Range<usize>> {
        // expert i starts at the first t with floor(t * n / T) >= i, i.e. ceil(i * T / n)
        let (n, t) = (self.n_experts(), self.total_steps);
        (0..n).map(|i| (i * t).div_ceil(n)..((i + 1) * t).div_ceil(n)).collect()
    }

    pub fn expert_for(&self, t: usize) -> Result<usize> {
        expert_index(t as i64, self.n_experts(), self.total_steps)
    }

    pub fn expert(&self, e: usize) -> &[ScaleSet<F>] {
        &self.experts[e]
    }

    pub fn expert_mut(&mut self, e: usize) -> &mut [ScaleSet<F>] {
        &mut self.experts[e]
    }

    pub fn experts_mut(&mut self) -> &mut [Vec<ScaleSet<F>>] {
        &mut self.experts
    }

    pub fn layer_id(&self, name: &str) -> Result<usize> {
        self.layer_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Lookup(format!("no scale-bearing layer named {name:?}")))
    }

    /// The scale set layer `layer_id` uses at timestep `t`.
    pub fn select_scales(&self, layer_id: usize, t: usize) -> Result<&ScaleSet<F>> {
        let e = self.expert_for(t)?;
        self.experts[e]
            .get(layer_id)
            .ok_or_else(|| Error::Lookup(format!("layer id {layer_id} is not registered")))
    }

    pub fn trainable_param_count(&self) -> usize {
        self.experts
            .iter()
            .flat_map(|sets| sets.iter().map(ScaleSet::trainable_count))
            .sum()
    }

    pub fn cast<G: Real>(&self) -> ExpertBank<G> {
        ExpertBank {
            total_steps: self.total_steps,
            mode: self.mode,
            layer_names: self.layer_names.clone(),
            experts: self.experts.iter().map(|s| s.iter().map(ScaleSet::cast).collect()).collect(),
        }
    }

    /// Bitwise equality of every scale value.
    pub fn same_values(&self, other: &Self) -> bool {
        self.n_experts() == other.n_experts()
            && self
                .experts
                .iter()
                .zip(&other.experts)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_values(y)))
    }
}
