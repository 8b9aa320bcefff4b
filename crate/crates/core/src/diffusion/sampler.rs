use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::numerics::rng::{self, Stream};
use crate::numerics::{Real, Tensor};
use crate::qlayers::ScaleSet;

use super::denoiser::{Denoiser, ScaleChoice};
use super::schedule::{ddim_step, NoiseSchedule};

/// Where the quantized layers take their scales from.
#[derive(Debug, Clone, Copy)]
pub enum ScaleSource<'a, F> {
    Ptq,
    Sets(&'a [ScaleSet<F>]),
    /// Timestep-routed experts.
    Bank(&'a ExpertBank<F>),
}

/// One denoiser query during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Visit {
    pub t: usize,
    pub expert: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    pub n_steps: usize,
    pub eta: f64,
    pub seed: u64,
    pub batch: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            n_steps: 50,
            eta: 0.0,
            seed: 0,
            batch: 16,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput<F> {
    /// `[batch, C, H, W]`, clamped to `[-1, 1]`.
    pub images: Tensor<F>,
    pub visits: Vec<Visit>,
    /// Steps where the DDIM variance guard fired.
    pub guard_clamps: usize,
}

fn scatter<F: Real>(dst: &mut Tensor<F>, rows: &[usize], src: &Tensor<F>) {
    let stride = dst.numel() / dst.shape()[0];
    for (k, &r) in rows.iter().enumerate() {
        dst.data_mut()[r * stride..(r + 1) * stride].copy_from_slice(src.slab(k));
    }
}

/// Noise prediction for a batch whose items may sit at different timesteps.
/// With a bank, items are grouped by expert and each group uses its expert's
/// scales.
pub fn predict_noise<F: Real>(
    model: &Denoiser<F>,
    x: &Tensor<F>,
    ts: &[usize],
    source: ScaleSource<'_, F>,
) -> Result<Tensor<F>> {
    match source {
        ScaleSource::Ptq => model.predict(x, ts, ScaleChoice::Ptq),
        ScaleSource::Sets(s) => model.predict(x, ts, ScaleChoice::Sets(s)),
        ScaleSource::Bank(bank) => {
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); bank.n_experts()];
            for (i, &t) in ts.iter().enumerate() {
                groups[bank.expert_for(t)?].push(i);
            }
            if let Some(e) = groups.iter().position(|g| g.len() == ts.len()) {
                return model.predict(x, ts, ScaleChoice::Sets(bank.expert(e)));
            }
            let mut out = Tensor::zeros(x.shape().to_vec());
            for (e, rows) in groups.iter().enumerate().filter(|(_, g)| !g.is_empty()) {
                let sub_ts: Vec<usize> = rows.iter().map(|&i| ts[i]).collect();
                let eps = model.predict(&x.select(rows), &sub_ts, ScaleChoice::Sets(bank.expert(e)))?;
                scatter(&mut out, rows, &eps);
            }
            Ok(out)
        }
    }
}

/// Evenly spaced ascending timesteps `floor(i·T/n)`, `i = 0..n`.
pub fn timestep_sequence(total: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > total {
        return Err(Error::Config(format!(
            "sampling steps must be in 1..={total}, got {n_steps}"
        )));
    }
    Ok((0..n_steps).map(|i| i * total / n_steps).collect())
}

/// DDIM sampling from pure noise. Never mutates `model` or the scales.
pub fn sample<F: Real>(
    model: &Denoiser<F>,
    source: ScaleSource<'_, F>,
    sched: &NoiseSchedule,
    cfg: &SampleConfig,
) -> Result<SampleOutput<F>> {
    if !(0.0..=1.0).contains(&cfg.eta) {
        return Err(Error::Config(format!("eta must be in [0, 1], got {}", cfg.eta)));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("sample batch must be positive".into()));
    }
    let seq = timestep_sequence(sched.steps(), cfg.n_steps)?;
    let mc = model.config();
    let shape = vec![cfg.batch, mc.channels, mc.image_size, mc.image_size];
    let mut x = rng::normal_tensor::<F>(&mut rng::substream(cfg.seed, Stream::Sampling, 0), shape.clone());
    let mut visits = Vec::with_capacity(seq.len());
    let mut guard_clamps = 0;
    for k in (0..seq.len()).rev() {
        let t = seq[k];
        let t_prev = k.checked_sub(1).map(|j| seq[j]);
        let expert = match source {
            ScaleSource::Bank(b) => Some(b.expert_for(t)?),
            _ => None,
        };
        visits.push(Visit { t, expert });
        let eps = predict_noise(model, &x, &vec![t; cfg.batch], source)?;
        let noise = (cfg.eta > 0.0 && t_prev.is_some()).then(|| {
            rng::normal_tensor::<F>(
                &mut rng::substream(cfg.seed, Stream::Sampling, 1 + k as u64),
                shape.clone(),
            )
        });
        let step = ddim_step(&x, &eps, t, t_prev, cfg.eta, sched, noise.as_ref())?;
        guard_clamps += step.guard_clamped as usize;
        x = step.x_prev;
    }
    let lo = F::of(-1.0);
    let images = x.map(|v| v.max(lo).min(F::one()));
    Ok(SampleOutput {
        images,
        visits,
        guard_clamps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_spacing() {
        assert_eq!(timestep_sequence(10, 5).unwrap(), vec![0, 2, 4, 6, 8]);
        assert_eq!(timestep_sequence(4, 4).unwrap(), vec![0, 1, 2, 3]);
        assert!(timestep_sequence(4, 5).is_err());
        assert!(timestep_sequence(4, 0).is_err());
    }
}
