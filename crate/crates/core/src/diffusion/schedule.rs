use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Linear betas scaled for a 100-step chain so that alpha_bar at the
        // last step is close to zero and sampling can start from pure noise.
        Self {
            steps: 100,
            beta_start: 1e-3,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end` inclusive; `alpha_bar` is the
/// cumulative product of `1 - beta`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|t| beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule {
        config: ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        },
        betas,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Domain(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn add_noise<F: Real>(x0: &Tensor<F>, t: usize, eps: &Tensor<F>, schedule: &NoiseSchedule) -> Result<Tensor<F>> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar[t];
    let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// Per-sample version of [`add_noise`] for a batch with one timestep per item.
pub(crate) fn add_noise_batch<F: Real>(
    x0: &Tensor<F>,
    ts: &[usize],
    eps: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<F>> {
    eps.expect_shape(x0.shape(), "add_noise")?;
    let per = x0.numel() / ts.len().max(1);
    let mut out = Vec::with_capacity(x0.numel());
    for (i, &t) in ts.iter().enumerate() {
        schedule.check_t(t)?;
        let ab = schedule.alpha_bar[t];
        let (a, b) = (F::of(ab.sqrt()), F::of((1.0 - ab).sqrt()));
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(xs.iter().zip(es).map(|(&x, &e)| a * x + b * e));
    }
    Tensor::new(x0.shape().to_vec(), out)
}

#[derive(Debug, Clone)]
pub struct DdimStep<F> {
    pub x_prev: Tensor<F>,
    pub x0_pred: Tensor<F>,
    /// Set when `1 - abar_prev - sigma^2` went negative and was clamped to zero.
    pub guard_clamped: bool,
}

/// One DDIM update from `t` to `t_prev` (`None` = the final step to the clean
/// image). `noise` is required only when `eta > 0`.
pub fn ddim_step<F: Real>(
    x_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    t_prev: Option<usize>,
    eta: f64,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor<F>>,
) -> Result<DdimStep<F>> {
    schedule.check_t(t)?;
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::Domain(format!("t_prev {tp} must be below t {t}")));
        }
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("eta must lie in [0, 1], got {eta}")));
    }
    let ab_t = schedule.alpha_bar[t];
    let ab_prev = t_prev.map_or(1.0, |tp| schedule.alpha_bar[tp]);
    let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_prev).sqrt();
    let mut dir2 = 1.0 - ab_prev - sigma * sigma;
    let guard_clamped = dir2 < 0.0;
    if guard_clamped {
        log::warn!("ddim step {t}->{t_prev:?}: negative direction variance {dir2:e} clamped to zero");
        dir2 = 0.0;
    }
    let (sa, sb) = (F::of(ab_t.sqrt()), F::of((1.0 - ab_t).sqrt()));
    let x0_pred = x_t.zip_map(eps_hat, |x, e| (x - sb * e) / sa)?;
    let (pa, pd) = (F::of(ab_prev.sqrt()), F::of(dir2.sqrt()));
    let mut x_prev = x0_pred.zip_map(eps_hat, |x0, e| pa * x0 + pd * e)?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| Error::Contract("eta > 0 requires a noise tensor".into()))?;
        let s = F::of(sigma);
        x_prev = x_prev.zip_map(noise, |x, n| x + s * n)?;
    }
    Ok(DdimStep {
        x_prev,
        x0_pred,
        guard_clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_constant_beta() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar()[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar()[1] - 0.81).abs() < 1e-15);
    }

    #[test]
    fn alpha_bar_matches_independent_product() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        let oracle: f64 = (0..100).map(|t| 1.0 - (1e-4 + (0.02 - 1e-4) * t as f64 / 99.0)).product();
        assert!((s.alpha_bar()[99] - oracle).abs() < 1e-12);
        assert!(s.alpha_bar().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar()[0] < 1.0);
    }

    #[test]
    fn bad_bounds_rejected() {
        assert!(make_schedule(1, 0.1, 0.1).is_err());
        assert!(make_schedule(10, 0.0, 0.1).is_err());
        assert!(make_schedule(10, 0.2, 0.1).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn add_noise_limits() {
        let s = make_schedule(10, 1e-9, 1e-9).unwrap();
        let x0 = Tensor::<f64>::from_f64(vec![3], &[0.5, -0.2, 0.9]).unwrap();
        let eps = Tensor::<f64>::from_f64(vec![3], &[1.0, -1.0, 0.3]).unwrap();
        let xt = add_noise(&x0, 0, &eps, &s).unwrap();
        assert!(xt.max_abs_diff(&x0) < 1e-4);

        let s = make_schedule(10, 0.01, 0.2).unwrap();
        let zero = Tensor::<f64>::zeros(vec![3]);
        let xt = add_noise(&zero, 5, &eps, &s).unwrap();
        let c = (1.0 - s.alpha_bar()[5]).sqrt();
        for (a, e) in xt.data().iter().zip(eps.data()) {
            assert_eq!(*a, c * e);
        }
    }

    #[test]
    fn perfect_noise_estimate_inverts() {
        let s = make_schedule(100, 1e-3, 0.2).unwrap();
        let x0 = Tensor::<f64>::from_f64(vec![4], &[0.1, -0.7, 0.95, -1.0]).unwrap();
        let eps = Tensor::<f64>::from_f64(vec![4], &[0.3, 1.2, -0.4, 2.0]).unwrap();
        let xt = add_noise(&x0, 60, &eps, &s).unwrap();
        let step = ddim_step(&xt, &eps, 60, None, 0.0, &s, None).unwrap();
        assert!(step.x0_pred.max_abs_diff(&x0) < 1e-12);
        assert!(step.x_prev.max_abs_diff(&x0) < 1e-12);
        let again = ddim_step(&xt, &eps, 60, Some(30), 0.0, &s, None).unwrap();
        let twice = ddim_step(&xt, &eps, 60, Some(30), 0.0, &s, None).unwrap();
        assert_eq!(again.x_prev, twice.x_prev);
    }

    #[test]
    fn single_step_hand_case() {
        let s = make_schedule(2, 0.1, 0.1).unwrap();
        let xt = Tensor::<f64>::from_f64(vec![1], &[0.5]).unwrap();
        let eh = Tensor::<f64>::from_f64(vec![1], &[0.2]).unwrap();
        let n = Tensor::<f64>::from_f64(vec![1], &[-1.0]).unwrap();
        let step = ddim_step(&xt, &eh, 1, Some(0), 0.5, &s, Some(&n)).unwrap();
        // abar_t = 0.81, abar_prev = 0.9
        let x0 = (0.5 - 0.19f64.sqrt() * 0.2) / 0.9;
        let sigma = 0.5 * (0.1f64 / 0.19).sqrt() * (1.0f64 - 0.81 / 0.9).sqrt();
        let expect = 0.9f64.sqrt() * x0 + (0.1 - sigma * sigma).sqrt() * 0.2 - sigma;
        assert!((step.x_prev.data()[0] - expect).abs() < 1e-14);
    }

    #[test]
    fn ddim_argument_checks() {
        let s = make_schedule(10, 0.01, 0.1).unwrap();
        let x = Tensor::<f64>::zeros(vec![2]);
        assert!(ddim_step(&x, &x, 3, Some(3), 0.0, &s, None).is_err());
        assert!(ddim_step(&x, &x, 3, Some(1), 1.5, &s, None).is_err());
        assert!(ddim_step(&x, &x, 3, Some(1), 1.0, &s, None).is_err(), "missing noise");
    }
}
