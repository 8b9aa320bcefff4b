use serde::{Deserialize, Serialize};

use super::{Param, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    cfg: AdamConfig,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    steps: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(cfg: AdamConfig, params: &[&Param<F>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients and zeroes them.
    /// Frozen parameters are skipped.
    pub fn step(&mut self, params: &mut [&mut Param<F>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        self.steps += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one, lr, eps) = (F::one(), F::of(c.lr), F::of(c.eps));
        let (bc1, bc2) = (F::of(bc1), F::of(bc2));
        for (k, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let g = p.grad.data();
            let w = p.value.data_mut();
            for j in 0..w.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                w[j] -= lr * mh / (vh.sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Param::trainable(Tensor::<f64>::from_f64(vec![2], &[1.0, 1.0]).unwrap());
        p.grad = Tensor::from_f64(vec![2], &[3.0, -0.5]).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &[&p]);
        opt.step(&mut [&mut p]);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.value.data()[1] - 1.1).abs() < 1e-6);
        assert_eq!(p.grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_lr_is_a_null_update() {
        let mut p = Param::trainable(Tensor::<f32>::from_f64(vec![1], &[0.25]).unwrap());
        p.grad = Tensor::from_f64(vec![1], &[7.0]).unwrap();
        let mut opt = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &[&p]);
        opt.step(&mut [&mut p]);
        assert_eq!(p.value.data()[0].to_bits(), 0.25f32.to_bits());
    }
}
