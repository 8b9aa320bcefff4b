//! Procedural grayscale image families.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{self, Stream};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Bright gaussian spots on a dark background.
    Blobs,
    /// A single bright annulus.
    Rings,
    /// Checkerboard with random period and phase.
    Checker,
    /// Parallel stripes, horizontal or vertical.
    Bars,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Blobs, Family::Rings, Family::Checker, Family::Bars];

    fn id(self) -> u64 {
        match self {
            Family::Blobs => 0,
            Family::Rings => 1,
            Family::Checker => 2,
            Family::Bars => 3,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Blobs => "blobs",
            Family::Rings => "rings",
            Family::Checker => "checker",
            Family::Bars => "bars",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown family {s:?}; expected blobs, rings, checker or bars")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetSpec {
    pub family: Family,
    pub n_samples: usize,
    /// Standard deviation of additive pixel noise before clamping.
    pub noise: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            family: Family::Blobs,
            n_samples: 512,
            noise: 0.05,
            seed: 0,
            image_size: 16,
        }
    }
}

impl ToyDatasetSpec {
    pub fn new(family: Family, n_samples: usize, seed: u64) -> Self {
        Self {
            family,
            n_samples,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.image_size < 4 {
            return Err(Error::Config(format!(
                "dataset needs samples and an image size of at least 4, got {} and {}",
                self.n_samples, self.image_size
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise level must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

fn render(family: Family, n: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let c = |v: f64| v.clamp(-1.0, 1.0);
    let nf = n as f64;
    let mut img = vec![0.0; n * n];
    match family {
        Family::Blobs => {
            let k = rng.random_range(1..=3);
            let blobs: Vec<(f64, f64, f64)> = (0..k)
                .map(|_| {
                    (
                        rng.random_range(2.0..nf - 2.0),
                        rng.random_range(2.0..nf - 2.0),
                        rng.random_range(1.0..2.0),
                    )
                })
                .collect();
            for y in 0..n {
                for x in 0..n {
                    let peak = blobs
                        .iter()
                        .map(|&(cy, cx, s)| {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            (-d2 / (2.0 * s * s)).exp()
                        })
                        .fold(0.0, f64::max);
                    img[y * n + x] = -0.9 + 1.9 * peak;
                }
            }
        }
        Family::Rings => {
            let cy = rng.random_range(nf * 0.35..nf * 0.65);
            let cx = rng.random_range(nf * 0.35..nf * 0.65);
            let r = rng.random_range(nf * 0.18..nf * 0.32);
            for y in 0..n {
                for x in 0..n {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    let v = (-(d - r).powi(2) / (2.0 * 0.8 * 0.8)).exp();
                    img[y * n + x] = -0.8 + 1.7 * v;
                }
            }
        }
        Family::Checker => {
            let period = rng.random_range(2..=4usize);
            let (py, px) = (rng.random_range(0..2 * period), rng.random_range(0..2 * period));
            for y in 0..n {
                for x in 0..n {
                    let on = ((y + py) / period + (x + px) / period) % 2 == 0;
                    img[y * n + x] = if on { 0.8 } else { -0.8 };
                }
            }
        }
        Family::Bars => {
            let vertical = rng.random_bool(0.5);
            let period = rng.random_range(3..=5usize);
            let phase = rng.random_range(0..period);
            let level = rng.random_range(0.5..0.9);
            for y in 0..n {
                for x in 0..n {
                    let u = if vertical { x } else { y };
                    img[y * n + x] = if (u + phase) % period == 0 { level } else { -level };
                }
            }
        }
    }
    img.iter_mut().for_each(|v| *v = c(*v));
    img
}

/// Renders `spec.n_samples` single-channel images, shape `[n, 1, H, W]`,
/// values in `[-1, 1]`.
pub fn gen_dataset(spec: &ToyDatasetSpec) -> Result<Tensor<f32>> {
    spec.validate()?;
    let n = spec.image_size;
    let mut rng = rng::substream(spec.seed, Stream::Data, spec.family.id());
    let mut data = Vec::with_capacity(spec.n_samples * n * n);
    for _ in 0..spec.n_samples {
        let img = render(spec.family, n, &mut rng);
        data.extend(img.into_iter().map(|v| {
            let noisy = v + spec.noise * rng::normal(&mut rng);
            noisy.clamp(-1.0, 1.0) as f32
        }));
    }
    Tensor::new(vec![spec.n_samples, 1, n, n], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        for family in Family::ALL {
            let spec = ToyDatasetSpec::new(family, 8, 5);
            let a = gen_dataset(&spec).unwrap();
            assert_eq!(a, gen_dataset(&spec).unwrap());
            assert_eq!(a.shape(), &[8, 1, 16, 16]);
            assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn blobs_bright_on_dark() {
        let d = gen_dataset(&ToyDatasetSpec::new(Family::Blobs, 64, 1)).unwrap();
        for i in 0..64 {
            let mut img = d.slab(i).to_vec();
            img.sort_by(f32::total_cmp);
            assert!(img[img.len() - 1] > 0.5);
            assert!(img[img.len() / 2] < -0.5);
        }
    }

    #[test]
    fn family_names_round_trip() {
        for f in Family::ALL {
            assert_eq!(f.to_string().parse::<Family>().unwrap(), f);
        }
        assert!("dots".parse::<Family>().is_err());
    }

    #[test]
    fn rejects_bad_spec() {
        let mut spec = ToyDatasetSpec::new(Family::Bars, 0, 0);
        assert!(gen_dataset(&spec).is_err());
        spec.n_samples = 2;
        spec.noise = -1.0;
        assert!(gen_dataset(&spec).is_err());
    }
}
