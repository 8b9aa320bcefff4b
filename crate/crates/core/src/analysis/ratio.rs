use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::experts::ExpertBank;
use crate::numerics::{Real, Tensor};
use crate::qlayers::{QuantLayer, ScaleMode, ScaleSet};

/// Denominator guard in the change ratio.
pub const RATIO_EPS: f64 = 1e-12;

/// `R[o, j] = |W_tuned - W_init| / (|W_init| + eps)` over the weight viewed as
/// `(C_out, C_in·k·k)`. Positions where the initial weight is exactly zero
/// (codes equal to the zero-point) are masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRatioMap {
    pub rows: usize,
    pub cols: usize,
    /// Kernel taps per input channel (1 for linear layers).
    pub taps: usize,
    pub ratio: Vec<f64>,
    pub mask: Vec<bool>,
}

impl ChangeRatioMap {
    pub fn get(&self, o: usize, j: usize) -> Option<f64> {
        let k = o * self.cols + j;
        (!self.mask[k]).then_some(self.ratio[k])
    }

    pub fn row(&self, o: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.cols).filter_map(move |j| self.get(o, j))
    }

    pub fn in_channels(&self) -> usize {
        self.cols / self.taps
    }
}

fn taps_of(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

pub fn change_ratio_map(w_init: &Tensor<f64>, w_tuned: &Tensor<f64>) -> Result<ChangeRatioMap> {
    if w_init.shape() != w_tuned.shape() {
        return Err(Error::Dimension(format!(
            "weight shapes differ: {:?} vs {:?}",
            w_init.shape(),
            w_tuned.shape()
        )));
    }
    let shape = w_init.shape();
    if shape.len() < 2 {
        return Err(Error::Dimension(format!("expected a weight of rank >= 2, got {shape:?}")));
    }
    let rows = shape[0];
    let cols = w_init.numel() / rows;
    let (ratio, mask) = w_init
        .data()
        .iter()
        .zip(w_tuned.data())
        .map(|(&a, &b)| ((b - a).abs() / (a.abs() + RATIO_EPS), a == 0.0))
        .unzip();
    Ok(ChangeRatioMap {
        rows,
        cols,
        taps: taps_of(shape),
        ratio,
        mask,
    })
}

/// Change ratio of a quantized layer between two scale sets, evaluated in f64.
pub fn layer_change_ratio<F: Real>(
    layer: &QuantLayer<F>,
    init: &ScaleSet<F>,
    tuned: &ScaleSet<F>,
) -> Result<ChangeRatioMap> {
    let l = layer.cast::<f64>();
    let (wi, wt) = (l.effective_weight(&init.cast())?, l.effective_weight(&tuned.cast())?);
    let mut map = change_ratio_map(&wi, &wt)?;
    // Mask by codes == z rather than by value so a zero scale is not hidden.
    for (m, &c) in map.mask.iter_mut().zip(l.centered().data()) {
        *m = c == 0.0;
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    In,
    Out,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary with linearly interpolated quartiles. `None` if empty.
pub fn quartiles(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let h = (v.len() - 1) as f64 * p;
        let lo = h.floor() as usize;
        let hi = (lo + 1).min(v.len() - 1);
        v[lo] + (h - lo as f64) * (v[hi] - v[lo])
    };
    Some(BoxStats {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}

/// Per-channel statistics of the unmasked ratios. Input channels pool their
/// kernel taps. Fully masked channels are `None`.
pub fn channel_stats(map: &ChangeRatioMap, axis: Axis) -> Vec<Option<BoxStats>> {
    match axis {
        Axis::Out => (0..map.rows).map(|o| quartiles(&map.row(o).collect::<Vec<_>>())).collect(),
        Axis::In => (0..map.in_channels())
            .map(|i| {
                let vals: Vec<f64> = (0..map.rows)
                    .flat_map(|o| (i * map.taps..(i + 1) * map.taps).filter_map(move |j| map.get(o, j)))
                    .collect();
                quartiles(&vals)
            })
            .collect(),
    }
}

/// Largest within-row spread (max - min) of the unmasked ratios.
pub fn row_constancy(map: &ChangeRatioMap) -> f64 {
    (0..map.rows)
        .filter_map(|o| {
            let s = quartiles(&map.row(o).collect::<Vec<_>>())?;
            Some(s.max - s.min)
        })
        .fold(0.0, f64::max)
}

/// Fits `log|W_tuned / W_init| = a[o] + b[i]` by least squares over unmasked
/// entries (kernel taps share `b[i]`) and returns the largest absolute
/// residual. `mask` defaults to the positions where `W_init` is zero.
pub fn rank1_check(w_init: &Tensor<f64>, w_tuned: &Tensor<f64>, mask: Option<&[bool]>) -> Result<f64> {
    let map = change_ratio_map(w_init, w_tuned)?;
    let mask = mask.unwrap_or(&map.mask);
    if mask.len() != map.ratio.len() {
        return Err(Error::Dimension(format!(
            "mask has {} entries for {} weights",
            mask.len(),
            map.ratio.len()
        )));
    }
    let (rows, cols, taps) = (map.rows, map.cols, map.taps);
    let chans = cols / taps;
    let mut obs: Vec<(usize, usize, f64)> = Vec::new();
    for o in 0..rows {
        for j in 0..cols {
            let k = o * cols + j;
            if mask[k] {
                continue;
            }
            let r = (w_tuned.data()[k] / w_init.data()[k]).abs().ln();
            if !r.is_finite() {
                return Ok(f64::INFINITY);
            }
            obs.push((o, j / taps, r));
        }
    }
    if obs.is_empty() {
        return Ok(0.0);
    }
    // Normal equations of the additive model. The shift a += c, b -= c is a
    // null direction u; adding u·u^T pins the solution to u·x = 0.
    let p = rows + chans;
    let mut n = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut degree = vec![0usize; p];
    for &(o, i, r) in &obs {
        let j = rows + i;
        degree[o] += 1;
        degree[j] += 1;
        n[(o, o)] += 1.0;
        n[(j, j)] += 1.0;
        n[(o, j)] += 1.0;
        n[(j, o)] += 1.0;
        rhs[o] += r;
        rhs[j] += r;
    }
    let u = DVector::from_fn(p, |k, _| if k < rows { 1.0 } else { -1.0 });
    n += &u * u.transpose();
    // Fully masked channels carry no information; pin them to zero.
    for k in (0..p).filter(|&k| degree[k] == 0) {
        n.row_mut(k).fill(0.0);
        n.column_mut(k).fill(0.0);
        n[(k, k)] = 1.0;
    }
    let x = match n.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => n
            .svd(true, true)
            .solve(&rhs, 1e-12)
            .map_err(|e| Error::Numeric(format!("rank-1 fit failed: {e}")))?,
    };
    let (a, b) = (&x.as_slice()[..rows], &x.as_slice()[rows..]);
    Ok(obs.iter().map(|&(o, i, r)| (r - a[o] - b[i]).abs()).fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAudit {
    pub layer: String,
    pub expert: usize,
    pub mode: ScaleMode,
    /// Baseline: largest deviation of any ratio from `|s'_out/s_out - 1|`.
    pub row_deviation: Option<f64>,
    /// Mcsu: rank-1 residual of the log change ratio.
    pub rank1_residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub tolerance: f64,
    pub layers: Vec<LayerAudit>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| {
            l.row_deviation.is_none_or(|d| d <= self.tolerance)
                && l.rank1_residual.is_none_or(|r| r <= self.tolerance)
        })
    }
}

/// Checks the structure every tuned layer must have: baseline rows change
/// uniformly, mcsu changes factor as `a[o]·b[i]`.
pub fn audit<F: Real>(
    model: &Denoiser<F>,
    init: &ExpertBank<F>,
    tuned: &ExpertBank<F>,
    tolerance: f64,
) -> Result<AuditReport> {
    if init.n_experts() != tuned.n_experts() || init.mode() != tuned.mode() {
        return Err(Error::Incompatible("initial and tuned banks differ in layout".into()));
    }
    let layers = model.quant_layers();
    if layers.len() != tuned.n_layers() {
        return Err(Error::Incompatible("bank does not match the model".into()));
    }
    let mut out = Vec::new();
    for e in 0..tuned.n_experts() {
        for (l, layer) in layers.iter().enumerate() {
            let (si, st) = (&init.expert(e)[l], &tuned.expert(e)[l]);
            let mut entry = LayerAudit {
                layer: layer.name.clone(),
                expert: e,
                mode: tuned.mode(),
                row_deviation: None,
                rank1_residual: None,
            };
            match tuned.mode() {
                ScaleMode::Baseline => {
                    let map = layer_change_ratio(layer, si, st)?;
                    let mut dev: f64 = 0.0;
                    for o in 0..map.rows {
                        let (a, b) = (si.s_out.value.data()[o].f64(), st.s_out.value.data()[o].f64());
                        let expect = (b / a - 1.0).abs();
                        for r in map.row(o) {
                            dev = dev.max((r - expect).abs() / expect.max(1.0));
                        }
                    }
                    entry.row_deviation = Some(dev);
                }
                ScaleMode::Mcsu => {
                    let l64 = layer.cast::<f64>();
                    let wi = l64.effective_weight(&si.cast())?;
                    let wt = l64.effective_weight(&st.cast())?;
                    let mask: Vec<bool> = l64.centered().data().iter().map(|&c| c == 0.0).collect();
                    entry.rank1_residual = Some(rank1_check(&wi, &wt, Some(&mask))?);
                }
            }
            out.push(entry);
        }
    }
    Ok(AuditReport {
        tolerance,
        layers: out,
    })
}
