//! CSV and binary PGM (P5) artifacts.

use std::path::Path;

use serde::Serialize;

use super::write_atomic;
use crate::analysis::ChangeRatioMap;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Contract(format!("csv buffer: {e}")))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_atomic(path, &csv_bytes(rows)?)
}

fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Tiles `[n, 1, H, W]` images in `[-1, 1]` into a grid with `cols` columns
/// and a one-pixel gap.
pub fn pgm_grid<F: Real>(images: &Tensor<F>, cols: usize) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || s[0] == 0 || cols == 0 {
        return Err(Error::Dimension(format!("expected [n, 1, H, W] images, got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) - 1, rows * (h + 1) - 1);
    let mut px = vec![0u8; gw * gh];
    for k in 0..n {
        let (oy, ox) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for (j, &v) in images.slab(k).iter().enumerate() {
            let g = ((v.f64().clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
            px[(oy + j / w) * gw + ox + j % w] = g;
        }
    }
    Ok(pgm(gw, gh, &px))
}

pub fn write_pgm_grid<F: Real>(path: &Path, images: &Tensor<F>, cols: usize) -> Result<()> {
    write_atomic(path, &pgm_grid(images, cols)?)
}

/// Ratio map scaled to the largest unmasked value; masked cells are black.
pub fn ratio_pgm(map: &ChangeRatioMap) -> Vec<u8> {
    let max = map
        .ratio
        .iter()
        .zip(&map.mask)
        .filter(|(_, &m)| !m)
        .map(|(&r, _)| r)
        .fold(0.0, f64::max);
    let px: Vec<u8> = map
        .ratio
        .iter()
        .zip(&map.mask)
        .map(|(&r, &m)| if m || max == 0.0 { 0 } else { (r / max * 255.0).round() as u8 })
        .collect();
    pgm(map.cols, map.rows, &px)
}

/// Ratio map as a `rows x cols` matrix; masked cells are empty.
pub fn ratio_csv(map: &ChangeRatioMap) -> Vec<u8> {
    let mut out = String::new();
    for o in 0..map.rows {
        let row: Vec<String> = (0..map.cols)
            .map(|j| map.get(o, j).map(|r| format!("{r:e}")).unwrap_or_default())
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out.into_bytes()
}
