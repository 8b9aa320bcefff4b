use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn moments(x: &Tensor<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 samples, got {n}")));
    }
    let p = x.numel() / n;
    let m = DMatrix::from_row_slice(n, p, x.data());
    let mean = m.row_mean().transpose();
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// `tr sqrt(sqrt(A) B sqrt(A))`, equal to `tr (A B)^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = psd_sqrt(a);
    let m = &ra * b * &ra;
    let eig = SymmetricEigen::new((&m + m.transpose()) * 0.5);
    eig.eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Squared Fréchet distance between Gaussians fitted to the flattened pixels
/// of two sample sets (`[n, ...]` each):
/// `||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`.
///
/// The cross term is averaged over both argument orders, so the result is
/// exactly symmetric.
pub fn frechet_pixel_distance(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::Dimension(format!(
            "sample shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (mu_a, s_a) = moments(a)?;
    let (mu_b, s_b) = moments(b)?;
    let cross = 0.5 * (trace_sqrt_product(&s_a, &s_b) + trace_sqrt_product(&s_b, &s_a));
    let d = (mu_a - mu_b).norm_squared() + s_a.trace() + s_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}
