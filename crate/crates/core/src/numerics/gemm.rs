use super::Real;

pub(crate) fn check_extent(rows: usize, cols: usize, len: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand too short: need {} have {len}", last + 1);
}

/// `c[m,n] (+)= a[m,k] * b[k,n]`, all row-major.
pub(crate) fn mm<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c[m,n] (+)= a[m,k] * b[n,k]^T`.
pub(crate) fn mm_nt<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
    acc: bool,
) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1);
}

/// `c[m,n] (+)= a[k,m]^T * b[k,n]`.
pub(crate) fn mm_tn<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
    acc: bool,
) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}
