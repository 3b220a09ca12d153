//! Small dense kernels used inside the grid searches, plus a few helpers on
//! top of nalgebra for the non-hot paths.
//!
//! Hot-path matrices are row-major `&[f64]` slices of tiny dimension (the
//! number of equations or the number of breaks), so allocation-free routines
//! beat `DMatrix` there by a wide margin.

use nalgebra::{DMatrix, SymmetricEigen};

/// In-place lower Cholesky factor of a row-major `n x n` SPD matrix.
/// Returns the smallest squared pivot, or `None` when a pivot is not positive.
pub(crate) fn cholesky_in_place(a: &mut [f64], n: usize) -> Option<f64> {
    let mut min_pivot = f64::INFINITY;
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return None;
        }
        min_pivot = min_pivot.min(d);
        let ljj = d.sqrt();
        a[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / ljj;
        }
        for i in 0..j {
            a[i * n + j] = 0.0;
        }
    }
    Some(min_pivot)
}

/// Solves `L L' x = b` given the factor from [`cholesky_in_place`].
pub(crate) fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves the SPD system `a x = b` after symmetric Jacobi equilibration.
/// `a` is consumed as scratch space. Returns `false` if the matrix is not
/// numerically positive definite.
pub(crate) fn solve_spd_scaled(
    a: &mut [f64],
    n: usize,
    b: &mut [f64],
    scratch: &mut [f64],
) -> bool {
    let scale = &mut scratch[..n];
    for i in 0..n {
        let d = a[i * n + i];
        if !(d > 0.0) {
            return false;
        }
        scale[i] = 1.0 / d.sqrt();
    }
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] *= scale[i] * scale[j];
        }
        b[i] *= scale[i];
    }
    match cholesky_in_place(a, n) {
        Some(p) if p > 1e-14 => {}
        _ => return false,
    }
    cholesky_solve(a, n, b);
    for i in 0..n {
        b[i] *= scale[i];
    }
    true
}

/// Log-determinant and inverse of a covariance matrix whose eigenvalues are
/// floored after rescaling each coordinate by `scale`.
#[derive(Debug, Clone)]
pub(crate) struct CovFactor {
    pub logdet: f64,
    /// Row-major inverse of the (possibly floored) covariance.
    pub inv: Vec<f64>,
    pub floored: bool,
}

/// Relative eigenvalue floor for residual covariances, applied on the scale
/// of each series' detrended variance. Far below any real noise level; only
/// exact fits reach it.
pub(crate) const COV_FLOOR: f64 = 1e-12;

pub(crate) fn factor_cov(sigma: &[f64], n: usize, scale: &[f64], floor: f64) -> CovFactor {
    let mut work = vec![0.0; n * n + n];
    let mut inv = vec![0.0; n * n];
    let (logdet, floored) = factor_cov_into(sigma, n, scale, floor, &mut work, &mut inv);
    CovFactor {
        logdet,
        inv,
        floored,
    }
}

/// [`factor_cov`] writing the inverse into `inv`, with `work` of length at
/// least `n * n + n` as scratch. Returns `(logdet, floored)`.
pub(crate) fn factor_cov_into(
    sigma: &[f64],
    n: usize,
    scale: &[f64],
    floor: f64,
    work: &mut [f64],
    inv: &mut [f64],
) -> (f64, bool) {
    let mut log_scale = 0.0;
    for &d in &scale[..n] {
        log_scale += 2.0 * d.ln();
    }
    let (l, col) = work.split_at_mut(n * n);
    for i in 0..n {
        for j in 0..n {
            l[i * n + j] = sigma[i * n + j] / (scale[i] * scale[j]);
        }
    }
    if n == 1 {
        let v = l[0];
        let (v, floored) = if v < floor { (floor, true) } else { (v, false) };
        inv[0] = 1.0 / (v * scale[0] * scale[0]);
        return (log_scale + v.ln(), floored);
    }

    if let Some(p) = cholesky_in_place(l, n) {
        if p >= 1e2 * floor {
            let mut logdet = log_scale;
            for i in 0..n {
                logdet += 2.0 * l[i * n + i].ln();
            }
            for j in 0..n {
                col[..n].iter_mut().for_each(|c| *c = 0.0);
                col[j] = 1.0;
                cholesky_solve(l, n, &mut col[..n]);
                for i in 0..n {
                    inv[i * n + j] = col[i] / (scale[i] * scale[j]);
                }
            }
            return (logdet, false);
        }
    }

    // Near-singular: eigen-decompose and floor.
    let m = DMatrix::from_fn(n, n, |i, j| {
        0.5 * (sigma[i * n + j] + sigma[j * n + i]) / (scale[i] * scale[j])
    });
    let eig = SymmetricEigen::new(m);
    let mut logdet = log_scale;
    let mut floored = false;
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < floor {
            *v = floor;
            floored = true;
        }
        logdet += v.ln();
    }
    let q = &eig.eigenvectors;
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += q[(i, k)] * q[(j, k)] / vals[k];
            }
            inv[i * n + j] = acc / (scale[i] * scale[j]);
        }
    }
    (logdet, floored)
}

/// Symmetric part `(a + a') / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix via Cholesky, falling back
/// to LU for matrices that are invertible but not numerically SPD.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Some(ch.inverse());
    }
    a.clone().try_inverse()
}

/// Raises eigenvalues below `rel * trace` to that floor. Returns the adjusted
/// matrix and whether any eigenvalue was changed.
pub fn floor_eigenvalues(a: &DMatrix<f64>, rel: f64) -> (DMatrix<f64>, bool) {
    let sym = symmetrize(a);
    let trace = sym.trace();
    let floor = rel * trace.abs().max(f64::MIN_POSITIVE);
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return (sym, false);
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let q = &eig.eigenvectors;
    let out = q * DMatrix::from_diagonal(&vals) * q.transpose();
    (symmetrize(&out), true)
}

/// Spectral radius of a square real matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    if a.nrows() == 1 {
        return a[(0, 0)].abs();
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Numerical rank from the singular values, relative tolerance `rel`.
pub fn rank(a: &DMatrix<f64>, rel: f64) -> usize {
    if a.nrows() == 0 || a.ncols() == 0 {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter()
        .filter(|&&s| s > rel * max.max(f64::MIN_POSITIVE))
        .count()
}
