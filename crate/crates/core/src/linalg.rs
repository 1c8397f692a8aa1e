//! Small dense linear algebra: symmetric eigendecomposition and the PSD
//! matrix square root. Sizes here are tiny (3x3 covariance matrices up to a
//! few hundred feature dimensions), so a cyclic Jacobi sweep is plenty and
//! keeps the crate free of external BLAS/LAPACK.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2};

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with eigenvalues in ascending order
/// and eigenvectors as the corresponding columns of an orthogonal matrix.
/// The input must be square and symmetric to about 1e-8 relative.
pub fn symmetric_eigen(a: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::invalid(format!(
            "symmetric_eigen needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.iter().fold(0.0_f64, |m, &v| m.max(v.abs())).max(1e-300);
    let asym = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .fold(0.0_f64, |m, (i, j)| m.max((a[[i, j]] - a[[j, i]]).abs()));
    if asym > 1e-8 * scale {
        return Err(Error::invalid(format!(
            "symmetric_eigen input asymmetric: max |a - a^T| = {asym:.3e}"
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("symmetric_eigen", "non-finite input"));
    }

    // Work on the symmetrized copy so tiny asymmetries cannot bias rotations.
    let mut m = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            m[[i, j]] = 0.5 * (a[[i, j]] + a[[j, i]]);
        }
    }
    let mut v = Array2::eye(n);
    let max_sweeps = 64;
    for _sweep in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[[i, j]] * m[[i, j]];
            }
        }
        if off.sqrt() <= 1e-15 * scale * n as f64 {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[i, i]].partial_cmp(&m[[j, j]]).expect("finite eigenvalues"));
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut eigenvectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.column_mut(dst).assign(&v.column(src));
    }
    Ok((eigenvalues, eigenvectors))
}

/// Square root of a symmetric positive semi-definite matrix. Eigenvalues that
/// come out slightly negative from floating-point noise are clamped to zero.
pub fn sqrtm_psd(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (vals, vecs) = symmetric_eigen(a)?;
    let n = vals.len();
    let scale = vals.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    for &l in vals.iter() {
        if l < -1e-6 * scale.max(1.0) {
            return Err(Error::numeric(
                "sqrtm_psd",
                format!("eigenvalue {l:.3e} is negative beyond tolerance"),
            ));
        }
    }
    let mut scaled = vecs.clone();
    for j in 0..n {
        let r = vals[j].max(0.0).sqrt();
        scaled.column_mut(j).mapv_inplace(|x| x * r);
    }
    Ok(scaled.dot(&vecs.t()))
}

/// Singular values of an `n x 3` matrix, descending, via the eigenvalues of
/// the 3x3 Gram matrix.
pub fn singular_values_nx3(a: &ArrayView2<f64>) -> Result<[f64; 3]> {
    if a.ncols() != 3 {
        return Err(Error::invalid(format!(
            "singular_values_nx3 needs 3 columns, got {}",
            a.ncols()
        )));
    }
    let gram = a.t().dot(a);
    let (vals, _) = symmetric_eigen(&gram.view())?;
    Ok([
        vals[2].max(0.0).sqrt(),
        vals[1].max(0.0).sqrt(),
        vals[0].max(0.0).sqrt(),
    ])
}
