//! Small dense linear-algebra helpers for the projection math: Gaussian
//! elimination, a Jacobi eigensolver for symmetric matrices, and the
//! (possibly pseudo-) inverse of a basis Gram matrix.

use ndarray::prelude::*;

use crate::error::{Error, Result};

/// Inverse of a square matrix by Gauss-Jordan elimination with partial
/// pivoting. Returns `None` when a pivot collapses below `tol`.
pub fn invert(a: &Array2<f64>, tol: f64) -> Option<Array2<f64>> {
    let n = a.dim().0;
    assert_eq!(a.dim().0, a.dim().1, "invert: square matrix required");
    let mut m = a.clone();
    let mut inv = Array2::<f64>::eye(n);
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if m[(row, col)].abs() > m[(pivot, col)].abs() {
                pivot = row;
            }
        }
        if m[(pivot, col)].abs() <= tol {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                m.swap((pivot, j), (col, j));
                inv.swap((pivot, j), (col, j));
            }
        }
        let p = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= p;
            inv[(col, j)] /= p;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[(row, col)];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[(row, j)] -= f * m[(col, j)];
                inv[(row, j)] -= f * inv[(col, j)];
            }
        }
    }
    Some(inv)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors)` with eigenvectors as columns.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.dim().0;
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = Array1::from_shape_fn(n, |i| m[(i, i)]);
    (eig, v)
}

/// `(B^T B + ridge I)^{-1}` for a `(d,k)` basis. With `ridge == 0` and a Gram
/// condition number above 1e8, falls back to the rank-revealing pseudo-inverse
/// (eigenvalues below `1e-10 * lambda_max` are dropped).
pub fn gram_inverse(b: &ArrayView2<f64>, ridge: f64) -> Result<Array2<f64>> {
    let k = b.dim().1;
    if ridge < 0.0 {
        return Err(Error::InvalidArgument(format!("negative ridge {ridge}")));
    }
    let mut gram = b.t().dot(b);
    for i in 0..k {
        gram[(i, i)] += ridge;
    }
    if ridge == 0.0 {
        let (eig, _) = symmetric_eigen(&gram);
        let lmax = eig.iter().cloned().fold(0.0f64, f64::max);
        let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        let cond = if lmin <= 0.0 { f64::INFINITY } else { lmax / lmin };
        if cond > 1e8 {
            return Ok(pseudo_inverse_spd(&gram));
        }
    }
    invert(&gram, 1e-300)
        .ok_or_else(|| Error::InvalidArgument("singular Gram matrix with nonzero ridge".into()))
}

/// Pseudo-inverse of a symmetric positive semi-definite matrix via its
/// eigendecomposition.
pub fn pseudo_inverse_spd(g: &Array2<f64>) -> Array2<f64> {
    let (eig, v) = symmetric_eigen(g);
    let lmax = eig.iter().cloned().fold(0.0f64, f64::max);
    let tol = 1e-10 * lmax.max(1e-300);
    let n = g.dim().0;
    let mut out = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        if eig[j] > tol {
            let col = v.column(j);
            let scale = 1.0 / eig[j];
            for r in 0..n {
                for c in 0..n {
                    out[(r, c)] += scale * col[r] * col[c];
                }
            }
        }
    }
    out
}
