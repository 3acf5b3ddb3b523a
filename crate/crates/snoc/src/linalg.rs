//! Small dense linear-algebra helpers.
//!
//! Matrices are row-major `&[S]` slices with explicit dimensions; the
//! problem sizes here (state dimensions below ~20) do not justify a matrix
//! library. Generic routines run on any [`Scalar`] so they can be recorded
//! for differentiation; the exact spectral norm is `f64`-only and is used
//! for validating certificates, not inside gradients.

use crate::autodiff::Scalar;

/// Inner product. Panics if the slices are empty or of different lengths.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "dot: length mismatch");
    assert!(!a.is_empty(), "dot: empty operands");
    let mut acc = a[0] * b[0];
    for i in 1..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

/// Row-major matrix-vector product `m (rows x cols) * x`.
pub fn matvec<S: Scalar>(m: &[S], rows: usize, cols: usize, x: &[S]) -> Vec<S> {
    assert_eq!(m.len(), rows * cols, "matvec: matrix size mismatch");
    assert_eq!(x.len(), cols, "matvec: vector size mismatch");
    (0..rows).map(|r| dot(&m[r * cols..(r + 1) * cols], x)).collect()
}

/// Frobenius norm of a matrix (Euclidean norm of a vector).
///
/// The sum of squares is shifted by a constant `1e-30` before the square
/// root. For any argument of non-negligible size the result is bit-equal
/// to the plain norm, but at the origin the derivative stays finite (the
/// norm itself is not differentiable there), which keeps recorded
/// gradients of norm-based expressions NaN-free. The shift can only
/// increase the result, so upper-bound arguments stay upper bounds.
pub fn frob_norm<S: Scalar>(m: &[S]) -> S {
    assert!(!m.is_empty(), "frob_norm: empty operand");
    let mut acc = m[0] * m[0];
    for &v in &m[1..] {
        acc = acc + v * v;
    }
    acc.shift(1e-30).sqrt()
}

/// Exact spectral norm (largest singular value) of a row-major matrix.
///
/// Diagonalizes the smaller of `AᵀA` / `AAᵀ` with cyclic Jacobi rotations.
/// Intended for validation: small matrices, `f64` only.
pub fn spectral_norm(m: &[f64], rows: usize, cols: usize) -> f64 {
    assert_eq!(m.len(), rows * cols, "spectral_norm: matrix size mismatch");
    assert!(rows > 0 && cols > 0, "spectral_norm: empty matrix");
    let n = rows.min(cols);
    // Gram matrix of the smaller dimension.
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            if cols <= rows {
                for k in 0..rows {
                    s += m[k * cols + i] * m[k * cols + j];
                }
            } else {
                for k in 0..cols {
                    s += m[i * cols + k] * m[j * cols + k];
                }
            }
            g[i * n + j] = s;
        }
    }
    largest_symmetric_eigenvalue(&mut g, n).max(0.0).sqrt()
}

/// Largest eigenvalue of a symmetric matrix, by cyclic Jacobi sweeps.
/// Destroys the input.
fn largest_symmetric_eigenvalue(g: &mut [f64], n: usize) -> f64 {
    let scale: f64 = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += g[p * n + q].abs();
            }
        }
        if off <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let gpq = g[p * n + q];
                if gpq.abs() <= 1e-300 {
                    continue;
                }
                let tau = (g[q * n + q] - g[p * n + p]) / (2.0 * gpq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let gkp = g[k * n + p];
                    let gkq = g[k * n + q];
                    g[k * n + p] = c * gkp - s * gkq;
                    g[k * n + q] = s * gkp + c * gkq;
                }
                for k in 0..n {
                    let gpk = g[p * n + k];
                    let gqk = g[q * n + k];
                    g[p * n + k] = c * gpk - s * gqk;
                    g[q * n + k] = s * gpk + c * gqk;
                }
            }
        }
    }
    (0..n).map(|i| g[i * n + i]).fold(f64::NEG_INFINITY, f64::max)
}
