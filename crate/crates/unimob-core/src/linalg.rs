//! Small dense linear algebra over row-major `&[f64]` buffers.
//!
//! Everything here is deterministic straight-line code; sizes in this crate
//! stay in the hundreds, so simple cache-friendly loops are enough.

#[allow(unused_imports)]
use num_traits::Float;

use alloc::vec;
use alloc::vec::Vec;

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `c += a * b`, with `a` m-by-k, `b` k-by-n, `c` m-by-n.
pub fn gemm_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(aip, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c += a * b^T`, with `a` m-by-k, `b` n-by-k, `c` m-by-n.
pub fn gemm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += a^T * b`, with `a` k-by-m, `b` k-by-n, `c` m-by-n.
pub fn gemm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            axpy(api, brow, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// `out = w * x + b` where `w` is out_dim-by-in_dim row-major.
pub fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let in_dim = x.len();
    let out_dim = out.len();
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(b.len(), out_dim);
    for (j, o) in out.iter_mut().enumerate() {
        *o = b[j] + dot(&w[j * in_dim..(j + 1) * in_dim], x);
    }
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Cosine similarity; 0 when either vector is numerically zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2(a);
    let nb = norm2(b);
    if na < 1e-300 || nb < 1e-300 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Cholesky factorization of a symmetric positive-definite matrix, in place
/// (lower triangle). Returns false if a pivot drops below `tol`.
pub fn cholesky_in_place(a: &mut [f64], n: usize, tol: f64) -> bool {
    debug_assert_eq!(a.len(), n * n);
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= tol {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solve `L L^T x = rhs` given the Cholesky factor from [`cholesky_in_place`].
pub fn cholesky_solve(l: &[f64], n: usize, rhs: &mut [f64]) {
    debug_assert_eq!(l.len(), n * n);
    debug_assert_eq!(rhs.len(), n);
    // forward
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i * n + k] * rhs[k];
        }
        rhs[i] = s / l[i * n + i];
    }
    // backward
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * rhs[k];
        }
        rhs[i] = s / l[i * n + i];
    }
}

/// Solve the ridge-regularized normal equations `(X^T X + lambda I) w = X^T y`
/// for each column of `y`. `x` is rows-by-cols, `y` is rows-by-targets;
/// returns `w` as cols-by-targets. Returns None when the system is singular
/// even after damping.
pub fn ridge_solve(
    x: &[f64],
    y: &[f64],
    rows: usize,
    cols: usize,
    targets: usize,
    lambda: f64,
) -> Option<Vec<f64>> {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(y.len(), rows * targets);
    let mut gram = vec![0.0; cols * cols];
    gemm_tn_acc(&mut gram, x, x, cols, rows, cols);
    for i in 0..cols {
        gram[i * cols + i] += lambda;
    }
    if !cholesky_in_place(&mut gram, cols, 0.0) {
        return None;
    }
    let mut xty = vec![0.0; cols * targets];
    gemm_tn_acc(&mut xty, x, y, cols, rows, targets);
    let mut w = vec![0.0; cols * targets];
    let mut col = vec![0.0; cols];
    for t in 0..targets {
        for i in 0..cols {
            col[i] = xty[i * targets + t];
        }
        cholesky_solve(&gram, cols, &mut col);
        for i in 0..cols {
            w[i * targets + t] = col[i];
        }
    }
    Some(w)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order with the matching eigenvectors as
/// rows of the second result (each unit length). Deterministic: fixed sweep
/// order, fixed convergence threshold.
pub fn sym_eigen(a_in: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(a_in.len(), n * n);
    let mut a = a_in.to_vec();
    // v starts as identity; rows accumulate the rotations.
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q].abs();
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // rotate rows/cols p and q of a
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                // accumulate into eigenvector rows
                for k in 0..n {
                    let vpk = v[p * n + k];
                    let vqk = v[q * n + k];
                    v[p * n + k] = c * vpk - s * vqk;
                    v[q * n + k] = s * vpk + c * vqk;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a[i * n + i]
            .partial_cmp(&a[j * n + j])
            .unwrap_or(core::cmp::Ordering::Equal)
    });
    let vals: Vec<f64> = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (row, &i) in order.iter().enumerate() {
        vecs[row * n..(row + 1) * n].copy_from_slice(&v[i * n..(i + 1) * n]);
    }
    (vals, vecs)
}
