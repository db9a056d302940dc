//! Single-head attention and projections on feature-major buffers
//! (`dim × tokens`, row-major).

use crate::tensor::ops::{softmax_rows_inplace, softmax_rows_vjp_inplace};
use crate::tensor::{gemm, Scalar, Tensor};

/// `w · x` for `w: out × in` and `x: in × n`.
pub fn project<T: Scalar>(w: &Tensor<T>, x: &[T], n: usize) -> Vec<T> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), i * n);
    let mut y = vec![T::zero(); o * n];
    gemm(o, i, n, T::one(), w.data(), (i, 1), x, (n, 1), T::zero(), &mut y, (n, 1));
    y
}

/// Accumulates `g·xᵀ` into `gw`, returns `wᵀ·g`.
pub fn project_vjp<T: Scalar>(w: &Tensor<T>, x: &[T], n: usize, g: &[T], gw: &mut Tensor<T>) -> Vec<T> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    gemm(o, n, i, T::one(), g, (n, 1), x, (1, n), T::one(), gw.data_mut(), (i, 1));
    let mut gx = vec![T::zero(); i * n];
    gemm(i, o, n, T::one(), w.data(), (1, i), g, (n, 1), T::zero(), &mut gx, (n, 1));
    gx
}

/// Scaled dot-product attention. `q: a × nq`, `k, v: a × nk`.
/// Returns the output (`a × nq`) and the row-stochastic weights (`nq × nk`).
pub fn attend<T: Scalar>(q: &[T], k: &[T], v: &[T], a: usize, nq: usize, nk: usize) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::c(a as f64).sqrt();
    let mut p = vec![T::zero(); nq * nk];
    gemm(nq, a, nk, scale, q, (1, nq), k, (nk, 1), T::zero(), &mut p, (nk, 1));
    softmax_rows_inplace(&mut p, nk);
    let mut o = vec![T::zero(); a * nq];
    gemm(a, nk, nq, T::one(), v, (nk, 1), &p, (1, nk), T::zero(), &mut o, (nq, 1));
    (o, p)
}

/// Gradients of [`attend`] with respect to `q`, `k` and `v`.
#[allow(clippy::too_many_arguments)]
pub fn attend_vjp<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    p: &[T],
    g: &[T],
    a: usize,
    nq: usize,
    nk: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / T::c(a as f64).sqrt();
    let mut gp = vec![T::zero(); nq * nk];
    gemm(nq, a, nk, T::one(), g, (1, nq), v, (nk, 1), T::zero(), &mut gp, (nk, 1));
    let mut gv = vec![T::zero(); a * nk];
    gemm(a, nq, nk, T::one(), g, (nq, 1), p, (nk, 1), T::zero(), &mut gv, (nk, 1));
    softmax_rows_vjp_inplace(p, &mut gp, nk);
    let mut gq = vec![T::zero(); a * nq];
    gemm(a, nk, nq, scale, k, (nk, 1), &gp, (1, nk), T::zero(), &mut gq, (nq, 1));
    let mut gk = vec![T::zero(); a * nk];
    gemm(a, nq, nk, scale, q, (nq, 1), &gp, (nk, 1), T::zero(), &mut gk, (nk, 1));
    (gq, gk, gv)
}

/// Transposes a `rows × cols` buffer.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
