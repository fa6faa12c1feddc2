//! Forward and backward kernels on row-major slices.

use super::scalar::{matmul, Scalar};

pub const NORM_EPS: f64 = 1e-6;

/// `y[n×out] = x[n×in] · Wᵀ + b`.
pub fn linear_fwd<T: Scalar>(x: &[T], n: usize, d_in: usize, w: &[T], b: &[T], y: &mut [T]) {
    let d_out = b.len();
    for row in y[..n * d_out].chunks_exact_mut(d_out) {
        row.copy_from_slice(b);
    }
    matmul(n, d_in, d_out, x, false, w, true, y, true);
}

/// Accumulates `dW`, `db` and optionally writes `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_bwd<T: Scalar>(
    x: &[T],
    n: usize,
    d_in: usize,
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let d_out = db.len();
    for row in dy[..n * d_out].chunks_exact(d_out) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    matmul(d_out, n, d_in, dy, true, x, false, dw, true);
    if let Some(dx) = dx {
        matmul(n, d_out, d_in, dy, false, w, false, dx, false);
    }
}

/// Root-mean-square normalization with a learned gain; stores `1/rms` per row.
pub fn rmsnorm_fwd<T: Scalar>(x: &[T], d: usize, g: &[T], y: &mut [T], inv: &mut [T]) {
    let eps = T::c(NORM_EPS);
    let dn = T::c(d as f64);
    for ((xr, yr), r) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).zip(inv.iter_mut()) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / dn;
        *r = T::one() / (ms + eps).sqrt();
        for ((o, &v), &gi) in yr.iter_mut().zip(xr).zip(g) {
            *o = v * *r * gi;
        }
    }
}

pub fn rmsnorm_bwd<T: Scalar>(x: &[T], d: usize, g: &[T], inv: &[T], dy: &[T], dg: &mut [T], dx: &mut [T]) {
    let dn = T::c(d as f64);
    for (((xr, dyr), &r), dxr) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(inv)
        .zip(dx.chunks_exact_mut(d))
    {
        let mut dot = T::zero();
        for i in 0..d {
            let xh = xr[i] * r;
            dg[i] += dyr[i] * xh;
            dot += dyr[i] * g[i] * xh;
        }
        let mean = dot / dn;
        for i in 0..d {
            let xh = xr[i] * r;
            dxr[i] = r * (dyr[i] * g[i] - xh * mean);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let k = T::c(0.044715);
    let half = T::c(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::c(GELU_C);
    let k = T::c(0.044715);
    let half = T::c(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::c(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Numerically stable log-softmax over one row.
pub fn log_softmax<T: Scalar>(logits: &[T], out: &mut [T]) {
    let m = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    let lz = logits.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - m) - lz;
    }
}

pub fn softmax<T: Scalar>(logits: &[T], out: &mut [T]) {
    let m = logits.iter().cloned().fold(T::neg_infinity(), T::max);
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - m).exp();
    }
    let z = out.iter().cloned().sum::<T>();
    out.iter_mut().for_each(|v| *v /= z);
}
