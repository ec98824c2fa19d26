//! Row-wise kernels shared by the plain functions and the tape, so that a
//! value computed either way is bitwise identical.

use super::Real;

/// `out[r] = (x[r] - mean) / sqrt(var + eps)`; optionally saves the inverse std.
pub fn layer_norm_rows<T: Real>(
    x: &[T],
    rows: usize,
    cols: usize,
    eps: T,
    out: &mut [T],
    mut inv_std: Option<&mut Vec<T>>,
) {
    let n = T::from_usize(cols).unwrap();
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = (v - mean) * inv;
        }
        if let Some(s) = inv_std.as_deref_mut() {
            s.push(inv);
        }
    }
}

/// Gradient of [`layer_norm_rows`] given its output `y` and saved inverse std.
pub fn layer_norm_backward<T: Real>(y: &[T], dy: &[T], inv_std: &[T], cols: usize, dx: &mut [T]) {
    let n = T::from_usize(cols).unwrap();
    for (r, &inv) in inv_std.iter().enumerate() {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &dy[r * cols..(r + 1) * cols];
        let mean_g = gr.iter().copied().sum::<T>() / n;
        let mean_gy = gr.iter().zip(yr).map(|(&g, &v)| g * v).sum::<T>() / n;
        for ((d, &g), &v) in dx[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
            *d += inv * (g - mean_g - v * mean_gy);
        }
    }
}

/// In-place max-subtracted softmax over each row.
pub fn softmax_rows<T: Real>(x: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let xr = &mut x[r * cols..(r + 1) * cols];
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in xr.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in xr.iter_mut() {
            *v /= total;
        }
    }
}

/// `dz = p ⊙ (dp - <dp, p>)` per row, accumulated into `dz`.
pub fn softmax_backward<T: Real>(p: &[T], dp: &[T], rows: usize, cols: usize, dz: &mut [T]) {
    for r in 0..rows {
        let pr = &p[r * cols..(r + 1) * cols];
        let gr = &dp[r * cols..(r + 1) * cols];
        let dot = pr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
        for ((d, &pv), &g) in dz[r * cols..(r + 1) * cols].iter_mut().zip(pr).zip(gr) {
            *d += pv * (g - dot);
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

/// RMS-normalizes each `head_dim` segment of every row (QK-Norm).
pub fn rms_norm_segments<T: Real>(x: &[T], seg: usize, eps: T, out: &mut [T], inv_rms: &mut Vec<T>) {
    let n = T::from_usize(seg).unwrap();
    for (xs, os) in x.chunks(seg).zip(out.chunks_mut(seg)) {
        let ms = xs.iter().map(|&v| v * v).sum::<T>() / n;
        let inv = T::one() / (ms + eps).sqrt();
        for (o, &v) in os.iter_mut().zip(xs) {
            *o = v * inv;
        }
        inv_rms.push(inv);
    }
}

pub fn rms_norm_segments_backward<T: Real>(y: &[T], dy: &[T], inv_rms: &[T], seg: usize, dx: &mut [T]) {
    let n = T::from_usize(seg).unwrap();
    for (((ys, gs), ds), &inv) in y.chunks(seg).zip(dy.chunks(seg)).zip(dx.chunks_mut(seg)).zip(inv_rms) {
        let mean_gy = gs.iter().zip(ys).map(|(&g, &v)| g * v).sum::<T>() / n;
        for ((d, &g), &v) in ds.iter_mut().zip(gs).zip(ys) {
            *d += inv * (g - v * mean_gy);
        }
    }
}

/// `c += a · b` for contiguous row-major matrices.
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, k as isize, 1, b, n as isize, 1, c, n as isize, 1);
}

/// `c += a · bᵀ` where `b` is stored `n×k`.
pub fn matmul_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, k as isize, 1, b, 1, k as isize, c, n as isize, 1);
}

/// `c += aᵀ · b` where `a` is stored `k×m`.
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    T::gemm_acc(m, k, n, a, 1, m as isize, b, n as isize, 1, c, n as isize, 1);
}
