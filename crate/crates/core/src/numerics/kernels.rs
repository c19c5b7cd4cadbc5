//! Slice-level kernels shared by the eager [`Tensor`](super::Tensor) methods
//! and the tape's forward and backward passes. Every kernel reduces in a fixed
//! index order, so results are bit-reproducible.

use super::Scalar;

/// `c[m x n] += a[m x k] * b[k x n]`
pub fn gemm_nn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 || n == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub fn gemm_nt<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 || n == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks_exact(k)) {
            *cv += dot(a_row, b_row);
        }
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`
pub fn gemm_tn<S: Scalar>(m: usize, k: usize, n: usize, a: &[S], b: &[S], c: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        for (&api, c_row) in a_row.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators.
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = S::zero();
    for (x, y) in ta.iter().zip(tb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Row-wise softmax over contiguous rows of length `n`, with max subtraction.
pub fn softmax_rows<S: Scalar>(x: &[S], n: usize, out: &mut [S]) {
    for (xr, yr) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (y, &v) in yr.iter_mut().zip(xr) {
            *y = (v - max).exp();
            sum += *y;
        }
        let inv = S::one() / sum;
        for y in yr.iter_mut() {
            *y *= inv;
        }
    }
}

/// `dx += y * (g - <g, y>)` per row.
pub fn softmax_rows_backward<S: Scalar>(y: &[S], g: &[S], n: usize, dx: &mut [S]) {
    for ((yr, gr), dr) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(dx.chunks_exact_mut(n)) {
        let inner = dot(yr, gr);
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d += yv * (gv - inner);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over rows of length `d`. Writes the normalized rows
/// (before the affine map) into `xhat` and the reciprocal std per row into
/// `rstd`.
pub fn layer_norm<S: Scalar>(
    x: &[S],
    gain: &[S],
    bias: &[S],
    d: usize,
    out: &mut [S],
    xhat: &mut [S],
    rstd: &mut [S],
) {
    let inv_d = S::one() / S::of(d as f64);
    let eps = S::of(LAYER_NORM_EPS);
    for (r, ((xr, yr), hr)) in x
        .chunks_exact(d)
        .zip(out.chunks_exact_mut(d))
        .zip(xhat.chunks_exact_mut(d))
        .enumerate()
    {
        let mean = xr.iter().copied().sum::<S>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for (((y, h), &v), (&g, &b)) in yr.iter_mut().zip(hr.iter_mut()).zip(xr).zip(gain.iter().zip(bias)) {
            *h = (v - mean) * rs;
            *y = *h * g + b;
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<S: Scalar>(
    g: &[S],
    xhat: &[S],
    rstd: &[S],
    gain: &[S],
    d: usize,
    dx: Option<&mut [S]>,
    dgain: Option<&mut [S]>,
    dbias: Option<&mut [S]>,
) {
    if let Some(dg) = dgain {
        for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
            for ((a, &gv), &hv) in dg.iter_mut().zip(gr).zip(hr) {
                *a += gv * hv;
            }
        }
    }
    if let Some(db) = dbias {
        for gr in g.chunks_exact(d) {
            for (a, &gv) in db.iter_mut().zip(gr) {
                *a += gv;
            }
        }
    }
    if let Some(dx) = dx {
        let inv_d = S::one() / S::of(d as f64);
        let mut dh = vec![S::zero(); d];
        for (r, ((gr, hr), dr)) in g
            .chunks_exact(d)
            .zip(xhat.chunks_exact(d))
            .zip(dx.chunks_exact_mut(d))
            .enumerate()
        {
            for ((o, &gv), &w) in dh.iter_mut().zip(gr).zip(gain) {
                *o = gv * w;
            }
            let mean_dh = dh.iter().copied().sum::<S>() * inv_d;
            let mean_dh_h = dot(&dh, hr) * inv_d;
            for ((o, &dhv), &hv) in dr.iter_mut().zip(&dh).zip(hr) {
                *o += rstd[r] * (dhv - mean_dh - hv * mean_dh_h);
            }
        }
    }
}

/// Swaps axes 1 and 2 of a contiguous `[a, b, c, d]` array.
pub fn swap_axes12<S: Scalar>(x: &[S], dims: [usize; 4], out: &mut [S]) {
    let [a, b, c, d] = dims;
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
}

/// Transposes the last two axes of `batch` contiguous `m x n` matrices.
pub fn transpose_last2<S: Scalar>(x: &[S], batch: usize, m: usize, n: usize, out: &mut [S]) {
    for bi in 0..batch {
        let src = &x[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
}
