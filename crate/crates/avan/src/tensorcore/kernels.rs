//! Forward and backward kernels backing the graph primitives.
//!
//! All kernels are plain functions over slices so the graph executor, the
//! gradient checker and the inference fast paths share one implementation.
//! Matrix products go through `matrixmultiply`; everything else is explicit
//! loops. No kernel uses threads, so results are bit-reproducible.

use super::tensor::Scalar;

/// `c[m x n] = alpha * a[m x k] . b[k x n] + beta * c`, all row-major.
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        if beta == T::zero() {
            c.fill(T::zero());
        }
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`gemm`] but with `b` read transposed: `c = alpha * a . b^T + beta * c`
/// where `b` is stored row-major as `[n x k]`.
pub fn gemm_bt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        if beta == T::zero() {
            c.fill(T::zero());
        }
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Like [`gemm`] but with `a` read transposed: `c = alpha * a^T . b + beta * c`
/// where `a` is stored row-major as `[k x m]`.
pub fn gemm_at<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        if beta == T::zero() {
            c.fill(T::zero());
        }
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Dense (affine) layer: x[n, in] . w[out, in]^T (+ b[out]) -> y[n, out]
// ---------------------------------------------------------------------------

pub fn dense_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    in_f: usize,
    w: &[T],
    out_f: usize,
    b: Option<&[T]>,
    y: &mut [T],
) {
    gemm_bt(n, in_f, out_f, T::one(), x, w, T::zero(), y);
    if let Some(b) = b {
        for row in y.chunks_mut(out_f) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
    }
}

/// Gradients of the dense layer. `dx`, `dw`, `db` are accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn dense_bwd<T: Scalar>(
    dy: &[T],
    x: &[T],
    n: usize,
    in_f: usize,
    w: &[T],
    out_f: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        // dx[n, in] += dy[n, out] . w[out, in]
        gemm(n, out_f, in_f, T::one(), dy, w, T::one(), dx);
    }
    if let Some(dw) = dw {
        // dw[out, in] += dy^T[out, n] . x[n, in]
        gemm_at(out_f, n, in_f, T::one(), dy, x, T::one(), dw);
    }
    if let Some(db) = db {
        for row in dy.chunks(out_f) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d = *d + g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2d via im2col + GEMM. NCHW layout, weight [co, ci, kh, kw].
// ---------------------------------------------------------------------------

pub fn conv2d_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Lower one image `[ci, h, w]` into columns `[ci*kh*kw, oh*ow]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    debug_assert_eq!(col.len(), ci * kh * kw * oh * ow);
    let mut idx = 0usize;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        col[idx..idx + ow].fill(T::zero());
                        idx += ow;
                        continue;
                    }
                    let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        col[idx] = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            row[ix as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter columns back into an image, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    col: &[T],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let mut idx = 0usize;
    for c in 0..ci {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[ix as usize] = row[ix as usize] + col[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    co: usize,
    kh: usize,
    kw: usize,
    b: Option<&[T]>,
    stride: usize,
    pad: usize,
    y: &mut [T],
) {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    let k = ci * kh * kw;
    let m = oh * ow;
    let mut col = vec![T::zero(); k * m];
    for i in 0..n {
        let xi = &x[i * ci * h * w..(i + 1) * ci * h * w];
        let yi = &mut y[i * co * m..(i + 1) * co * m];
        im2col(xi, ci, h, w, kh, kw, stride, pad, oh, ow, &mut col);
        gemm(co, k, m, T::one(), wgt, &col, T::zero(), yi);
        if let Some(b) = b {
            for (c, plane) in yi.chunks_mut(m).enumerate() {
                for v in plane.iter_mut() {
                    *v = *v + b[c];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Scalar>(
    dy: &[T],
    x: &[T],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    wgt: &[T],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let oh = conv2d_out_dim(h, kh, stride, pad);
    let ow = conv2d_out_dim(w, kw, stride, pad);
    let k = ci * kh * kw;
    let m = oh * ow;
    let mut col = vec![T::zero(); k * m];
    let mut dcol = vec![T::zero(); k * m];
    let need_dx = dx.is_some();
    let need_dw = dw.is_some();
    let mut dx = dx;
    let mut dw = dw;
    for i in 0..n {
        let dyi = &dy[i * co * m..(i + 1) * co * m];
        if need_dw {
            let xi = &x[i * ci * h * w..(i + 1) * ci * h * w];
            im2col(xi, ci, h, w, kh, kw, stride, pad, oh, ow, &mut col);
            // dw[co, k] += dy[co, m] . col^T[m, k]
            gemm_bt(co, m, k, T::one(), dyi, &col, T::one(), dw.as_deref_mut().unwrap());
        }
        if need_dx {
            // dcol[k, m] = w^T[k, co] . dy[co, m]
            gemm_at(k, co, m, T::one(), wgt, dyi, T::zero(), &mut dcol);
            let dxi = &mut dx.as_deref_mut().unwrap()[i * ci * h * w..(i + 1) * ci * h * w];
            col2im(&dcol, ci, h, w, kh, kw, stride, pad, oh, ow, dxi);
        }
        if let Some(db) = db.as_deref_mut() {
            for (c, plane) in dyi.chunks(m).enumerate() {
                let mut acc = T::zero();
                for &g in plane {
                    acc = acc + g;
                }
                db[c] = db[c] + acc;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization. Rank 2 normalizes each feature over the batch;
// rank 4 normalizes each channel over batch and spatial dims. Variance is
// the biased estimator in both training and running statistics.
// ---------------------------------------------------------------------------

/// Fill `idx`-major views: returns (channels, rows_per_channel, accessor stride info)
/// handled inline below; rank-2 is [n, f], rank-4 is [n, c, h, w].
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train_fwd<T: Scalar>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    eps: T,
    y: &mut [T],
    save_mean: &mut [T],
    save_var: &mut [T],
) {
    bn_stats(x, shape, save_mean, save_var);
    bn_apply(x, shape, save_mean, save_var, gamma, beta, eps, y);
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_eval_fwd<T: Scalar>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    y: &mut [T],
) {
    bn_apply(x, shape, running_mean, running_var, gamma, beta, eps, y);
}

fn bn_dims(shape: &[usize]) -> (usize, usize, usize) {
    // (batch-ish outer count, channels, inner spatial size)
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => panic!("batch norm supports rank 2 or 4, got {shape:?}"),
    }
}

fn bn_stats<T: Scalar>(x: &[T], shape: &[usize], mean: &mut [T], var: &mut [T]) {
    let (n, c, inner) = bn_dims(shape);
    let count = T::from_f64((n * inner) as f64);
    for ch in 0..c {
        let mut sum = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * inner;
            for j in 0..inner {
                sum = sum + x[base + j];
            }
        }
        let mu = sum / count;
        let mut sq = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * inner;
            for j in 0..inner {
                let d = x[base + j] - mu;
                sq = sq + d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = sq / count;
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_apply<T: Scalar>(
    x: &[T],
    shape: &[usize],
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    y: &mut [T],
) {
    let (n, c, inner) = bn_dims(shape);
    for ch in 0..c {
        let inv = T::one() / (var[ch] + eps).sqrt();
        let g = gamma[ch] * inv;
        let b = beta[ch] - mean[ch] * g;
        for i in 0..n {
            let base = (i * c + ch) * inner;
            for j in 0..inner {
                y[base + j] = x[base + j] * g + b;
            }
        }
    }
}

/// Backward through training-mode batch norm (gradients flow through the
/// batch statistics).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train_bwd<T: Scalar>(
    dy: &[T],
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    save_mean: &[T],
    save_var: &[T],
    eps: T,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let (n, c, inner) = bn_dims(shape);
    let count = T::from_f64((n * inner) as f64);
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    for ch in 0..c {
        let mu = save_mean[ch];
        let inv = T::one() / (save_var[ch] + eps).sqrt();
        // First pass: sums of dy and dy*xhat over the channel.
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * inner;
            for j in 0..inner {
                let g = dy[base + j];
                let xhat = (x[base + j] - mu) * inv;
                sum_dy = sum_dy + g;
                sum_dy_xhat = sum_dy_xhat + g * xhat;
            }
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[ch] = dg[ch] + sum_dy_xhat;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[ch] = db[ch] + sum_dy;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let scale = gamma[ch] * inv / count;
            for i in 0..n {
                let base = (i * c + ch) * inner;
                for j in 0..inner {
                    let xhat = (x[base + j] - mu) * inv;
                    let term = count * dy[base + j] - sum_dy - xhat * sum_dy_xhat;
                    dx[base + j] = dx[base + j] + scale * term;
                }
            }
        }
    }
}

/// Backward through inference-mode batch norm (running stats are constants).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_eval_bwd<T: Scalar>(
    dy: &[T],
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let (n, c, inner) = bn_dims(shape);
    let mut dx = dx;
    let mut dgamma = dgamma;
    let mut dbeta = dbeta;
    for ch in 0..c {
        let inv = T::one() / (running_var[ch] + eps).sqrt();
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for i in 0..n {
            let base = (i * c + ch) * inner;
            for j in 0..inner {
                let g = dy[base + j];
                sum_dy = sum_dy + g;
                sum_dy_xhat = sum_dy_xhat + g * (x[base + j] - running_mean[ch]) * inv;
            }
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[ch] = dg[ch] + sum_dy_xhat;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[ch] = db[ch] + sum_dy;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let scale = gamma[ch] * inv;
            for i in 0..n {
                let base = (i * c + ch) * inner;
                for j in 0..inner {
                    dx[base + j] = dx[base + j] + scale * dy[base + j];
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Bilinear upsampling with half-pixel centers (align-corners off).
// ---------------------------------------------------------------------------

/// Per output coordinate: (low index, high index, weight of high index).
pub fn upsample_axis_weights<T: Scalar>(src: usize, dst: usize) -> Vec<(usize, usize, T)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = (o as f64 + 0.5) * scale - 0.5;
            let pos = pos.max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let w = if i1 > i0 { pos - i0 as f64 } else { 0.0 };
            (i0, i1, T::from_f64(w))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn upsample_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    y: &mut [T],
) {
    let wy = upsample_axis_weights::<T>(h, oh);
    let wx = upsample_axis_weights::<T>(w, ow);
    for img in 0..n * c {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut y[img * oh * ow..(img + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in wy.iter().enumerate() {
            let r0 = &src[y0 * w..y0 * w + w];
            let r1 = &src[y1 * w..y1 * w + w];
            let out = &mut dst[oy * ow..(oy + 1) * ow];
            for (o, &(x0, x1, fx)) in out.iter_mut().zip(&wx) {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + fx * (r1[x1] - r1[x0]);
                *o = top + fy * (bot - top);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn upsample_bwd<T: Scalar>(
    dy: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    dx: &mut [T],
) {
    let wy = upsample_axis_weights::<T>(h, oh);
    let wx = upsample_axis_weights::<T>(w, ow);
    let one = T::one();
    for img in 0..n * c {
        let src = &mut dx[img * h * w..(img + 1) * h * w];
        let grad = &dy[img * oh * ow..(img + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in wy.iter().enumerate() {
            let row = &grad[oy * ow..(oy + 1) * ow];
            for (&g, &(x0, x1, fx)) in row.iter().zip(&wx) {
                src[y0 * w + x0] = src[y0 * w + x0] + g * (one - fy) * (one - fx);
                src[y0 * w + x1] = src[y0 * w + x1] + g * (one - fy) * fx;
                src[y1 * w + x0] = src[y1 * w + x0] + g * fy * (one - fx);
                src[y1 * w + x1] = src[y1 * w + x1] + g * fy * fx;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Global average pool: [n, c, h, w] -> [n, c]
// ---------------------------------------------------------------------------

pub fn gap_fwd<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize, y: &mut [T]) {
    let denom = T::from_f64(hw as f64);
    for i in 0..n * c {
        let mut acc = T::zero();
        for &v in &x[i * hw..(i + 1) * hw] {
            acc = acc + v;
        }
        y[i] = acc / denom;
    }
}

pub fn gap_bwd<T: Scalar>(dy: &[T], n: usize, c: usize, hw: usize, dx: &mut [T]) {
    let denom = T::from_f64(hw as f64);
    for i in 0..n * c {
        let g = dy[i] / denom;
        for v in &mut dx[i * hw..(i + 1) * hw] {
            *v = *v + g;
        }
    }
}

// ---------------------------------------------------------------------------
// Row-wise Euclidean distance: a[n, k], b[n, k] -> d[n]
// ---------------------------------------------------------------------------

pub fn rowdist_fwd<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, d: &mut [T]) {
    for i in 0..n {
        let mut acc = T::zero();
        for j in 0..k {
            let diff = a[i * k + j] - b[i * k + j];
            acc = acc + diff * diff;
        }
        d[i] = acc.sqrt();
    }
}

/// d(a,b) gradient: (a-b)/d into `da`, -(a-b)/d into `db`. Subgradient 0 at
/// coincident rows.
#[allow(clippy::too_many_arguments)]
pub fn rowdist_bwd<T: Scalar>(
    dd: &[T],
    a: &[T],
    b: &[T],
    d: &[T],
    n: usize,
    k: usize,
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let mut da = da;
    let mut db = db;
    for i in 0..n {
        if d[i] == T::zero() {
            continue;
        }
        let scale = dd[i] / d[i];
        for j in 0..k {
            let g = (a[i * k + j] - b[i * k + j]) * scale;
            if let Some(da) = da.as_deref_mut() {
                da[i * k + j] = da[i * k + j] + g;
            }
            if let Some(db) = db.as_deref_mut() {
                db[i * k + j] = db[i * k + j] - g;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Axis helpers for concat / slice
// ---------------------------------------------------------------------------

/// (outer, axis_len, inner) decomposition of a shape around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    // Independent references the fast paths are checked against.

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                c[i * n + j] = acc;
            }
        }
        c
    }

    #[allow(clippy::too_many_arguments)]
    fn naive_conv2d(
        x: &[f64],
        n: usize,
        ci: usize,
        h: usize,
        w: usize,
        wgt: &[f64],
        co: usize,
        kh: usize,
        kw: usize,
        b: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = conv2d_out_dim(h, kh, stride, pad);
        let ow = conv2d_out_dim(w, kw, stride, pad);
        let mut y = vec![0.0; n * co * oh * ow];
        for i in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[o]);
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        let xv = x[((i * ci + c) * h + iy as usize) * w
                                            + ix as usize];
                                        let wv = wgt[((o * ci + c) * kh + ky) * kw + kx];
                                        acc += xv * wv;
                                    }
                                }
                            }
                        }
                        y[((i * co + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn randv(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn gemm_matches_naive_triple_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a = randv(&mut rng, m * k);
            let b = randv(&mut rng, k * n);
            let want = naive_gemm(m, k, n, &a, &b);

            let mut c = vec![0.0; m * n];
            gemm(m, k, n, 1.0, &a, &b, 0.0, &mut c);
            assert_close(&c, &want, 1e-12);

            // a fed transposed
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for l in 0..k {
                    at[l * m + i] = a[i * k + l];
                }
            }
            let mut c2 = vec![0.0; m * n];
            gemm_at(m, k, n, 1.0, &at, &b, 0.0, &mut c2);
            assert_close(&c2, &want, 1e-12);

            // b fed transposed
            let mut bt = vec![0.0; n * k];
            for l in 0..k {
                for j in 0..n {
                    bt[j * k + l] = b[l * n + j];
                }
            }
            let mut c3 = vec![0.0; m * n];
            gemm_bt(m, k, n, 1.0, &a, &bt, 0.0, &mut c3);
            assert_close(&c3, &want, 1e-12);
        }
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = [1.0, 2.0];
        let b = [3.0, 4.0];
        let mut c = [10.0];
        gemm(1, 2, 1, 1.0, &a, &b, 1.0, &mut c);
        assert_close(&c, &[21.0], 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel_passes_input_through() {
        // Centered 1-hot 3x3 kernel, stride 1, zero pad 1 -> identity.
        let x: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let mut y = vec![0.0; 9];
        conv2d_fwd(&x, 1, 1, 3, 3, &k, 1, 3, 3, None, 1, 1, &mut y);
        assert_close(&y, &x, 1e-12);
    }

    #[test]
    fn conv2d_matches_naive_convolution() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        for &(n, ci, h, w, co, kh, kw, stride, pad) in &[
            (1, 1, 4, 4, 1, 3, 3, 1, 1),
            (2, 3, 5, 6, 4, 3, 3, 2, 1),
            (1, 2, 7, 5, 3, 1, 1, 1, 0),
            (2, 2, 6, 6, 2, 3, 3, 2, 0),
        ] {
            let x = randv(&mut rng, n * ci * h * w);
            let wgt = randv(&mut rng, co * ci * kh * kw);
            let b = randv(&mut rng, co);
            let want = naive_conv2d(&x, n, ci, h, w, &wgt, co, kh, kw, Some(&b), stride, pad);
            let mut y = vec![0.0; want.len()];
            conv2d_fwd(&x, n, ci, h, w, &wgt, co, kh, kw, Some(&b), stride, pad, &mut y);
            assert_close(&y, &want, 1e-12);
        }
    }

    #[test]
    fn upsample_double_width_hits_quarter_weights() {
        // Two source columns grown to four: half-pixel sampling lands at
        // fractional offsets 0, 0.25, 0.75 and 1 along the source segment.
        let w = upsample_axis_weights::<f64>(2, 4);
        assert_eq!(w[0], (0, 1, 0.0));
        assert_eq!(w[1], (0, 1, 0.25));
        assert_eq!(w[2], (0, 1, 0.75));
        assert_eq!(w[3], (1, 1, 0.0));

        let x = [1.0, 2.0];
        let mut y = [0.0; 4];
        upsample_fwd(&x, 1, 1, 1, 2, 1, 4, &mut y);
        assert_close(&y, &[1.0, 1.25, 1.75, 2.0], 1e-12);
    }

    #[test]
    fn upsample_preserves_constant_images() {
        let x = vec![3.5; 2 * 3];
        let mut y = vec![0.0; 7 * 9];
        upsample_fwd(&x, 1, 1, 2, 3, 7, 9, &mut y);
        assert_close(&y, &vec![3.5; 63], 1e-12);
    }

    #[test]
    fn batchnorm_normalizes_to_zero_mean_unit_variance() {
        // Two features over batch 4; gamma=1, beta=0, tiny eps.
        let x = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0];
        let shape = [4usize, 2];
        let gamma = [1.0, 1.0];
        let beta = [0.0, 0.0];
        let mut y = [0.0; 8];
        let mut mean = [0.0; 2];
        let mut var = [0.0; 2];
        batchnorm_train_fwd(&x, &shape, &gamma, &beta, 1e-12, &mut y, &mut mean, &mut var);
        assert_close(&mean, &[2.5, 25.0], 1e-12);
        // Biased variance: mean of squared deviations.
        assert_close(&var, &[1.25, 125.0], 1e-12);
        let m: f64 = y.iter().step_by(2).sum::<f64>() / 4.0;
        let v: f64 = y.iter().step_by(2).map(|d| (d - m) * (d - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rowdist_is_euclidean_per_row() {
        let a = [0.0, 0.0, 1.0, 2.0];
        let b = [3.0, 4.0, 1.0, 2.0];
        let mut d = [0.0; 2];
        rowdist_fwd(&a, &b, 2, 2, &mut d);
        assert_close(&d, &[5.0, 0.0], 1e-12);
    }

    #[test]
    fn gap_averages_each_plane() {
        let x = [1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let mut y = [0.0; 2];
        gap_fwd(&x, 1, 2, 4, &mut y);
        assert_close(&y, &[2.5, 25.0], 1e-12);
    }
}
