//! Forward and backward kernels on raw slices.
//!
//! Layouts are row-major: images are `[N, C, H, W]`, sequences `[B, N, D]`.
//! Every `*_backward` accumulates into its gradient outputs rather than
//! overwriting them.

use crate::scalar::Scalar;

/// Upper bound on im2col buffer elements per GEMM call.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn chunk(&self) -> usize {
        let per_sample = self.rows() * self.out_h() * self.out_w();
        (COL_BUDGET / per_sample.max(1)).clamp(1, self.n)
    }
}

/// Fills `cols[(c,ki,kj), (n,y,x)]` for samples `n0..n0+nb`.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, n0: usize, nb: usize, cols: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = nb * ho * wo;
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for nl in 0..nb {
                    let src = &x[((n0 + nl) * g.c + c) * plane..][..plane];
                    for y in 0..ho {
                        let dst = &mut dst_row[(nl * ho + y) * wo..][..wo];
                        let sy = y as isize + ki as isize - g.pad as isize;
                        if sy < 0 || sy >= g.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_row = &src[sy as usize * g.w..][..g.w];
                        let shift = kj as isize - g.pad as isize;
                        let x_lo = (-shift).max(0) as usize;
                        let x_hi = ((g.w as isize - shift).min(wo as isize)).max(0) as usize;
                        dst[..x_lo.min(wo)].fill(T::zero());
                        if x_hi > x_lo {
                            let s0 = (x_lo as isize + shift) as usize;
                            dst[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                        }
                        if x_hi < wo {
                            dst[x_hi.max(x_lo)..].fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into `dx`.
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, n0: usize, nb: usize, dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let ncols = nb * ho * wo;
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for nl in 0..nb {
                    let dst = &mut dx[((n0 + nl) * g.c + c) * plane..][..plane];
                    for y in 0..ho {
                        let sy = y as isize + ki as isize - g.pad as isize;
                        if sy < 0 || sy >= g.h as isize {
                            continue;
                        }
                        let src = &src_row[(nl * ho + y) * wo..][..wo];
                        let dst_row = &mut dst[sy as usize * g.w..][..g.w];
                        let shift = kj as isize - g.pad as isize;
                        let x_lo = (-shift).max(0) as usize;
                        let x_hi = ((g.w as isize - shift).min(wo as isize)).max(0) as usize;
                        for xo in x_lo..x_hi {
                            dst_row[(xo as isize + shift) as usize] += src[xo];
                        }
                    }
                }
            }
        }
    }
}

/// `[nb, ch, p]` (starting at sample `n0`) → `[ch, nb*p]`.
fn gather_channel_major<T: Scalar>(x: &[T], ch: usize, p: usize, n0: usize, nb: usize, out: &mut [T]) {
    let ncols = nb * p;
    for nl in 0..nb {
        for c in 0..ch {
            let src = &x[((n0 + nl) * ch + c) * p..][..p];
            out[c * ncols + nl * p..][..p].copy_from_slice(src);
        }
    }
}

/// `[ch, nb*p]` → `[nb, ch, p]` (starting at sample `n0`), adding when `accumulate`.
fn scatter_channel_major<T: Scalar>(
    m: &[T],
    ch: usize,
    p: usize,
    n0: usize,
    nb: usize,
    out: &mut [T],
    accumulate: bool,
) {
    let ncols = nb * p;
    for nl in 0..nb {
        for c in 0..ch {
            let src = &m[c * ncols + nl * p..][..p];
            let dst = &mut out[((n0 + nl) * ch + c) * p..][..p];
            if accumulate {
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            } else {
                dst.copy_from_slice(src);
            }
        }
    }
}

/// Stride-1 2-D convolution with symmetric zero padding.
/// `w` is `[O, C, k, k]`, `bias` is `[O]`.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let rows = g.rows();
    let mut out = vec![T::zero(); g.n * g.o * p];
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); rows * chunk * p];
    let mut tmp = vec![T::zero(); g.o * chunk * p];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let ncols = nb * p;
        im2col(x, g, n0, nb, &mut cols[..rows * ncols]);
        T::gemm(
            g.o,
            rows,
            ncols,
            T::one(),
            w,
            rows,
            1,
            &cols[..rows * ncols],
            ncols,
            1,
            T::zero(),
            &mut tmp[..g.o * ncols],
            ncols,
            1,
        );
        scatter_channel_major(&tmp[..g.o * ncols], g.o, p, n0, nb, &mut out, false);
        n0 += nb;
    }
    if let Some(b) = bias {
        for plane in out.chunks_mut(p).enumerate() {
            let bo = b[plane.0 % g.o];
            plane.1.iter_mut().for_each(|v| *v += bo);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]; any of the outputs may be skipped.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let p = g.out_h() * g.out_w();
    let rows = g.rows();
    if let Some(db) = db {
        for (i, plane) in dy.chunks(p).enumerate() {
            db[i % g.o] += plane.iter().copied().sum::<T>();
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); rows * chunk * p];
    let mut dy_cm = vec![T::zero(); g.o * chunk * p];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let ncols = nb * p;
        gather_channel_major(dy, g.o, p, n0, nb, &mut dy_cm[..g.o * ncols]);
        if let Some(dw) = dw.as_deref_mut() {
            im2col(x, g, n0, nb, &mut cols[..rows * ncols]);
            // dW[O, rows] += dY[O, ncols] @ cols^T
            T::gemm(
                g.o,
                ncols,
                rows,
                T::one(),
                &dy_cm[..g.o * ncols],
                ncols,
                1,
                &cols[..rows * ncols],
                1,
                ncols,
                T::one(),
                dw,
                rows,
                1,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols[rows, ncols] = W^T @ dY
            T::gemm(
                rows,
                g.o,
                ncols,
                T::one(),
                w,
                1,
                rows,
                &dy_cm[..g.o * ncols],
                ncols,
                1,
                T::zero(),
                &mut cols[..rows * ncols],
                ncols,
                1,
            );
            col2im(&cols[..rows * ncols], g, n0, nb, dx);
        }
        n0 += nb;
    }
}

/// 2×2 stride-2 transposed convolution. `w` is `[C, O, 2, 2]`.
/// Returns `[N, O, 2H, 2W]`.
pub fn conv_transpose2x2_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    (n, c, h, wd): (usize, usize, usize, usize),
    o: usize,
) -> Vec<T> {
    let p = h * wd;
    let ncols = n * p;
    let o4 = o * 4;
    let mut xcm = vec![T::zero(); c * ncols];
    gather_channel_major(x, c, p, 0, n, &mut xcm);
    let mut y = vec![T::zero(); o4 * ncols];
    // Y[o4, ncols] = W^T[o4, c] @ X[c, ncols]
    T::gemm(o4, c, ncols, T::one(), w, 1, o4, &xcm, ncols, 1, T::zero(), &mut y, ncols, 1);
    let (h2, w2) = (2 * h, 2 * wd);
    let mut out = vec![T::zero(); n * o * h2 * w2];
    for oc in 0..o {
        for a in 0..2 {
            for b in 0..2 {
                let row = &y[((oc * 2 + a) * 2 + b) * ncols..][..ncols];
                for ni in 0..n {
                    let dst = &mut out[(ni * o + oc) * h2 * w2..][..h2 * w2];
                    for i in 0..h {
                        for j in 0..wd {
                            dst[(2 * i + a) * w2 + 2 * j + b] = row[ni * p + i * wd + j] + bias[oc];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2x2_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    (n, c, h, wd): (usize, usize, usize, usize),
    o: usize,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let p = h * wd;
    let ncols = n * p;
    let o4 = o * 4;
    let (h2, w2) = (2 * h, 2 * wd);
    let mut dycm = vec![T::zero(); o4 * ncols];
    for oc in 0..o {
        for a in 0..2 {
            for b in 0..2 {
                let row = &mut dycm[((oc * 2 + a) * 2 + b) * ncols..][..ncols];
                for ni in 0..n {
                    let src = &dy[(ni * o + oc) * h2 * w2..][..h2 * w2];
                    for i in 0..h {
                        for j in 0..wd {
                            row[ni * p + i * wd + j] = src[(2 * i + a) * w2 + 2 * j + b];
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for oc in 0..o {
            db[oc] += dycm[oc * 4 * ncols..(oc + 1) * 4 * ncols].iter().copied().sum::<T>();
        }
    }
    if let Some(dw) = dw {
        let mut xcm = vec![T::zero(); c * ncols];
        gather_channel_major(x, c, p, 0, n, &mut xcm);
        // dW[c, o4] += X[c, ncols] @ dY^T[ncols, o4]
        T::gemm(c, ncols, o4, T::one(), &xcm, ncols, 1, &dycm, 1, ncols, T::one(), dw, o4, 1);
    }
    if let Some(dx) = dx {
        let mut dxcm = vec![T::zero(); c * ncols];
        T::gemm(c, o4, ncols, T::one(), w, o4, 1, &dycm, ncols, 1, T::zero(), &mut dxcm, ncols, 1);
        scatter_channel_major(&dxcm, c, p, 0, n, dx, true);
    }
}

/// 2×2 max pooling; returns pooled values and the flat argmax of each window.
pub fn maxpool2_forward<T: Scalar>(x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> (Vec<T>, Vec<u32>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut idx = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + di) * w + 2 * j + dj;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward<T: Scalar>(x: &[T], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &[T], (n, c, h, w): (usize, usize, usize, usize), dx: &mut [T]) {
    let (h2, w2) = (2 * h, 2 * w);
    for plane in 0..n * c {
        let src = &dy[plane * h2 * w2..][..h2 * w2];
        let dst = &mut dx[plane * h * w..][..h * w];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
}

/// Per-channel statistics of `[N, C, P]` data: (mean, biased variance).
pub fn channel_stats<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> (Vec<T>, Vec<T>) {
    let m = T::cast((n * p) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s += x[(ni * c + ch) * p..][..p].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for ni in 0..n {
            for &val in &x[(ni * c + ch) * p..][..p] {
                let d = val - mu;
                v += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

/// Applies `y = gamma * (x - mean) * inv_std + beta` per channel and returns
/// `(y, xhat)`.
pub fn batchnorm_apply<T: Scalar>(
    x: &[T],
    (n, c, p): (usize, usize, usize),
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * p;
            for i in off..off + p {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Backward of batch normalization. With `batch_stats` the statistics are
/// treated as functions of the input; otherwise they are constants.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    (n, c, p): (usize, usize, usize),
    inv_std: &[T],
    gamma: &[T],
    batch_stats: bool,
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * p;
            for i in off..off + p {
                sum_dy[ch] += dy[i];
                sum_dy_xhat[ch] += dy[i] * xhat[i];
            }
        }
    }
    if let Some(dg) = dgamma {
        for ch in 0..c {
            dg[ch] += sum_dy_xhat[ch];
        }
    }
    if let Some(dbt) = dbeta {
        for ch in 0..c {
            dbt[ch] += sum_dy[ch];
        }
    }
    if let Some(dx) = dx {
        let m = T::cast((n * p) as f64);
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * p;
                let scale = gamma[ch] * inv_std[ch];
                if batch_stats {
                    let k = scale / m;
                    for i in off..off + p {
                        dx[i] += k * (m * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                    }
                } else {
                    for i in off..off + p {
                        dx[i] += scale * dy[i];
                    }
                }
            }
        }
    }
}

/// Layer normalization over the last axis of `[rows, d]`.
/// Returns `(y, xhat, inv_std)`.
pub fn layernorm_forward<T: Scalar>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    let df = T::cast(d as f64);
    for r in 0..rows {
        let row = &x[r * d..][..d];
        let mu = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / df;
        let is = T::one() / (var + eps).sqrt();
        inv[r] = is;
        for j in 0..d {
            let h = (row[j] - mu) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    (y, xhat, inv)
}

#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    d: usize,
    gamma: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let rows = dy.len() / d;
    if let Some(dg) = dgamma {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += dy[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if let Some(db) = dbeta {
        for r in 0..rows {
            for j in 0..d {
                db[j] += dy[r * d + j];
            }
        }
    }
    if let Some(dx) = dx {
        let df = T::cast(d as f64);
        for r in 0..rows {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..d {
                let g = dy[r * d + j] * gamma[j];
                s1 += g;
                s2 += g * xhat[r * d + j];
            }
            let k = inv_std[r] / df;
            for j in 0..d {
                let g = dy[r * d + j] * gamma[j];
                dx[r * d + j] += k * (df * g - s1 - xhat[r * d + j] * s2);
            }
        }
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Scalar>(x: &mut [T], width: usize) {
    for row in x.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

/// Multi-head scaled dot-product self-attention on packed projections.
///
/// `qkv` is `[b, n, 3d]` holding queries, keys and values side by side.
/// Returns the attended values `[b, n, d]` and the attention weights
/// `[b, heads, n, n]`.
pub fn attention_forward<T: Scalar>(qkv: &[T], b: usize, n: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::cast(dh as f64).sqrt();
    let row = 3 * d;
    let mut out = vec![T::zero(); b * n * d];
    let mut probs = vec![T::zero(); b * heads * n * n];
    for bi in 0..b {
        let base = &qkv[bi * n * row..][..n * row];
        for hd in 0..heads {
            let p = &mut probs[(bi * heads + hd) * n * n..][..n * n];
            let q = &base[hd * dh..];
            let k = &base[d + hd * dh..];
            let v = &base[2 * d + hd * dh..];
            // S = Q K^T * scale
            T::gemm(n, dh, n, scale, q, row, 1, k, 1, row, T::zero(), p, n, 1);
            softmax_rows(p, n);
            let o = &mut out[bi * n * d + hd * dh..];
            T::gemm(n, n, dh, T::one(), p, n, 1, v, row, 1, T::zero(), o, d, 1);
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    b: usize,
    n: usize,
    d: usize,
    heads: usize,
    dqkv: &mut [T],
) {
    let dh = d / heads;
    let scale = T::one() / T::cast(dh as f64).sqrt();
    let row = 3 * d;
    let mut dp = vec![T::zero(); n * n];
    for bi in 0..b {
        let base = &qkv[bi * n * row..][..n * row];
        let dbase = &mut dqkv[bi * n * row..][..n * row];
        for hd in 0..heads {
            let p = &probs[(bi * heads + hd) * n * n..][..n * n];
            let q = &base[hd * dh..];
            let k = &base[d + hd * dh..];
            let v = &base[2 * d + hd * dh..];
            let dout_h = &dout[bi * n * d + hd * dh..];
            // dV += P^T dO
            T::gemm(n, n, dh, T::one(), p, 1, n, dout_h, d, 1, T::one(), &mut dbase[2 * d + hd * dh..], row, 1);
            // dP = dO V^T
            T::gemm(n, dh, n, T::one(), dout_h, d, 1, v, 1, row, T::zero(), &mut dp, n, 1);
            // dS = P * (dP - rowsum(dP * P))
            for r in 0..n {
                let pr = &p[r * n..][..n];
                let dpr = &mut dp[r * n..][..n];
                let dot: T = pr.iter().zip(dpr.iter()).map(|(&a, &b)| a * b).sum();
                for (g, &pv) in dpr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot);
                }
            }
            // dQ += dS K * scale ; dK += dS^T Q * scale
            T::gemm(n, n, dh, scale, &dp, n, 1, k, row, 1, T::one(), &mut dbase[hd * dh..], row, 1);
            T::gemm(n, n, dh, scale, &dp, 1, n, q, row, 1, T::one(), &mut dbase[d + hd * dh..], row, 1);
        }
    }
}

/// tanh approximation of GELU and its derivative.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::cast((2.0 / std::f64::consts::PI).sqrt());
    let half = T::cast(0.5);
    let a = T::cast(0.044715);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::cast((2.0 / std::f64::consts::PI).sqrt());
    let half = T::cast(0.5);
    let a = T::cast(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::cast(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
