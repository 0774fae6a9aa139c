//! Batch kernels on raw NCHW buffers. Forward and backward live side by side
//! so the index arithmetic can be compared at a glance.

use crate::ir::ConvParams;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

#[inline]
fn in_range(v: isize, limit: usize) -> Option<usize> {
    (v >= 0 && (v as usize) < limit).then_some(v as usize)
}

pub(crate) fn out_extent(p: &ConvParams, h: usize, w: usize) -> (usize, usize) {
    (
        (h + 2 * p.padding - p.kernel) / p.stride + 1,
        (w + 2 * p.padding - p.kernel) / p.stride + 1,
    )
}

/// Columns laid out as `(c*k*k) x (n*ho*wo)`.
fn im2col<T: Scalar>(x: &[T], d: Dims, p: &ConvParams, ho: usize, wo: usize) -> Vec<T> {
    let k = p.kernel;
    let cols_n = d.n * ho * wo;
    let mut cols = vec![T::zero(); d.c * k * k * cols_n];
    for ci in 0..d.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..d.n {
                    let src = &x[(ni * d.c + ci) * d.plane()..(ni * d.c + ci + 1) * d.plane()];
                    for oy in 0..ho {
                        let Some(iy) = in_range((oy * p.stride + ky) as isize - p.padding as isize, d.h)
                        else {
                            continue;
                        };
                        let base = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            if let Some(ix) =
                                in_range((ox * p.stride + kx) as isize - p.padding as isize, d.w)
                            {
                                dst[base + ox] = src[iy * d.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], d: Dims, p: &ConvParams, ho: usize, wo: usize, dx: &mut [T]) {
    let k = p.kernel;
    let cols_n = d.n * ho * wo;
    for ci in 0..d.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for ni in 0..d.n {
                    let plane = (ni * d.c + ci) * d.plane();
                    for oy in 0..ho {
                        let Some(iy) = in_range((oy * p.stride + ky) as isize - p.padding as isize, d.h)
                        else {
                            continue;
                        };
                        let base = (ni * ho + oy) * wo;
                        for ox in 0..wo {
                            if let Some(ix) =
                                in_range((ox * p.stride + kx) as isize - p.padding as isize, d.w)
                            {
                                dx[plane + iy * d.w + ix] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Dense (groups = 1) convolution. Returns the output and its dims.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    d: Dims,
    p: &ConvParams,
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Dims) {
    let (ho, wo) = out_extent(p, d.h, d.w);
    let o = p.out_channels;
    let kk = d.c * p.kernel * p.kernel;
    let cols_n = d.n * ho * wo;
    let cols = im2col(x, d, p, ho, wo);
    let mut mat = vec![T::zero(); o * cols_n];
    T::gemm(o, kk, cols_n, T::one(), weight, kk as isize, 1, &cols, cols_n as isize, 1, T::zero(), &mut mat, cols_n as isize, 1);
    let od = Dims { n: d.n, c: o, h: ho, w: wo };
    let plane = ho * wo;
    let mut out = vec![T::zero(); od.numel()];
    for oc in 0..o {
        let b = bias.map(|b| b[oc]).unwrap_or_else(T::zero);
        for ni in 0..d.n {
            let src = &mat[oc * cols_n + ni * plane..oc * cols_n + (ni + 1) * plane];
            let dst = &mut out[(ni * o + oc) * plane..(ni * o + oc + 1) * plane];
            for (t, s) in dst.iter_mut().zip(src) {
                *t = *s + b;
            }
        }
    }
    (out, od)
}

/// Gradients of a dense convolution: `(dx, dweight, dbias)`. `dx` is skipped
/// when `need_dx` is false (the producer is the graph input).
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    d: Dims,
    p: &ConvParams,
    weight: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (ho, wo) = out_extent(p, d.h, d.w);
    let o = p.out_channels;
    let kk = d.c * p.kernel * p.kernel;
    let plane = ho * wo;
    let cols_n = d.n * plane;
    let mut dmat = vec![T::zero(); o * cols_n];
    let mut dbias = vec![T::zero(); o];
    for oc in 0..o {
        for ni in 0..d.n {
            let src = &dout[(ni * o + oc) * plane..(ni * o + oc + 1) * plane];
            dmat[oc * cols_n + ni * plane..oc * cols_n + (ni + 1) * plane].copy_from_slice(src);
        }
        dbias[oc] = dmat[oc * cols_n..(oc + 1) * cols_n].iter().copied().sum();
    }
    let cols = im2col(x, d, p, ho, wo);
    let mut dw = vec![T::zero(); o * kk];
    // dW = dmat (o x N) * cols^T (N x kk)
    T::gemm(o, cols_n, kk, T::one(), &dmat, cols_n as isize, 1, &cols, 1, cols_n as isize, T::zero(), &mut dw, kk as isize, 1);
    let dx = need_dx.then(|| {
        let mut dcols = vec![T::zero(); kk * cols_n];
        // dcols = W^T (kk x o) * dmat (o x N)
        T::gemm(kk, o, cols_n, T::one(), weight, 1, kk as isize, &dmat, cols_n as isize, 1, T::zero(), &mut dcols, cols_n as isize, 1);
        let mut dx = vec![T::zero(); d.numel()];
        col2im(&dcols, d, p, ho, wo, &mut dx);
        dx
    });
    (dx, dw, dbias)
}

/// Depthwise convolution (one `k x k` filter per channel).
pub(crate) fn depthwise_forward<T: Scalar>(
    x: &[T],
    d: Dims,
    p: &ConvParams,
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Dims) {
    let (ho, wo) = out_extent(p, d.h, d.w);
    let k = p.kernel;
    let od = Dims { n: d.n, c: d.c, h: ho, w: wo };
    let mut out = vec![T::zero(); od.numel()];
    for ni in 0..d.n {
        for c in 0..d.c {
            let src = &x[(ni * d.c + c) * d.plane()..(ni * d.c + c + 1) * d.plane()];
            let filt = &weight[c * k * k..(c + 1) * k * k];
            let b = bias.map(|b| b[c]).unwrap_or_else(T::zero);
            let dst = &mut out[(ni * d.c + c) * ho * wo..(ni * d.c + c + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b;
                    for ky in 0..k {
                        let Some(iy) = in_range((oy * p.stride + ky) as isize - p.padding as isize, d.h)
                        else {
                            continue;
                        };
                        for kx in 0..k {
                            if let Some(ix) =
                                in_range((ox * p.stride + kx) as isize - p.padding as isize, d.w)
                            {
                                acc += filt[ky * k + kx] * src[iy * d.w + ix];
                            }
                        }
                    }
                    dst[oy * wo + ox] = acc;
                }
            }
        }
    }
    (out, od)
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    d: Dims,
    p: &ConvParams,
    weight: &[T],
    dout: &[T],
    need_dx: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let (ho, wo) = out_extent(p, d.h, d.w);
    let k = p.kernel;
    let mut dw = vec![T::zero(); d.c * k * k];
    let mut db = vec![T::zero(); d.c];
    let mut dx = vec![T::zero(); if need_dx { d.numel() } else { 0 }];
    for ni in 0..d.n {
        for c in 0..d.c {
            let base = (ni * d.c + c) * d.plane();
            let filt = &weight[c * k * k..(c + 1) * k * k];
            let g = &dout[(ni * d.c + c) * ho * wo..(ni * d.c + c + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let go = g[oy * wo + ox];
                    db[c] += go;
                    for ky in 0..k {
                        let Some(iy) = in_range((oy * p.stride + ky) as isize - p.padding as isize, d.h)
                        else {
                            continue;
                        };
                        for kx in 0..k {
                            if let Some(ix) =
                                in_range((ox * p.stride + kx) as isize - p.padding as isize, d.w)
                            {
                                dw[c * k * k + ky * k + kx] += go * x[base + iy * d.w + ix];
                                if need_dx {
                                    dx[base + iy * d.w + ix] += go * filt[ky * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (need_dx.then_some(dx), dw, db)
}

/// `y = x W^T + b` with `x` as `n x in`.
pub(crate) fn linear_forward<T: Scalar>(
    x: &[T],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let mut out = Vec::with_capacity(n * fan_out);
    for _ in 0..n {
        out.extend_from_slice(bias);
    }
    T::gemm(n, fan_in, fan_out, T::one(), x, fan_in as isize, 1, weight, 1, fan_in as isize, T::one(), &mut out, fan_out as isize, 1);
    out
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &[T],
    n: usize,
    fan_in: usize,
    fan_out: usize,
    weight: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); fan_out * fan_in];
    T::gemm(fan_out, n, fan_in, T::one(), dout, 1, fan_out as isize, x, fan_in as isize, 1, T::zero(), &mut dw, fan_in as isize, 1);
    let mut db = vec![T::zero(); fan_out];
    for row in dout.chunks(fan_out) {
        for (b, g) in db.iter_mut().zip(row) {
            *b += *g;
        }
    }
    let mut dx = vec![T::zero(); n * fan_in];
    T::gemm(n, fan_out, fan_in, T::one(), dout, fan_out as isize, 1, weight, fan_in as isize, 1, T::zero(), &mut dx, fan_in as isize, 1);
    (dx, dw, db)
}

/// Max pooling without padding; also returns the flat input index of each
/// maximum for the backward pass.
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], d: Dims, k: usize, s: usize) -> (Vec<T>, Vec<usize>, Dims) {
    let ho = (d.h - k) / s + 1;
    let wo = (d.w - k) / s + 1;
    let od = Dims { n: d.n, c: d.c, h: ho, w: wo };
    let mut out = vec![T::zero(); od.numel()];
    let mut arg = vec![0usize; od.numel()];
    for plane in 0..d.n * d.c {
        let base = plane * d.plane();
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * s * d.w + ox * s;
                for ky in 0..k {
                    for kx in 0..k {
                        let i = base + (oy * s + ky) * d.w + ox * s + kx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                let o = plane * ho * wo + oy * wo + ox;
                out[o] = x[best];
                arg[o] = best;
            }
        }
    }
    (out, arg, od)
}

pub(crate) struct BnBatch<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// BatchNorm with batch statistics (biased variance).
pub(crate) fn bn_train_forward<T: Scalar>(
    x: &[T],
    d: Dims,
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, BnBatch<T>) {
    let m = T::from_usize(d.n * d.plane()).unwrap();
    let eps = T::from_f64_lossy(eps);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); d.c];
    let mut vars = vec![T::zero(); d.c];
    let mut inv = vec![T::zero(); d.c];
    let planes = |c: usize| (0..d.n).map(move |ni| (ni * d.c + c) * d.plane());
    for c in 0..d.c {
        let mut sum = T::zero();
        for b in planes(c) {
            sum += x[b..b + d.plane()].iter().copied().sum::<T>();
        }
        let mean = sum / m;
        let mut sq = T::zero();
        for b in planes(c) {
            for v in &x[b..b + d.plane()] {
                let t = *v - mean;
                sq += t * t;
            }
        }
        let var = sq / m;
        let is = T::one() / (var + eps).sqrt();
        for b in planes(c) {
            for i in b..b + d.plane() {
                let h = (x[i] - mean) * is;
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
        means[c] = mean;
        vars[c] = var;
        inv[c] = is;
    }
    (
        out,
        BnBatch {
            xhat,
            inv_std: inv,
            mean: means,
            var: vars,
        },
    )
}

pub(crate) fn bn_eval_forward<T: Scalar>(
    x: &[T],
    d: Dims,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: f64,
) -> Vec<T> {
    let eps = T::from_f64_lossy(eps);
    let mut out = vec![T::zero(); x.len()];
    for c in 0..d.c {
        let scale = gamma[c] / (var[c] + eps).sqrt();
        let shift = beta[c] - mean[c] * scale;
        for ni in 0..d.n {
            let b = (ni * d.c + c) * d.plane();
            for i in b..b + d.plane() {
                out[i] = x[i] * scale + shift;
            }
        }
    }
    out
}

/// Returns `(dx, dgamma, dbeta)` for batch-statistics BatchNorm.
pub(crate) fn bn_backward<T: Scalar>(
    dout: &[T],
    d: Dims,
    gamma: &[T],
    cache: &BnBatch<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let m = T::from_usize(d.n * d.plane()).unwrap();
    let mut dx = vec![T::zero(); dout.len()];
    let mut dgamma = vec![T::zero(); d.c];
    let mut dbeta = vec![T::zero(); d.c];
    for c in 0..d.c {
        let mut sg = T::zero();
        let mut sgx = T::zero();
        for ni in 0..d.n {
            let b = (ni * d.c + c) * d.plane();
            for i in b..b + d.plane() {
                sg += dout[i];
                sgx += dout[i] * cache.xhat[i];
            }
        }
        dgamma[c] = sgx;
        dbeta[c] = sg;
        let k = gamma[c] * cache.inv_std[c] / m;
        for ni in 0..d.n {
            let b = (ni * d.c + c) * d.plane();
            for i in b..b + d.plane() {
                dx[i] = k * (m * dout[i] - sg - cache.xhat[i] * sgx);
            }
        }
    }
    (dx, dgamma, dbeta)
}
