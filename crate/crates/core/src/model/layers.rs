//! Primitive layer kernels over NCHW tensors.

use super::config::conv_out;
use super::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, both row-major,
/// optionally transposed in storage.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every index reached by the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.kernel, self.stride).unwrap_or(0),
            conv_out(w, self.kernel, self.stride).unwrap_or(0),
        )
    }
}

/// Unfolds one CHW sample into `[c·k·k, oh·ow]` patch columns.
fn im2col(x: &[f64], g: ConvGeom, h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
    let (k, s, pad) = (g.kernel, g.stride, g.pad() as isize);
    let p = oh * ow;
    for c in 0..g.in_c {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - pad;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - pad;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a CHW sample.
fn col2im(cols: &[f64], g: ConvGeom, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f64]) {
    let (k, s, pad) = (g.kernel, g.stride, g.pad() as isize);
    let p = oh * ow;
    for c in 0..g.in_c {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * s + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bias-free convolution with `pad = kernel / 2`; weights `[out, in, k, k]`.
pub fn conv_forward(x: &Tensor, weight: &[f64], g: ConvGeom) -> Tensor {
    let (n, c, h, w) = x.dims4();
    debug_assert_eq!(c, g.in_c);
    let (oh, ow) = g.out_hw(h, w);
    let p = oh * ow;
    let ckk = g.in_c * g.kernel * g.kernel;
    let mut out = Tensor::zeros(vec![n, g.out_c, oh, ow]);
    let mut cols = vec![0.0; ckk * p];
    for i in 0..n {
        im2col(x.sample(i), g, h, w, oh, ow, &mut cols);
        let dst = &mut out.data_mut()[i * g.out_c * p..(i + 1) * g.out_c * p];
        gemm(g.out_c, ckk, p, weight, false, &cols, false, dst, 0.0);
    }
    out
}

/// Returns `(dx, dweight)`; `dx` is skipped when not needed.
pub fn conv_backward(x: &Tensor, weight: &[f64], g: ConvGeom, dout: &Tensor, need_dx: bool) -> (Option<Tensor>, Vec<f64>) {
    let (n, c, h, w) = x.dims4();
    let (_, _, oh, ow) = dout.dims4();
    let p = oh * ow;
    let ckk = c * g.kernel * g.kernel;
    let mut dw = vec![0.0; g.out_c * ckk];
    let mut dx = need_dx.then(|| Tensor::zeros(vec![n, c, h, w]));
    let mut cols = vec![0.0; ckk * p];
    let mut dcols = vec![0.0; ckk * p];
    for i in 0..n {
        let dy = dout.sample(i);
        im2col(x.sample(i), g, h, w, oh, ow, &mut cols);
        // dW += dY [out, p] · cols^T [p, ckk]
        gemm(g.out_c, p, ckk, dy, false, &cols, true, &mut dw, 1.0);
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T [ckk, out] · dY [out, p]
            gemm(ckk, g.out_c, p, weight, true, dy, false, &mut dcols, 0.0);
            let per = c * h * w;
            col2im(&dcols, g, h, w, oh, ow, &mut dx.data_mut()[i * per..(i + 1) * per]);
        }
    }
    (dx, dw)
}

/// Adds the effect of changing one weight by `delta` to an existing conv
/// output, without recomputing the convolution.
pub fn conv_add_weight_delta(x: &Tensor, g: ConvGeom, weight_index: usize, delta: f64, out: &mut Tensor) {
    let (n, c, h, w) = x.dims4();
    let (_, _, oh, ow) = out.dims4();
    let k = g.kernel;
    let kx = weight_index % k;
    let ky = (weight_index / k) % k;
    let ci = (weight_index / (k * k)) % c;
    let o = weight_index / (c * k * k);
    let pad = g.pad() as isize;
    for i in 0..n {
        let src = &x.sample(i)[ci * h * w..(ci + 1) * h * w];
        let base = (i * g.out_c + o) * oh * ow;
        for oy in 0..oh {
            let iy = (oy * g.stride + ky) as isize - pad;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for ox in 0..ow {
                let ix = (ox * g.stride + kx) as isize - pad;
                if ix >= 0 && ix < w as isize {
                    out.data_mut()[base + oy * ow + ox] += delta * src[iy as usize * w + ix as usize];
                }
            }
        }
    }
}

/// Per-channel state needed by batch-norm backward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Batch statistics were used (gradients flow through mean and variance).
    pub batch_stats: bool,
}

/// Batch statistics for the running-average update: `(mean, unbiased var)`.
pub type BnStats = (Vec<f64>, Vec<f64>);

pub fn bn_forward_train(x: &Tensor, gamma: &[f64], beta: &[f64]) -> (Tensor, BnCache, BnStats) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            s += x.data()[(i * c + ch) * hw..][..hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            v += x.data()[(i * c + ch) * hw..][..hw].iter().map(|&a| (a - mu) * (a - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut y = Tensor::zeros(vec![n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let xs = &x.data()[base..base + hw];
            let ys = &mut y.data_mut()[base..base + hw];
            for ((xv, xh), yv) in xs.iter().zip(&mut xhat[base..base + hw]).zip(ys) {
                *xh = (xv - mean[ch]) * inv_std[ch];
                *yv = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    let unbiased = if m > 1.0 {
        var.iter().map(|v| v * m / (m - 1.0)).collect()
    } else {
        var
    };
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: true,
        },
        (mean, unbiased),
    )
}

pub fn bn_forward_eval(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> (Tensor, BnCache) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.numel()];
    let mut y = Tensor::zeros(vec![n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let xs = &x.data()[base..base + hw];
            let ys = &mut y.data_mut()[base..base + hw];
            for ((xv, xh), yv) in xs.iter().zip(&mut xhat[base..base + hw]).zip(ys) {
                *xh = (xv - mean[ch]) * inv_std[ch];
                *yv = gamma[ch] * *xh + beta[ch];
            }
        }
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: false,
        },
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn bn_backward(dy: &Tensor, cache: &BnCache, gamma: &[f64]) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dy.dims4();
    let hw = h * w;
    let m = (n * hw) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            for j in base..base + hw {
                dgamma[ch] += dy.data()[j] * cache.xhat[j];
                dbeta[ch] += dy.data()[j];
            }
        }
    }
    let mut dx = Tensor::zeros(vec![n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let scale = gamma[ch] * cache.inv_std[ch];
            for j in base..base + hw {
                dx.data_mut()[j] = if cache.batch_stats {
                    scale * (dy.data()[j] - dbeta[ch] / m - cache.xhat[j] * dgamma[ch] / m)
                } else {
                    scale * dy.data()[j]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn update_running(running: &mut [f64], batch: &[f64]) {
    for (r, b) in running.iter_mut().zip(batch) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
    }
}

pub fn relu_inplace(x: &mut Tensor) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the rectified output was not positive.
pub fn relu_backward_inplace(grad: &mut Tensor, output: &Tensor) {
    for (g, &o) in grad.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 3x3 stride-2 max pooling with one pixel of (ignored) padding. Returns the
/// pooled tensor and the flat input index of each maximum.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, h, w) = x.dims4();
    let oh = conv_out(h, 3, 2).unwrap_or(0);
    let ow = conv_out(w, 3, 2).unwrap_or(0);
    let mut out = Tensor::zeros(vec![n, c, oh, ow]);
    let mut arg = vec![0; out.numel()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if x.data()[idx] > best {
                            best = x.data()[idx];
                            best_i = idx;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                out.data_mut()[o] = best;
                arg[o] = best_i;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(dout: &Tensor, arg: &[usize], input_shape: &[usize]) -> Tensor {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (g, &i) in dout.data().iter().zip(arg) {
        dx.data_mut()[i] += g;
    }
    dx
}

/// Global average pooling to `[n, c]`.
pub fn gap_forward(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let data = x.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Tensor::new(vec![n, c], data).expect("pooled shape")
}

pub fn gap_backward(dpooled: &Tensor, input_shape: &[usize]) -> Tensor {
    let hw = input_shape[2] * input_shape[3];
    let mut dx = Tensor::zeros(input_shape.to_vec());
    for (plane, &g) in dx.data_mut().chunks_exact_mut(hw).zip(dpooled.data()) {
        plane.fill(g / hw as f64);
    }
    dx
}

/// `logits = features · Wᵀ + b` with `W` of shape `[k, c]`.
pub fn dense_forward(features: &Tensor, weight: &[f64], bias: &[f64]) -> Tensor {
    let (n, c) = (features.shape()[0], features.shape()[1]);
    let k = bias.len();
    let mut out = vec![0.0; n * k];
    for row in out.chunks_exact_mut(k) {
        row.copy_from_slice(bias);
    }
    gemm(n, c, k, features.data(), false, weight, true, &mut out, 1.0);
    Tensor::new(vec![n, k], out).expect("logit shape")
}

/// Returns `(dfeatures, dweight, dbias)`.
pub fn dense_backward(features: &Tensor, weight: &[f64], dlogits: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (n, c) = (features.shape()[0], features.shape()[1]);
    let k = dlogits.shape()[1];
    let mut dw = vec![0.0; k * c];
    gemm(k, n, c, dlogits.data(), true, features.data(), false, &mut dw, 0.0);
    let mut db = vec![0.0; k];
    for row in dlogits.data().chunks_exact(k) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = vec![0.0; n * c];
    gemm(n, k, c, dlogits.data(), false, weight, false, &mut dx, 0.0);
    (Tensor::new(vec![n, c], dx).expect("feature shape"), dw, db)
}
