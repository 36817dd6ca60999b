//! Forward and backward kernels on raw row-major buffers.

use crate::scalar::{gemm, Scalar};

pub(crate) fn affine_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    in_dim: usize,
    weight: &[T],
    bias: Option<&[T]>,
    out_dim: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); batch * out_dim];
    gemm(false, true, batch, out_dim, in_dim, T::one(), x, weight, T::zero(), &mut y);
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(out_dim) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when asked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn affine_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    weight: &[T],
    batch: usize,
    in_dim: usize,
    out_dim: usize,
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    if let Some(dw) = dweight {
        gemm(true, false, out_dim, in_dim, batch, T::one(), dy, x, T::one(), dw);
    }
    if let Some(db) = dbias {
        for row in dy.chunks_exact(out_dim) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::zero(); batch * in_dim];
        gemm(false, false, batch, in_dim, out_dim, T::one(), dy, weight, T::zero(), &mut dx);
        dx
    })
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_plane();
    for ci in 0..g.channels {
        let src = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let line = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kj) as isize - p as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let plane = g.out_plane();
    for ci in 0..g.channels {
        let dst = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * s + ki) as isize - p as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = (ox * s + kj) as isize - p as isize;
                        if ix >= 0 && ix < g.width as isize {
                            let d = &mut dst[iy as usize * g.width + ix as usize];
                            *d = *d + src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], batch: usize, weight: &[T], g: &ConvGeom) -> Vec<T> {
    let in_img = g.channels * g.height * g.width;
    let out_img = g.out_channels * g.out_plane();
    let mut y = vec![T::zero(); batch * out_img];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch() * g.out_plane()]
    };
    for b in 0..batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let yb = &mut y[b * out_img..(b + 1) * out_img];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(false, false, g.out_channels, g.out_plane(), g.patch(), T::one(), weight, src, T::zero(), yb);
    }
    y
}

pub(crate) fn conv2d_backward<T: Scalar>(
    dy: &[T],
    x: &[T],
    batch: usize,
    weight: &[T],
    g: &ConvGeom,
    mut dweight: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let in_img = g.channels * g.height * g.width;
    let out_img = g.out_channels * g.out_plane();
    let mut dx = want_dx.then(|| vec![T::zero(); batch * in_img]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.patch() * g.out_plane() }];
    let mut dcols = vec![T::zero(); if want_dx && !g.is_pointwise() { g.patch() * g.out_plane() } else { 0 }];
    for b in 0..batch {
        let xb = &x[b * in_img..(b + 1) * in_img];
        let dyb = &dy[b * out_img..(b + 1) * out_img];
        if let Some(dw) = dweight.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(false, true, g.out_channels, g.patch(), g.out_plane(), T::one(), dyb, src, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_img..(b + 1) * in_img];
            if g.is_pointwise() {
                gemm(true, false, g.patch(), g.out_plane(), g.out_channels, T::one(), weight, dyb, T::zero(), dxb);
            } else {
                gemm(true, false, g.patch(), g.out_plane(), g.out_channels, T::one(), weight, dyb, T::zero(), &mut dcols);
                col2im(&dcols, g, dxb);
            }
        }
    }
    dx
}

/// Layout helper: batch-norm statistics are per feature for `(B, F)` inputs
/// and per channel over `(B, H, W)` for `(B, C, H, W)` inputs.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BnLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl BnLayout {
    pub fn count(&self) -> usize {
        self.batch * self.spatial
    }

    fn for_each_channel_slice<F: FnMut(usize, std::ops::Range<usize>)>(&self, mut f: F) {
        for b in 0..self.batch {
            for c in 0..self.channels {
                let start = (b * self.channels + c) * self.spatial;
                f(c, start..start + self.spatial);
            }
        }
    }
}

pub(crate) struct BnForward<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var_unbiased: Vec<T>,
}

pub(crate) fn batchnorm_train_forward<T: Scalar>(
    x: &[T],
    l: &BnLayout,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> BnForward<T> {
    let n = T::of(l.count() as f64);
    let mut mean = vec![T::zero(); l.channels];
    l.for_each_channel_slice(|c, r| {
        mean[c] = mean[c] + x[r].iter().copied().sum::<T>();
    });
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); l.channels];
    l.for_each_channel_slice(|c, r| {
        let m = mean[c];
        var[c] = var[c] + x[r].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    });
    let inv_std: Vec<T> = var.iter().map(|&v| (v / n + eps).sqrt().recip()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    l.for_each_channel_slice(|c, r| {
        for i in r {
            let h = (x[i] - mean[c]) * inv_std[c];
            xhat[i] = h;
            y[i] = gamma[c] * h + beta[c];
        }
    });
    let denom = T::of((l.count().max(2) - 1) as f64);
    BnForward {
        y,
        xhat,
        inv_std,
        batch_mean: mean,
        batch_var_unbiased: var.iter().map(|&v| v / denom).collect(),
    }
}

pub(crate) fn batchnorm_eval_forward<T: Scalar>(
    x: &[T],
    l: &BnLayout,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_std: Vec<T> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    l.for_each_channel_slice(|c, r| {
        for i in r {
            let h = (x[i] - running_mean[c]) * inv_std[c];
            xhat[i] = h;
            y[i] = gamma[c] * h + beta[c];
        }
    });
    (y, xhat, inv_std)
}

/// Accumulates `dgamma`/`dbeta` and returns `dx` when requested. `training`
/// selects between batch statistics (full Jacobian) and frozen running
/// statistics (a per-channel affine map).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    l: &BnLayout,
    training: bool,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let mut sum_dy = vec![T::zero(); l.channels];
    let mut sum_dy_xhat = vec![T::zero(); l.channels];
    l.for_each_channel_slice(|c, r| {
        for i in r {
            sum_dy[c] = sum_dy[c] + dy[i];
            sum_dy_xhat[c] = sum_dy_xhat[c] + dy[i] * xhat[i];
        }
    });
    if let Some(dg) = dgamma {
        for (g, &s) in dg.iter_mut().zip(&sum_dy_xhat) {
            *g = *g + s;
        }
    }
    if let Some(db) = dbeta {
        for (g, &s) in db.iter_mut().zip(&sum_dy) {
            *g = *g + s;
        }
    }
    if !want_dx {
        return None;
    }
    let mut dx = vec![T::zero(); dy.len()];
    let n = T::of(l.count() as f64);
    l.for_each_channel_slice(|c, r| {
        let scale = gamma[c] * inv_std[c];
        for i in r {
            dx[i] = if training {
                scale * (dy[i] - (sum_dy[c] + xhat[i] * sum_dy_xhat[c]) / n)
            } else {
                scale * dy[i]
            };
        }
    });
    Some(dx)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> (Vec<T>, Vec<usize>) {
    let mut y = Vec::with_capacity(planes * out_h * out_w);
    let mut arg = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = base + oy * stride * width + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * width + ox * stride + kx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub(crate) fn softmax_xent_forward<T: Scalar>(
    logits: &[T],
    classes: usize,
    labels: &[usize],
) -> (T, Vec<T>) {
    let mut probs = vec![T::zero(); logits.len()];
    let mut total = T::zero();
    for (b, row) in logits.chunks_exact(classes).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let out = &mut probs[b * classes..(b + 1) * classes];
        let mut z = T::zero();
        for (p, &v) in out.iter_mut().zip(row) {
            *p = (v - max).exp();
            z = z + *p;
        }
        out.iter_mut().for_each(|p| *p = *p / z);
        total = total - (out[labels[b]]).max(T::min_positive_value()).ln();
    }
    (total / T::of(labels.len() as f64), probs)
}
