//! Layers with hand-written backward passes.
//!
//! Every layer has a caching `forward_train` that records what its
//! `backward` needs, and a side-effect-free `forward_eval`. A layer is
//! used at most once per training step, so a single cache slot suffices.

use rand::Rng;

use super::matrix::{gemm, matmul, Matrix};
use super::param::{join, Module, Param};

/// NHWC activation: `data.rows == n * h * w`, `data.cols == channels`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Matrix,
}

impl FeatureMap {
    pub fn new(n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> Self {
        Self {
            n,
            h,
            w,
            data: Matrix::from_vec(n * h * w, c, data),
        }
    }

    pub fn channels(&self) -> usize {
        self.data.cols
    }
}

// ---------------------------------------------------------------------------
// Linear

#[derive(Clone, Debug)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `in_dim × out_dim`, row-major.
    pub weight: Param,
    pub bias: Param,
    input: Option<Matrix>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f32).sqrt();
        Self {
            in_dim,
            out_dim,
            weight: Param::uniform(in_dim * out_dim, bound, rng),
            bias: Param::uniform(out_dim, bound, rng),
            input: None,
        }
    }

    pub fn forward_eval(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.in_dim, "linear input width mismatch");
        let mut out = Matrix::zeros(x.rows, self.out_dim);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&self.bias.value);
        }
        gemm(
            1.0,
            &x.data,
            x.rows,
            x.cols,
            false,
            &self.weight.value,
            self.in_dim,
            self.out_dim,
            false,
            1.0,
            &mut out.data,
        );
        out
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Matrix {
        let out = self.forward_eval(x);
        self.input = Some(x.clone());
        out
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, dy: &Matrix) -> Matrix {
        let x = self.input.take().expect("linear backward without forward");
        assert_eq!((dy.rows, dy.cols), (x.rows, self.out_dim));
        gemm(
            1.0,
            &x.data,
            x.rows,
            x.cols,
            true,
            &dy.data,
            dy.rows,
            dy.cols,
            false,
            1.0,
            &mut self.weight.grad,
        );
        for r in 0..dy.rows {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let w = Matrix::from_vec(self.in_dim, self.out_dim, self.weight.value.clone());
        matmul(dy, false, &w, true)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

// ---------------------------------------------------------------------------
// Batch normalization

#[derive(Clone, Debug)]
enum NormCache {
    Batch { xhat: Matrix, inv_std: Vec<f32> },
    PerSample { xhat: Matrix, inv_std: Vec<f32> },
}

/// Batch normalization over rows, per column.
///
/// When `per_sample_below` is set and a training batch has fewer rows than
/// that, statistics are taken per row across features instead (batch
/// statistics of a handful of samples are degenerate). Running statistics
/// are left untouched in that case.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f32,
    pub eps: f32,
    pub per_sample_below: Option<usize>,
    cache: Option<NormCache>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::new(vec![0.0; channels]),
            running_mean: Param::buffer(vec![0.0; channels]),
            running_var: Param::buffer(vec![1.0; channels]),
            momentum: 0.1,
            eps: 1e-5,
            per_sample_below: None,
            cache: None,
        }
    }

    pub fn with_per_sample_fallback(mut self, below: usize) -> Self {
        self.per_sample_below = Some(below);
        self
    }

    pub fn forward_eval(&self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.channels, "batch-norm width mismatch");
        let scale: Vec<f32> = (0..self.channels)
            .map(|c| self.gamma.value[c] / (self.running_var.value[c] + self.eps).sqrt())
            .collect();
        let shift: Vec<f32> = (0..self.channels)
            .map(|c| self.beta.value[c] - self.running_mean.value[c] * scale[c])
            .collect();
        let mut out = x.clone();
        for r in 0..out.rows {
            for ((v, s), b) in out.row_mut(r).iter_mut().zip(&scale).zip(&shift) {
                *v = *v * s + b;
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Matrix) -> Matrix {
        assert_eq!(x.cols, self.channels, "batch-norm width mismatch");
        if matches!(self.per_sample_below, Some(t) if x.rows < t) {
            return self.forward_per_sample(x);
        }
        let (n, c) = (x.rows, x.cols);
        let mut mean = vec![0.0f64; c];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(x.row(r)) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0f64; c];
        for r in 0..n {
            for ((s, &v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let biased: Vec<f64> = var.iter().map(|s| s / n as f64).collect();
        let inv_std: Vec<f32> = biased
            .iter()
            .map(|v| (1.0 / (v + self.eps as f64).sqrt()) as f32)
            .collect();
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        for r in 0..n {
            let xr = x.row(r);
            let hr = xhat.row_mut(r);
            for j in 0..c {
                hr[j] = (xr[j] - mean[j] as f32) * inv_std[j];
            }
            let hr = xhat.row(r).to_vec();
            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = self.gamma.value[j] * hr[j] + self.beta.value[j];
            }
        }
        let m = self.momentum;
        for j in 0..c {
            let unbiased = if n > 1 {
                var[j] / (n - 1) as f64
            } else {
                biased[j]
            };
            self.running_mean.value[j] = (1.0 - m) * self.running_mean.value[j] + m * mean[j] as f32;
            self.running_var.value[j] = (1.0 - m) * self.running_var.value[j] + m * unbiased as f32;
        }
        self.cache = Some(NormCache::Batch { xhat, inv_std });
        out
    }

    fn forward_per_sample(&mut self, x: &Matrix) -> Matrix {
        let (n, c) = (x.rows, x.cols);
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let xr = x.row(r);
            let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = xr.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let is = (1.0 / (var + self.eps as f64).sqrt()) as f32;
            inv_std.push(is);
            for j in 0..c {
                let h = (xr[j] - mean as f32) * is;
                xhat.data[r * c + j] = h;
                out.data[r * c + j] = self.gamma.value[j] * h + self.beta.value[j];
            }
        }
        self.cache = Some(NormCache::PerSample { xhat, inv_std });
        out
    }

    pub fn backward(&mut self, dy: &Matrix) -> Matrix {
        let cache = self.cache.take().expect("batch-norm backward without forward");
        let (n, c) = (dy.rows, dy.cols);
        match cache {
            NormCache::Batch { xhat, inv_std } => {
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for r in 0..n {
                    let (d, h) = (dy.row(r), xhat.row(r));
                    for j in 0..c {
                        sum_dy[j] += d[j] as f64;
                        sum_dy_xhat[j] += (d[j] * h[j]) as f64;
                    }
                }
                for j in 0..c {
                    self.gamma.grad[j] += sum_dy_xhat[j] as f32;
                    self.beta.grad[j] += sum_dy[j] as f32;
                }
                let coef: Vec<f32> = (0..c)
                    .map(|j| self.gamma.value[j] * inv_std[j] / n as f32)
                    .collect();
                let sum_dy: Vec<f32> = sum_dy.iter().map(|&s| s as f32).collect();
                let sum_dyx: Vec<f32> = sum_dy_xhat.iter().map(|&s| s as f32).collect();
                let mut dx = Matrix::zeros(n, c);
                for r in 0..n {
                    let (d, h) = (dy.row(r), xhat.row(r));
                    let o = dx.row_mut(r);
                    for j in 0..c {
                        o[j] = coef[j] * (n as f32 * d[j] - sum_dy[j] - h[j] * sum_dyx[j]);
                    }
                }
                dx
            }
            NormCache::PerSample { xhat, inv_std } => {
                let mut dx = Matrix::zeros(n, c);
                for r in 0..n {
                    let (d, h) = (dy.row(r), xhat.row(r));
                    let mut dxhat = vec![0.0f32; c];
                    for j in 0..c {
                        self.gamma.grad[j] += d[j] * h[j];
                        self.beta.grad[j] += d[j];
                        dxhat[j] = d[j] * self.gamma.value[j];
                    }
                    let s1: f32 = dxhat.iter().sum();
                    let s2: f32 = dxhat.iter().zip(h).map(|(a, b)| a * b).sum();
                    let o = dx.row_mut(r);
                    for j in 0..c {
                        o[j] = inv_std[r] / c as f32 * (c as f32 * dxhat[j] - s1 - h[j] * s2);
                    }
                }
                dx
            }
        }
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

// ---------------------------------------------------------------------------
// Elementwise

pub fn relu_inplace(x: &mut Matrix) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` by `out > 0`, where `out` is the ReLU output.
pub fn relu_backward_inplace(dy: &mut Matrix, out: &Matrix) {
    for (d, &o) in dy.data.iter_mut().zip(&out.data) {
        if o <= 0.0 {
            *d = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution

#[derive(Clone, Debug)]
struct ConvCache {
    cols: Matrix,
    n: usize,
    h: usize,
    w: usize,
}

/// 2-D convolution over NHWC maps via im2col + sgemm. No bias: every conv
/// in the backbone is followed by batch normalization.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `(kernel * kernel * cin) × cout`; row index is `(ky * k + kx) * cin + ci`.
    pub weight: Param,
    cache: Option<ConvCache>,
}

impl Conv2d {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        // He-uniform for ReLU networks.
        let bound = (6.0 / fan_in as f32).sqrt();
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            weight: Param::uniform(fan_in * cout, bound, rng),
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &FeatureMap) -> Matrix {
        let (k, s, p, cin) = (self.kernel, self.stride, self.pad, self.cin);
        let (ho, wo) = self.output_size(x.h, x.w);
        let width = k * k * cin;
        let mut cols = Matrix::zeros(x.n * ho * wo, width);
        for n in 0..x.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (n * ho + oy) * wo + ox;
                    let dst = &mut cols.data[row * width..(row + 1) * width];
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let src = ((n * x.h + iy as usize) * x.w + ix as usize) * cin;
                            let off = (ky * k + kx) * cin;
                            dst[off..off + cin].copy_from_slice(&x.data.data[src..src + cin]);
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Matrix, n: usize, h: usize, w: usize) -> FeatureMap {
        let (k, s, p, cin) = (self.kernel, self.stride, self.pad, self.cin);
        let (ho, wo) = self.output_size(h, w);
        let width = k * k * cin;
        let mut dx = vec![0.0f32; n * h * w * cin];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    let src = &dcols.data[row * width..(row + 1) * width];
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let dst = ((b * h + iy as usize) * w + ix as usize) * cin;
                            let off = (ky * k + kx) * cin;
                            for c in 0..cin {
                                dx[dst + c] += src[off + c];
                            }
                        }
                    }
                }
            }
        }
        FeatureMap::new(n, h, w, cin, dx)
    }

    fn apply(&self, cols: &Matrix, n: usize, ho: usize, wo: usize) -> FeatureMap {
        let mut out = vec![0.0f32; cols.rows * self.cout];
        gemm(
            1.0,
            &cols.data,
            cols.rows,
            cols.cols,
            false,
            &self.weight.value,
            cols.cols,
            self.cout,
            false,
            0.0,
            &mut out,
        );
        FeatureMap::new(n, ho, wo, self.cout, out)
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels(), self.cin, "conv input channel mismatch");
        let (ho, wo) = self.output_size(x.h, x.w);
        let cols = self.im2col(x);
        self.apply(&cols, x.n, ho, wo)
    }

    pub fn forward_train(&mut self, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels(), self.cin, "conv input channel mismatch");
        let (ho, wo) = self.output_size(x.h, x.w);
        let cols = self.im2col(x);
        let out = self.apply(&cols, x.n, ho, wo);
        self.cache = Some(ConvCache {
            cols,
            n: x.n,
            h: x.h,
            w: x.w,
        });
        out
    }

    /// Accumulates the weight gradient; returns the input gradient when
    /// `need_input_grad` (the stem skips it).
    pub fn backward(&mut self, dy: &FeatureMap, need_input_grad: bool) -> Option<FeatureMap> {
        let cache = self.cache.take().expect("conv backward without forward");
        let cols = &cache.cols;
        gemm(
            1.0,
            &cols.data,
            cols.rows,
            cols.cols,
            true,
            &dy.data.data,
            dy.data.rows,
            dy.data.cols,
            false,
            1.0,
            &mut self.weight.grad,
        );
        if !need_input_grad {
            return None;
        }
        let mut dcols = Matrix::zeros(cols.rows, cols.cols);
        gemm(
            1.0,
            &dy.data.data,
            dy.data.rows,
            dy.data.cols,
            false,
            &self.weight.value,
            cols.cols,
            self.cout,
            true,
            0.0,
            &mut dcols.data,
        );
        Some(self.col2im(&dcols, cache.n, cache.h, cache.w))
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
    }
}

// ---------------------------------------------------------------------------
// Pooling

/// Mean over spatial positions: `n×h×w×c → n×c`.
pub fn global_avg_pool(x: &FeatureMap) -> Matrix {
    let c = x.channels();
    let hw = x.h * x.w;
    let mut out = Matrix::zeros(x.n, c);
    for n in 0..x.n {
        let o = out.row_mut(n);
        for p in 0..hw {
            for (a, v) in o.iter_mut().zip(x.data.row(n * hw + p)) {
                *a += v;
            }
        }
        o.iter_mut().for_each(|a| *a /= hw as f32);
    }
    out
}

pub fn global_avg_pool_backward(dy: &Matrix, h: usize, w: usize) -> FeatureMap {
    let hw = h * w;
    let c = dy.cols;
    let mut dx = vec![0.0f32; dy.rows * hw * c];
    for n in 0..dy.rows {
        for p in 0..hw {
            let dst = &mut dx[(n * hw + p) * c..(n * hw + p + 1) * c];
            for (d, g) in dst.iter_mut().zip(dy.row(n)) {
                *d = g / hw as f32;
            }
        }
    }
    FeatureMap::new(dy.rows, h, w, c, dx)
}
