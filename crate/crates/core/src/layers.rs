//! Convolution and batch-norm layers with hand-written backward passes (f64).

use ndarray::{s, Array1, Array2, Array3, Array4, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

/// A named view of one parameter or buffer tensor.
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
    pub trainable: bool,
}

pub struct TensorMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
    pub trainable: bool,
}

/// Anything that owns named tensors in a fixed order.
pub trait Tensors {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>>;
    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_>>;
}

pub(crate) fn tref<'a, D: ndarray::Dimension>(
    name: String,
    a: &'a ndarray::Array<f64, D>,
    trainable: bool,
) -> TensorRef<'a> {
    TensorRef {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
        trainable,
    }
}

pub(crate) fn tmut<'a, D: ndarray::Dimension>(
    name: String,
    a: &'a mut ndarray::Array<f64, D>,
    trainable: bool,
) -> TensorMut<'a> {
    TensorMut {
        name,
        shape: a.shape().to_vec(),
        data: a.as_slice_mut().expect("standard layout"),
        trainable,
    }
}

/// Whether batch statistics (training) or running statistics (inference) are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out, in, k, k)`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Kaiming fan-in initialization, zero bias.
    pub fn new<R: Rng>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Array4::from_shape_simple_fn((out_ch, in_ch, kernel, kernel), || {
            rng.sample::<f64, _>(StandardNormal) * std
        });
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
            padding,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Array4::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array3<f64>) -> Array2<f64> {
        let (c, h, w) = x.dim();
        let k = self.kernel();
        let (oh, ow) = self.out_size(h, w);
        let mut cols = Array2::zeros((c * k * k, oh * ow));
        let pad = self.padding as isize;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
        let k = self.kernel();
        let (oh, ow) = self.out_size(h, w);
        let mut x = Array3::zeros((c, h, w));
        let pad = self.padding as isize;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let src = cols.row((ci * k + ky) * k + kx);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                x[[ci, iy as usize, ix as usize]] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    fn weight_matrix(&self) -> ndarray::ArrayView2<'_, f64> {
        let (o, i, k, _) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous weight")
    }

    /// Forward pass returning the output and the im2col matrix needed for backward.
    pub fn forward_cached(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let (oh, ow) = self.out_size(h, w);
        let cols = self.im2col(x);
        let mut y = self.weight_matrix().dot(&cols);
        for (mut row, &b) in y.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        let y = y
            .into_shape_with_order((self.out_channels(), oh, ow))
            .expect("output shape");
        (y, cols)
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        self.forward_cached(x).0
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient
    /// when `need_input` is set.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        in_shape: (usize, usize, usize),
        grad_out: &Array3<f64>,
        grads: &mut Conv2d,
        need_input: bool,
    ) -> Option<Array3<f64>> {
        let (o, oh, ow) = grad_out.dim();
        let g = grad_out
            .view()
            .into_shape_with_order((o, oh * ow))
            .expect("contiguous gradient");
        let dw = g.dot(&cols.t());
        let (_, i, k, _) = self.weight.dim();
        let mut gw = grads
            .weight
            .view_mut()
            .into_shape_with_order((o, i * k * k))
            .expect("contiguous weight");
        gw += &dw;
        grads.bias += &g.sum_axis(Axis(1));
        if need_input {
            let dcols = self.weight_matrix().t().dot(&g);
            let (c, h, w) = in_shape;
            Some(self.col2im(&dcols, c, h, w))
        } else {
            None
        }
    }
}

impl Tensors for Conv2d {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        vec![
            tref(format!("{prefix}.weight"), &self.weight, true),
            tref(format!("{prefix}.bias"), &self.bias, true),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_>> {
        vec![
            tmut(format!("{prefix}.weight"), &mut self.weight, true),
            tmut(format!("{prefix}.bias"), &mut self.bias, true),
        ]
    }
}

/// 2×2 max pooling with stride 2 (inference only; used by frozen backbones).
pub fn max_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array3::from_shape_fn((c, oh, ow), |(ci, y, xx)| {
        let win = x.slice(s![ci, 2 * y..2 * y + 2, 2 * xx..2 * xx + 2]);
        win.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    })
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Per-channel batch normalization over (batch, height, width).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Saved values from a batch-norm forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub normalized: Vec<Array3<f64>>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub inv_std: Array1<f64>,
    pub count: usize,
    pub mode: Mode,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let c = self.gamma.len();
        Self {
            gamma: Array1::zeros(c),
            beta: Array1::zeros(c),
            running_mean: Array1::zeros(c),
            running_var: Array1::zeros(c),
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    pub fn forward(&self, xs: &[Array3<f64>], mode: Mode) -> (Vec<Array3<f64>>, BatchNormCache) {
        let c = self.gamma.len();
        let per_image = xs.first().map(|x| x.dim().1 * x.dim().2).unwrap_or(0);
        let count = per_image * xs.len();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<f64>::zeros(c);
                for x in xs {
                    mean += &x.sum_axis(Axis(2)).sum_axis(Axis(1));
                }
                mean /= count as f64;
                let mut var = Array1::<f64>::zeros(c);
                for x in xs {
                    for (ch, plane) in x.axis_iter(Axis(0)).enumerate() {
                        var[ch] += plane.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                var /= count as f64;
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut normalized = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for x in xs {
            let mut xhat = x.clone();
            let mut y = x.clone();
            for ch in 0..c {
                let (m, s, g, b) = (mean[ch], inv_std[ch], self.gamma[ch], self.beta[ch]);
                xhat.index_axis_mut(Axis(0), ch).mapv_inplace(|v| (v - m) * s);
                let xh = xhat.index_axis(Axis(0), ch);
                y.index_axis_mut(Axis(0), ch)
                    .zip_mut_with(&xh, |yv, &h| *yv = g * h + b);
            }
            normalized.push(xhat);
            out.push(y);
        }
        (
            out,
            BatchNormCache {
                normalized,
                mean,
                var,
                inv_std,
                count,
                mode,
            },
        )
    }

    /// Exponential moving update of the running statistics (unbiased variance).
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Train || cache.count == 0 {
            return;
        }
        let n = cache.count as f64;
        let unbias = if cache.count > 1 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &cache.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &(&cache.var * (m * unbias));
    }

    pub fn backward(
        &self,
        cache: &BatchNormCache,
        grad_out: &[Array3<f64>],
        grads: &mut BatchNorm,
    ) -> Vec<Array3<f64>> {
        let c = self.gamma.len();
        let mut sum_dy = Array1::<f64>::zeros(c);
        let mut sum_dy_xhat = Array1::<f64>::zeros(c);
        for (g, xhat) in grad_out.iter().zip(&cache.normalized) {
            for ch in 0..c {
                let gp = g.index_axis(Axis(0), ch);
                let hp = xhat.index_axis(Axis(0), ch);
                sum_dy[ch] += gp.sum();
                sum_dy_xhat[ch] += gp.iter().zip(hp.iter()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        grads.beta += &sum_dy;
        grads.gamma += &sum_dy_xhat;

        let n = cache.count as f64;
        grad_out
            .iter()
            .zip(&cache.normalized)
            .map(|(g, xhat)| {
                let mut dx = g.clone();
                for ch in 0..c {
                    let scale = self.gamma[ch] * cache.inv_std[ch];
                    let mut plane = dx.index_axis_mut(Axis(0), ch);
                    match cache.mode {
                        Mode::Eval => plane.mapv_inplace(|v| v * scale),
                        Mode::Train => {
                            let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                            let hp = xhat.index_axis(Axis(0), ch);
                            plane.zip_mut_with(&hp, |v, &h| {
                                *v = scale / n * (n * *v - sd - h * sdx);
                            });
                        }
                    }
                }
                dx
            })
            .collect()
    }
}

impl Tensors for BatchNorm {
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>> {
        vec![
            tref(format!("{prefix}.gamma"), &self.gamma, true),
            tref(format!("{prefix}.beta"), &self.beta, true),
            tref(format!("{prefix}.running_mean"), &self.running_mean, false),
            tref(format!("{prefix}.running_var"), &self.running_var, false),
        ]
    }

    fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorMut<'_>> {
        vec![
            tmut(format!("{prefix}.gamma"), &mut self.gamma, true),
            tmut(format!("{prefix}.beta"), &mut self.beta, true),
            tmut(format!("{prefix}.running_mean"), &mut self.running_mean, false),
            tmut(format!("{prefix}.running_var"), &mut self.running_var, false),
        ]
    }
}
