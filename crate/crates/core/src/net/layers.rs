//! Layer primitives with hand-written backward passes. Activations are NCHW.

use rand::Rng;

use crate::net::float::{gemm, MatRef};
use crate::net::{Float, Tensor};

/// Element budget for one im2col buffer; larger images are processed in row bands.
const COL_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor (or a running statistic when `trainable` is false).
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Float> Param<T> {
    fn new(shape: Vec<usize>, value: Vec<T>, trainable: bool) -> Self {
        let n = value.len();
        debug_assert_eq!(n, shape.iter().product::<usize>());
        Param {
            shape,
            value,
            grad: vec![T::zero(); n],
            trainable,
        }
    }

    fn filled(shape: Vec<usize>, v: T, trainable: bool) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n], trainable)
    }

    fn gaussian(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::from_f64_lossy(std * sample_normal(rng)))
            .collect();
        Self::new(shape, value, true)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Visitor over named parameters.
pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;

/// Standard normal sample by Box-Muller.
fn sample_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sliding-window geometry shared by convolution and its transpose.
#[derive(Debug, Clone, Copy)]
struct Window {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Window {
    fn rows_per_band(&self) -> usize {
        let per_row = self.channels * self.kernel * self.kernel * self.out_w;
        (COL_BUDGET / per_row.max(1)).clamp(1, self.out_h.max(1))
    }

    /// Unfolds output rows `r0..r1` into `cols`, laid out `[C*k*k, (r1-r0)*out_w]`.
    fn im2col<T: Float>(&self, img: &[T], r0: usize, r1: usize, cols: &mut Vec<T>) {
        let k = self.kernel;
        let len = (r1 - r0) * self.out_w;
        cols.clear();
        cols.resize(self.channels * k * k * len, T::zero());
        for c in 0..self.channels {
            let plane = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * len..][..len];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[ri * self.out_w..(ri + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: accumulates `cols` back into `img`.
    fn col2im_add<T: Float>(&self, cols: &[T], r0: usize, r1: usize, img: &mut [T]) {
        let k = self.kernel;
        let len = (r1 - r0) * self.out_w;
        for c in 0..self.channels {
            let plane = &mut img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * len..][..len];
                    for (ri, oy) in (r0..r1).enumerate() {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst =
                            &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, &v) in row[ri * self.out_w..(ri + 1) * self.out_w]
                            .iter()
                            .enumerate()
                        {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.width as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<T: Float>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, &b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane]
            .iter_mut()
            .for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad<T: Float>(grad: &mut [T], dy: &[T], plane: usize) {
    for (c, g) in grad.iter_mut().enumerate() {
        *g += dy[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

fn dims4<T: Copy + Default>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected NCHW tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

/// 2-D convolution, weights `[out, in, k, k]`, symmetric zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Float> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init_std: f64,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            weight: Param::gaussian(
                vec![out_channels, in_channels, kernel, kernel],
                init_std,
                rng,
            ),
            bias: with_bias.then(|| Param::filled(vec![out_channels], T::zero(), true)),
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn window(&self, h: usize, w: usize) -> Window {
        let (out_h, out_w) = self.output_size(h, w);
        Window {
            channels: self.in_channels,
            height: h,
            width: w,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            out_h,
            out_w,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = dims4(x);
        assert_eq!(c, self.in_channels, "conv input channels");
        let win = self.window(h, w);
        let (oh, ow) = (win.out_h, win.out_w);
        let plane = oh * ow;
        let ckk = c * self.kernel * self.kernel;
        let mut out = Tensor::zeros(vec![n, self.out_channels, oh, ow]);
        let band = win.rows_per_band();
        let mut cols = Vec::new();
        for b in 0..n {
            let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let ob = &mut out.data_mut()
                [b * self.out_channels * plane..(b + 1) * self.out_channels * plane];
            let mut r0 = 0;
            while r0 < oh {
                let r1 = (r0 + band).min(oh);
                win.im2col(xb, r0, r1, &mut cols);
                let len = (r1 - r0) * ow;
                gemm(
                    T::one(),
                    MatRef::new(&self.weight.value, self.out_channels, ckk, ckk),
                    MatRef::new(&cols, ckk, len, len),
                    T::zero(),
                    &mut ob[r0 * ow..],
                    plane,
                );
                r0 = r1;
            }
            if let Some(bias) = &self.bias {
                add_channel_bias(ob, &bias.value, plane);
            }
        }
        out
    }

    pub fn forward(&mut self, x: Tensor<T>) -> Tensor<T> {
        let y = self.infer(&x);
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self.input.as_ref().expect("conv backward without forward");
        let (n, c, h, w) = dims4(x);
        let win = self.window(h, w);
        let (oh, ow) = (win.out_h, win.out_w);
        assert_eq!(
            dy.shape(),
            &[n, self.out_channels, oh, ow],
            "conv grad shape"
        );
        let plane = oh * ow;
        let ckk = c * self.kernel * self.kernel;
        let oc = self.out_channels;
        let mut dx = Tensor::zeros(vec![n, c, h, w]);
        let band = win.rows_per_band();
        let mut cols = Vec::new();
        let mut dcols = Vec::new();
        for b in 0..n {
            let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let dyb = &dy.data()[b * oc * plane..(b + 1) * oc * plane];
            let dxb = &mut dx.data_mut()[b * c * h * w..(b + 1) * c * h * w];
            let mut r0 = 0;
            while r0 < oh {
                let r1 = (r0 + band).min(oh);
                let len = (r1 - r0) * ow;
                win.im2col(xb, r0, r1, &mut cols);
                let dy_band = MatRef::new(&dyb[r0 * ow..], oc, len, plane);
                gemm(
                    T::one(),
                    dy_band,
                    MatRef::new(&cols, ckk, len, len).t(),
                    T::one(),
                    &mut self.weight.grad,
                    ckk,
                );
                dcols.clear();
                dcols.resize(ckk * len, T::zero());
                gemm(
                    T::one(),
                    MatRef::new(&self.weight.value, oc, ckk, ckk).t(),
                    dy_band,
                    T::zero(),
                    &mut dcols,
                    len,
                );
                win.col2im_add(&dcols, r0, r1, dxb);
                r0 = r1;
            }
            if let Some(bias) = &mut self.bias {
                accumulate_bias_grad(&mut bias.grad, dyb, plane);
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

/// Transposed convolution (fractionally strided), weights `[in, out, k, k]`.
/// Output size is `(h - 1) * stride - 2 * pad + k + output_pad`, which for
/// stride 2, kernel 5, pad 2, output_pad 1 is exactly `2h`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Float> ConvTranspose2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        init_std: f64,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            output_pad: stride - 1,
            weight: Param::gaussian(
                vec![in_channels, out_channels, kernel, kernel],
                init_std,
                rng,
            ),
            bias: with_bias.then(|| Param::filled(vec![out_channels], T::zero(), true)),
            input: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |v: usize| (v - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad;
        (f(h), f(w))
    }

    /// The forward-convolution geometry this layer is the adjoint of.
    fn window(&self, h: usize, w: usize) -> Window {
        let (oh, ow) = self.output_size(h, w);
        Window {
            channels: self.out_channels,
            height: oh,
            width: ow,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            out_h: h,
            out_w: w,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = dims4(x);
        assert_eq!(c, self.in_channels, "deconv input channels");
        let win = self.window(h, w);
        let (oh, ow) = (win.height, win.width);
        let okk = self.out_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros(vec![n, self.out_channels, oh, ow]);
        let out_plane = oh * ow;
        let band = win.rows_per_band();
        let mut cols = Vec::new();
        for b in 0..n {
            let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let ob = &mut out.data_mut()
                [b * self.out_channels * out_plane..(b + 1) * self.out_channels * out_plane];
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + band).min(h);
                let len = (r1 - r0) * w;
                cols.clear();
                cols.resize(okk * len, T::zero());
                gemm(
                    T::one(),
                    MatRef::new(&self.weight.value, c, okk, okk).t(),
                    MatRef::new(&xb[r0 * w..], c, len, h * w),
                    T::zero(),
                    &mut cols,
                    len,
                );
                win.col2im_add(&cols, r0, r1, ob);
                r0 = r1;
            }
            if let Some(bias) = &self.bias {
                add_channel_bias(ob, &bias.value, out_plane);
            }
        }
        out
    }

    pub fn forward(&mut self, x: Tensor<T>) -> Tensor<T> {
        let y = self.infer(&x);
        self.input = Some(x);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let x = self
            .input
            .as_ref()
            .expect("deconv backward without forward");
        let (n, c, h, w) = dims4(x);
        let win = self.window(h, w);
        let (oh, ow) = (win.height, win.width);
        let oc = self.out_channels;
        assert_eq!(dy.shape(), &[n, oc, oh, ow], "deconv grad shape");
        let okk = oc * self.kernel * self.kernel;
        let out_plane = oh * ow;
        let mut dx = Tensor::zeros(vec![n, c, h, w]);
        let band = win.rows_per_band();
        let mut cols = Vec::new();
        for b in 0..n {
            let xb = &x.data()[b * c * h * w..(b + 1) * c * h * w];
            let dyb = &dy.data()[b * oc * out_plane..(b + 1) * oc * out_plane];
            let dxb = &mut dx.data_mut()[b * c * h * w..(b + 1) * c * h * w];
            let mut r0 = 0;
            while r0 < h {
                let r1 = (r0 + band).min(h);
                let len = (r1 - r0) * w;
                win.im2col(dyb, r0, r1, &mut cols);
                let cols_m = MatRef::new(&cols, okk, len, len);
                gemm(
                    T::one(),
                    MatRef::new(&self.weight.value, c, okk, okk),
                    cols_m,
                    T::zero(),
                    &mut dxb[r0 * w..],
                    h * w,
                );
                gemm(
                    T::one(),
                    MatRef::new(&xb[r0 * w..], c, len, h * w),
                    cols_m.t(),
                    T::one(),
                    &mut self.weight.grad,
                    okk,
                );
                r0 = r1;
            }
            if let Some(bias) = &mut self.bias {
                accumulate_bias_grad(&mut bias.grad, dyb, out_plane);
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}.bias"), b);
        }
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct NormCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
    mode: Mode,
    shape: (usize, usize, usize, usize),
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    cache: Option<NormCache<T>>,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::filled(vec![channels], T::one(), true),
            beta: Param::filled(vec![channels], T::zero(), true),
            running_mean: Param::filled(vec![channels], T::zero(), false),
            running_var: Param::filled(vec![channels], T::one(), false),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (n, c, h, w) = dims4(x);
        assert_eq!(c, self.channels, "batchnorm channels");
        let plane = h * w;
        let eps = T::from_f64_lossy(BN_EPS);
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let scale = self.gamma.value[ch] / (self.running_var.value[ch] + eps).sqrt();
                let shift = self.beta.value[ch] - self.running_mean.value[ch] * scale;
                y.data_mut()[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let (n, c, h, w) = dims4(&x);
        assert_eq!(c, self.channels, "batchnorm channels");
        let plane = h * w;
        let count = n * plane;
        let eps = T::from_f64_lossy(BN_EPS);
        let (mean, var) = match mode {
            Mode::Eval => (
                self.running_mean.value.clone(),
                self.running_var.value.clone(),
            ),
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        s += x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|v| v.to_f64_lossy())
                            .sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0f64;
                    for b in 0..n {
                        ss += x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .map(|v| (v.to_f64_lossy() - m).powi(2))
                            .sum::<f64>();
                    }
                    let v = ss / count as f64;
                    mean[ch] = T::from_f64_lossy(m);
                    var[ch] = T::from_f64_lossy(v);
                    let unbiased = if count > 1 {
                        v * count as f64 / (count - 1) as f64
                    } else {
                        v
                    };
                    let mom = BN_MOMENTUM;
                    let rm = &mut self.running_mean.value[ch];
                    *rm = T::from_f64_lossy(mom * rm.to_f64_lossy() + (1.0 - mom) * m);
                    let rv = &mut self.running_var.value[ch];
                    *rv = T::from_f64_lossy(mom * rv.to_f64_lossy() + (1.0 - mom) * unbiased);
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut normalized = x.into_vec();
        for b in 0..n {
            for ch in 0..c {
                normalized[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean[ch]) * inv_std[ch]);
            }
        }
        let mut y = normalized.clone();
        for b in 0..n {
            for ch in 0..c {
                let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                y[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * g + bt);
            }
        }
        self.cache = Some(NormCache {
            normalized,
            inv_std,
            mode,
            shape: (n, c, h, w),
        });
        Tensor::from_vec(vec![n, c, h, w], y).expect("shape preserved")
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self
            .cache
            .as_ref()
            .expect("batchnorm backward without forward");
        let (n, c, h, w) = cache.shape;
        assert_eq!(dy.shape(), &[n, c, h, w], "batchnorm grad shape");
        let plane = h * w;
        let count = T::from_usize(n * plane).expect("count fits");
        let mut dx = vec![T::zero(); n * c * plane];
        for ch in 0..c {
            let g = self.gamma.value[ch];
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for (&d, &xh) in dy.data()[r.clone()].iter().zip(&cache.normalized[r]) {
                    sum_dy += d;
                    sum_dy_xhat += d * xh;
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let inv = cache.inv_std[ch];
            for b in 0..n {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                let src = dy.data()[r.clone()]
                    .iter()
                    .zip(&cache.normalized[r.clone()]);
                for (out, (&d, &xh)) in dx[r].iter_mut().zip(src) {
                    *out = match cache.mode {
                        Mode::Eval => d * g * inv,
                        Mode::Train => g * inv * (d - sum_dy / count - xh * sum_dy_xhat / count),
                    };
                }
            }
        }
        Tensor::from_vec(vec![n, c, h, w], dx).expect("shape preserved")
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    LeakyRelu,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct Activation<T> {
    pub kind: ActivationKind,
    /// Input for the rectifiers, output for the sigmoid.
    cache: Option<Tensor<T>>,
}

impl<T: Float> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind, cache: None }
    }

    #[inline]
    fn apply(kind: ActivationKind, v: T) -> T {
        match kind {
            ActivationKind::LeakyRelu => {
                if v > T::zero() {
                    v
                } else {
                    v * T::from_f64_lossy(LEAKY_SLOPE)
                }
            }
            ActivationKind::Relu => v.max(T::zero()),
            ActivationKind::Sigmoid => T::one() / (T::one() + (-v).exp()),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        let kind = self.kind;
        y.data_mut()
            .iter_mut()
            .for_each(|v| *v = Self::apply(kind, *v));
        y
    }

    pub fn forward(&mut self, x: Tensor<T>) -> Tensor<T> {
        let y = self.infer(&x);
        self.cache = Some(match self.kind {
            ActivationKind::Sigmoid => y.clone(),
            _ => x,
        });
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cached = self
            .cache
            .as_ref()
            .expect("activation backward without forward");
        let slope = T::from_f64_lossy(LEAKY_SLOPE);
        let mut dx = dy.clone();
        for (d, &c) in dx.data_mut().iter_mut().zip(cached.data()) {
            *d = match self.kind {
                ActivationKind::LeakyRelu => {
                    if c > T::zero() {
                        *d
                    } else {
                        *d * slope
                    }
                }
                ActivationKind::Relu => {
                    if c > T::zero() {
                        *d
                    } else {
                        T::zero()
                    }
                }
                ActivationKind::Sigmoid => *d * c * (T::one() - c),
            };
        }
        dx
    }

    /// Folds the sign pattern of the last rectifier input into `hash`, so a
    /// caller can tell whether two evaluations sit on the same linear piece.
    fn fold_kinks(&self, hash: &mut u64) {
        if self.kind == ActivationKind::Sigmoid {
            return;
        }
        if let Some(x) = &self.cache {
            for (i, v) in x.data().iter().enumerate() {
                if *v > T::zero() {
                    *hash ^= (i as u64).wrapping_add(0x9e37_79b9_7f4a_7c15);
                    *hash = hash.wrapping_mul(0x100_0000_01b3);
                }
            }
            *hash = hash.rotate_left(7) ^ x.len() as u64;
        }
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// `x + bn(conv(relu(bn(conv(x)))))` with 3x3 same-size convolutions.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub norm1: BatchNorm2d<T>,
    pub act: Activation<T>,
    pub conv2: Conv2d<T>,
    pub norm2: BatchNorm2d<T>,
}

impl<T: Float> ResidualBlock<T> {
    pub fn new(channels: usize, kernel: usize, init_std: f64, rng: &mut impl Rng) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(channels, channels, kernel, 1, init_std, true, rng),
            norm1: BatchNorm2d::new(channels),
            act: Activation::new(ActivationKind::Relu),
            conv2: Conv2d::new(channels, channels, kernel, 1, init_std, true, rng),
            norm2: BatchNorm2d::new(channels),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let h = self.conv1.infer(x);
        let h = self.norm1.infer(&h);
        let h = self.act.infer(&h);
        let h = self.conv2.infer(&h);
        let mut y = self.norm2.infer(&h);
        y.add_assign(x);
        y
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        let skip = x.clone();
        let h = self.conv1.forward(x);
        let h = self.norm1.forward(h, mode);
        let h = self.act.forward(h);
        let h = self.conv2.forward(h);
        let mut y = self.norm2.forward(h, mode);
        y.add_assign(&skip);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let g = self.norm2.backward(dy);
        let g = self.conv2.backward(&g);
        let g = self.act.backward(&g);
        let g = self.norm1.backward(&g);
        let mut dx = self.conv1.backward(&g);
        dx.add_assign(dy);
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv1.visit(&format!("{prefix}.conv1"), f);
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.conv2.visit(&format!("{prefix}.conv2"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
    }

    fn clear_cache(&mut self) {
        self.conv1.clear_cache();
        self.norm1.clear_cache();
        self.act.clear_cache();
        self.conv2.clear_cache();
        self.norm2.clear_cache();
    }
}

/// Any layer of the engine.
#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Deconv(ConvTranspose2d<T>),
    Norm(BatchNorm2d<T>),
    Act(Activation<T>),
    Residual(ResidualBlock<T>),
}

impl<T: Float> Layer<T> {
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(l) => l.infer(x),
            Layer::Deconv(l) => l.infer(x),
            Layer::Norm(l) => l.infer(x),
            Layer::Act(l) => l.infer(x),
            Layer::Residual(l) => l.infer(x),
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Tensor<T> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Deconv(l) => l.forward(x),
            Layer::Norm(l) => l.forward(x, mode),
            Layer::Act(l) => l.forward(x),
            Layer::Residual(l) => l.forward(x, mode),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(l) => l.backward(dy),
            Layer::Deconv(l) => l.backward(dy),
            Layer::Norm(l) => l.backward(dy),
            Layer::Act(l) => l.backward(dy),
            Layer::Residual(l) => l.backward(dy),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        match self {
            Layer::Conv(l) => l.visit(prefix, f),
            Layer::Deconv(l) => l.visit(prefix, f),
            Layer::Norm(l) => l.visit(prefix, f),
            Layer::Act(_) => {}
            Layer::Residual(l) => l.visit(prefix, f),
        }
    }

    pub fn fold_kinks(&self, hash: &mut u64) {
        match self {
            Layer::Act(a) => a.fold_kinks(hash),
            Layer::Residual(r) => r.act.fold_kinks(hash),
            _ => {}
        }
    }

    pub fn has_cache(&self) -> bool {
        match self {
            Layer::Conv(l) => l.input.is_some(),
            Layer::Deconv(l) => l.input.is_some(),
            Layer::Norm(l) => l.cache.is_some(),
            Layer::Act(l) => l.cache.is_some(),
            Layer::Residual(l) => l.conv1.input.is_some(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv(l) => l.clear_cache(),
            Layer::Deconv(l) => l.clear_cache(),
            Layer::Norm(l) => l.clear_cache(),
            Layer::Act(l) => l.clear_cache(),
            Layer::Residual(l) => l.clear_cache(),
        }
    }

    /// Output shape `(c, h, w)` for an input of shape `(c, h, w)`.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> (usize, usize, usize) {
        match self {
            Layer::Conv(l) => {
                let (oh, ow) = l.output_size(h, w);
                (l.out_channels, oh, ow)
            }
            Layer::Deconv(l) => {
                let (oh, ow) = l.output_size(h, w);
                (l.out_channels, oh, ow)
            }
            _ => (c, h, w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let (n, c, h, w) = dims4(x);
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let mut y = Tensor::zeros(vec![n, conv.out_channels, oh, ow]);
        for b in 0..n {
            for o in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = conv.bias.as_ref().map_or(0.0, |bb| bb.value[o]);
                        for i in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w
                                    {
                                        s += conv.weight.value[((o * c + i) * k + ky) * k + kx]
                                            * x.data()
                                                [((b * c + i) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data_mut()[((b * conv.out_channels + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    /// Scatter definition of the transposed convolution.
    fn naive_deconv(x: &Tensor<f64>, d: &ConvTranspose2d<f64>) -> Tensor<f64> {
        let (n, c, h, w) = dims4(x);
        let (oh, ow) = d.output_size(h, w);
        let k = d.kernel;
        let oc = d.out_channels;
        let mut y = Tensor::zeros(vec![n, oc, oh, ow]);
        for b in 0..n {
            for o in 0..oc {
                let bias = d.bias.as_ref().map_or(0.0, |bb| bb.value[o]);
                for v in &mut y.data_mut()[(b * oc + o) * oh * ow..(b * oc + o + 1) * oh * ow] {
                    *v = bias;
                }
            }
            for i in 0..c {
                for iy in 0..h {
                    for ix in 0..w {
                        let xv = x.data()[((b * c + i) * h + iy) * w + ix];
                        for o in 0..oc {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let yy = (iy * d.stride + ky) as isize - d.pad as isize;
                                    let yx = (ix * d.stride + kx) as isize - d.pad as isize;
                                    if yy >= 0
                                        && yx >= 0
                                        && (yy as usize) < oh
                                        && (yx as usize) < ow
                                    {
                                        y.data_mut()[((b * oc + o) * oh + yy as usize) * ow
                                            + yx as usize] +=
                                            xv * d.weight.value[((i * oc + o) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    fn max_abs_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn conv_matches_naive() {
        let mut r = rng();
        for &(k, s, h, w) in &[(5, 2, 9, 8), (3, 1, 6, 7), (5, 1, 4, 4), (1, 1, 3, 5)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, s, 0.5, true, &mut r);
            conv.bias.as_mut().unwrap().value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor(vec![2, 3, h, w], &mut r);
            assert!(max_abs_diff(&conv.infer(&x), &naive_conv(&x, &conv)) < 1e-12);
        }
    }

    #[test]
    fn deconv_matches_naive_and_doubles() {
        let mut r = rng();
        let mut d = ConvTranspose2d::<f64>::new(3, 2, 5, 2, 0.5, true, &mut r);
        d.bias.as_mut().unwrap().value = vec![0.25, -0.5];
        let x = random_tensor(vec![2, 3, 4, 5], &mut r);
        let y = d.infer(&x);
        assert_eq!(y.shape(), &[2, 2, 8, 10]);
        assert!(max_abs_diff(&y, &naive_deconv(&x, &d)) < 1e-12);
    }

    #[test]
    fn banded_im2col_matches_single_band() {
        // 1x1 input channel with a tall image forces several bands only if the
        // budget is tiny; emulate by comparing band-split col2im/im2col directly.
        let win = Window {
            channels: 2,
            height: 7,
            width: 5,
            kernel: 3,
            stride: 2,
            pad: 1,
            out_h: 4,
            out_w: 3,
        };
        let img: Vec<f64> = (0..70).map(|v| v as f64).collect();
        let mut full = Vec::new();
        win.im2col(&img, 0, 4, &mut full);
        let mut a = Vec::new();
        let mut b = Vec::new();
        win.im2col(&img, 0, 1, &mut a);
        win.im2col(&img, 1, 4, &mut b);
        for row in 0..18 {
            assert_eq!(&full[row * 12..row * 12 + 3], &a[row * 3..row * 3 + 3]);
            assert_eq!(&full[row * 12 + 3..row * 12 + 12], &b[row * 9..row * 9 + 9]);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut r = rng();
        let win = Window {
            channels: 2,
            height: 6,
            width: 5,
            kernel: 5,
            stride: 2,
            pad: 2,
            out_h: 3,
            out_w: 3,
        };
        let x: Vec<f64> = (0..60).map(|_| r.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..2 * 25 * 9).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut cols = Vec::new();
        win.im2col(&x, 0, 3, &mut cols);
        let lhs: f64 = cols.iter().zip(&u).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 60];
        win.col2im_add(&u, 0, 3, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn one_by_one_conv_weight_gradient_is_input() {
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new(1, 1, 1, 1, 0.1, false, &mut r);
        let x = Tensor::from_vec(vec![1, 1, 1, 1], vec![0.7]).unwrap();
        conv.forward(x);
        let dy = Tensor::from_vec(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let dx = conv.backward(&dy);
        assert_eq!(conv.weight.grad, vec![0.7]);
        assert_eq!(dx.data(), &[conv.weight.value[0]]);
    }

    #[test]
    fn zero_weight_residual_block_is_identity() {
        let mut r = rng();
        let mut block = ResidualBlock::<f64>::new(4, 3, 0.02, &mut r);
        block.conv1.weight.value.iter_mut().for_each(|v| *v = 0.0);
        block.conv2.weight.value.iter_mut().for_each(|v| *v = 0.0);
        let x = random_tensor(vec![2, 4, 5, 5], &mut r);
        assert!(max_abs_diff(&block.infer(&x), &x) < 1e-12);
        assert!(max_abs_diff(&block.forward(x.clone(), Mode::Train), &x) < 1e-12);
    }

    #[test]
    fn batchnorm_train_normalizes_and_tracks_running_stats() {
        let mut r = rng();
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = random_tensor(vec![3, 2, 4, 4], &mut r);
        let y = bn.forward(x, Mode::Train);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| y.data()[(b * 2 + ch) * 16..(b * 2 + ch + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 48.0;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 48.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().all(|m| m.abs() < 0.01));
        assert!(bn.running_var.value.iter().all(|v| (v - 1.0).abs() < 0.02));
    }
}
