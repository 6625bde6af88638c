//! Forward and backward kernels for every layer kind.
//!
//! Forward kernels are pure functions. The `*_backward` kernels take the
//! upstream gradient and return gradients for each input; the tape wires them
//! together.

use super::{Real, RngState, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    /// Output size `ceil(in / stride)`, zero padding split with the extra
    /// row/column at the bottom/right.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output size and padding offsets of a windowed op along both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis_geometry(
    op: &'static str,
    axis: &'static str,
    input: usize,
    k: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if input < k {
                return Err(Error::shape(op, axis, format!(">= {k}"), input));
            }
            Ok(((input - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

impl Geometry {
    pub fn new(
        op: &'static str,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Param(format!("{op}: stride must be >= 1")));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::Param(format!("{op}: window must be non-empty")));
        }
        let (out_h, pad_top) = axis_geometry(op, "height", h, kh, stride, padding)?;
        let (out_w, pad_left) = axis_geometry(op, "width", w, kw, stride, padding)?;
        Ok(Geometry {
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Weights of a parameterised layer.
///
/// Convolutions carry a `(kh, kw, in_ch, out_ch)` kernel, dense layers an
/// `(in_dim, out_dim)` matrix. For depthwise-separable layers `kernel` is the
/// depthwise filter `(kh, kw, in_ch, 1)` and `pointwise` the `(1, 1, in_ch,
/// out_ch)` mixing kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub kernel: Tensor<T>,
    pub pointwise: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Real> LayerParams<T> {
    pub fn conv(kernel: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        LayerParams {
            kernel,
            pointwise: None,
            bias,
            trainable: true,
        }
    }

    pub fn dense(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self::conv(weight, Some(bias))
    }

    pub fn separable(depthwise: Tensor<T>, pointwise: Tensor<T>, bias: Option<Tensor<T>>) -> Self {
        LayerParams {
            kernel: depthwise,
            pointwise: Some(pointwise),
            bias,
            trainable: true,
        }
    }
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, units: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != units {
            return Err(Error::shape(op, "bias length", units, b.numel()));
        }
    }
    Ok(())
}

fn kernel_dims<T: Real>(op: &'static str, kernel: &Tensor<T>) -> Result<[usize; 4]> {
    match kernel.shape()[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::shape(op, "kernel rank", 4, kernel.rank())),
    }
}

// ---------------------------------------------------------------------------
// conv2d

/// 2-D convolution (cross-correlation) of an NHWC batch. No activation.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let [_, h, w, _] = input.dims4("conv2d")?;
    let [kh, kw, _, _] = kernel_dims("conv2d", &params.kernel)?;
    let geom = Geometry::new("conv2d", h, w, kh, kw, stride, padding)?;
    conv2d_forward(input, &params.kernel, params.bias.as_ref(), &geom)
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &Geometry,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = input.dims4("conv2d")?;
    let [kh, kw, kc, o] = kernel_dims("conv2d", kernel)?;
    if kc != c {
        return Err(Error::shape("conv2d", "input channels", kc, c));
    }
    if (kh, kw) != (g.kh, g.kw) {
        return Err(Error::shape("conv2d", "kernel window", format!("{}x{}", g.kh, g.kw), format!("{kh}x{kw}")));
    }
    check_bias("conv2d", bias, o)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); n * g.out_h * g.out_w * o];
    for b in 0..n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let base = ((b * g.out_h + oh) * g.out_w + ow) * o;
                let acc = &mut out[base..base + o];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias.data());
                }
                for ki in 0..kh {
                    let Some(ih) = g.src(oh, ki, g.pad_top, h) else { continue };
                    for kj in 0..kw {
                        let Some(iw) = g.src(ow, kj, g.pad_left, w) else { continue };
                        let xs = &x[((b * h + ih) * w + iw) * c..][..c];
                        let kbase = (ki * kw + kj) * c * o;
                        for (ci, &xv) in xs.iter().enumerate() {
                            let wrow = &k[kbase + ci * o..][..o];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, g.out_h, g.out_w, o], out)
}

/// Returns `(d_input, d_kernel, d_bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &Geometry,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, h, w, c] = input.dims4("conv2d").expect("validated in forward");
    let [kh, kw, _, o] = kernel_dims("conv2d", kernel).expect("validated in forward");
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut db = vec![T::zero(); o];
    for b in 0..n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let gs = &go[((b * g.out_h + oh) * g.out_w + ow) * o..][..o];
                for (d, &gv) in db.iter_mut().zip(gs) {
                    *d += gv;
                }
                for ki in 0..kh {
                    let Some(ih) = g.src(oh, ki, g.pad_top, h) else { continue };
                    for kj in 0..kw {
                        let Some(iw) = g.src(ow, kj, g.pad_left, w) else { continue };
                        let xoff = ((b * h + ih) * w + iw) * c;
                        let kbase = (ki * kw + kj) * c * o;
                        for ci in 0..c {
                            let wrow = &k[kbase + ci * o..][..o];
                            let mut dot = T::zero();
                            for (&wv, &gv) in wrow.iter().zip(gs) {
                                dot += wv * gv;
                            }
                            dx[xoff + ci] += dot;
                            let xv = x[xoff + ci];
                            let dkrow = &mut dk[kbase + ci * o..][..o];
                            for (d, &gv) in dkrow.iter_mut().zip(gs) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape"),
        Tensor::new(kernel.shape().to_vec(), dk).expect("shape"),
        Tensor::new(vec![o], db).expect("shape"),
    )
}

// ---------------------------------------------------------------------------
// depthwise / separable

/// Per-channel spatial filtering with a `(kh, kw, c, 1)` kernel.
pub fn depthwise_conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &Geometry,
) -> Result<Tensor<T>> {
    let [n, h, w, c] = input.dims4("depthwise_conv2d")?;
    let [kh, kw, kc, mult] = kernel_dims("depthwise_conv2d", kernel)?;
    if kc != c {
        return Err(Error::shape("separable_conv", "input channels", kc, c));
    }
    if mult != 1 {
        return Err(Error::shape("separable_conv", "depth multiplier", 1, mult));
    }
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); n * g.out_h * g.out_w * c];
    for b in 0..n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let acc = &mut out[((b * g.out_h + oh) * g.out_w + ow) * c..][..c];
                for ki in 0..kh {
                    let Some(ih) = g.src(oh, ki, g.pad_top, h) else { continue };
                    for kj in 0..kw {
                        let Some(iw) = g.src(ow, kj, g.pad_left, w) else { continue };
                        let xs = &x[((b * h + ih) * w + iw) * c..][..c];
                        let ks = &k[(ki * kw + kj) * c..][..c];
                        for ((a, &xv), &kv) in acc.iter_mut().zip(xs).zip(ks) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, g.out_h, g.out_w, c], out)
}

/// Returns `(d_input, d_kernel)`.
pub fn depthwise_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    g: &Geometry,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, h, w, c] = input.dims4("depthwise_conv2d").expect("validated in forward");
    let (kh, kw) = (g.kh, g.kw);
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); k.len()];
    for b in 0..n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let gs = &go[((b * g.out_h + oh) * g.out_w + ow) * c..][..c];
                for ki in 0..kh {
                    let Some(ih) = g.src(oh, ki, g.pad_top, h) else { continue };
                    for kj in 0..kw {
                        let Some(iw) = g.src(ow, kj, g.pad_left, w) else { continue };
                        let xoff = ((b * h + ih) * w + iw) * c;
                        let koff = (ki * kw + kj) * c;
                        for ci in 0..c {
                            dx[xoff + ci] += k[koff + ci] * gs[ci];
                            dk[koff + ci] += x[xoff + ci] * gs[ci];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape"),
        Tensor::new(kernel.shape().to_vec(), dk).expect("shape"),
    )
}

/// Depthwise filtering, then 1x1 pointwise mixing, then bias.
pub fn separable_conv<T: Real>(
    input: &Tensor<T>,
    params: &LayerParams<T>,
    padding: Padding,
    stride: usize,
) -> Result<Tensor<T>> {
    let [_, h, w, _] = input.dims4("separable_conv")?;
    let [kh, kw, _, _] = kernel_dims("separable_conv", &params.kernel)?;
    let pointwise = params
        .pointwise
        .as_ref()
        .ok_or_else(|| Error::Param("separable_conv: missing pointwise kernel".into()))?;
    let geom = Geometry::new("separable_conv", h, w, kh, kw, stride, padding)?;
    let depth = depthwise_conv2d_forward(input, &params.kernel, &geom)?;
    let [_, oh, ow, _] = depth.dims4("separable_conv")?;
    let pgeom = Geometry::new("separable_conv", oh, ow, 1, 1, 1, Padding::Valid)?;
    conv2d_forward(&depth, pointwise, params.bias.as_ref(), &pgeom)
}

// ---------------------------------------------------------------------------
// pooling

/// 2x2 max pooling with stride 2; a trailing odd row/column is dropped.
pub fn maxpool2d<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, h, w, _] = input.dims4("maxpool2d")?;
    let geom = Geometry::new("maxpool2d", h, w, 2, 2, 2, Padding::Valid)?;
    Ok(maxpool_forward(input, &geom)?.0)
}

/// General max pooling. Padded positions never win. Also returns, for every
/// output element, the flat input index that produced it (first maximum in
/// scan order).
pub fn maxpool_forward<T: Real>(input: &Tensor<T>, g: &Geometry) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, h, w, c] = input.dims4("maxpool2d")?;
    let x = input.data();
    let len = n * g.out_h * g.out_w * c;
    let mut out = vec![T::neg_infinity(); len];
    let mut arg = vec![usize::MAX; len];
    for b in 0..n {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let obase = ((b * g.out_h + oh) * g.out_w + ow) * c;
                for ki in 0..g.kh {
                    let Some(ih) = g.src(oh, ki, g.pad_top, h) else { continue };
                    for kj in 0..g.kw {
                        let Some(iw) = g.src(ow, kj, g.pad_left, w) else { continue };
                        let ibase = ((b * h + ih) * w + iw) * c;
                        for ci in 0..c {
                            let v = x[ibase + ci];
                            if arg[obase + ci] == usize::MAX || v > out[obase + ci] {
                                out[obase + ci] = v;
                                arg[obase + ci] = ibase + ci;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, g.out_h, g.out_w, c], out)?, arg))
}

pub fn maxpool_backward<T: Real>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

/// Per-channel spatial mean: `N x H x W x C -> N x C`.
pub fn global_average_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, h, w, c] = input.dims4("global_average_pool")?;
    let x = input.data();
    let inv = T::one() / T::lit((h * w) as f64);
    let mut out = vec![T::zero(); n * c];
    for b in 0..n {
        let acc = &mut out[b * c..][..c];
        for p in 0..h * w {
            let xs = &x[(b * h * w + p) * c..][..c];
            for (a, &v) in acc.iter_mut().zip(xs) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn global_average_pool_backward<T: Real>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let (n, hw, c) = (input_shape[0], input_shape[1] * input_shape[2], input_shape[3]);
    let inv = T::one() / T::lit(hw as f64);
    let g = grad_out.data();
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for b in 0..n {
        for p in 0..hw {
            for ci in 0..c {
                d[(b * hw + p) * c + ci] = g[b * c + ci] * inv;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// dense

/// `input · W + b` for an `N x D` input and `D x U` weight.
pub fn dense<T: Real>(input: &Tensor<T>, params: &LayerParams<T>) -> Result<Tensor<T>> {
    dense_forward(input, &params.kernel, params.bias.as_ref())
}

pub fn dense_forward<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [n, d] = input.dims2("dense")?;
    let [wd, u] = weight.dims2("dense")?;
    if wd != d {
        return Err(Error::shape("dense", "input features", wd, d));
    }
    check_bias("dense", bias, u)?;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![T::zero(); n * u];
    for b in 0..n {
        let acc = &mut out[b * u..][..u];
        if let Some(bias) = bias {
            acc.copy_from_slice(bias.data());
        }
        for (di, &xv) in x[b * d..][..d].iter().enumerate() {
            for (a, &wv) in acc.iter_mut().zip(&wt[di * u..][..u]) {
                *a += xv * wv;
            }
        }
    }
    Tensor::new(vec![n, u], out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub fn dense_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let u = weight.shape()[1];
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut dx = vec![T::zero(); n * d];
    let mut dw = vec![T::zero(); d * u];
    let mut db = vec![T::zero(); u];
    for b in 0..n {
        let gs = &go[b * u..][..u];
        for (acc, &gv) in db.iter_mut().zip(gs) {
            *acc += gv;
        }
        for di in 0..d {
            let wrow = &wt[di * u..][..u];
            let mut dot = T::zero();
            for (&wv, &gv) in wrow.iter().zip(gs) {
                dot += wv * gv;
            }
            dx[b * d + di] = dot;
            let xv = x[b * d + di];
            for (acc, &gv) in dw[di * u..][..u].iter_mut().zip(gs) {
                *acc += xv * gv;
            }
        }
    }
    (
        Tensor::new(vec![n, d], dx).expect("shape"),
        Tensor::new(vec![d, u], dw).expect("shape"),
        Tensor::new(vec![u], db).expect("shape"),
    )
}

// ---------------------------------------------------------------------------
// elementwise and normalisation

pub fn relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Row-wise softmax of an `N x C` logit matrix, max-subtracted.
pub fn softmax<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c] = input.dims2("softmax")?;
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(c).take(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(vec![n, c], out)
}

pub fn softmax_backward<T: Real>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let c = probs.shape()[1];
    let mut dx = grad_out.data().to_vec();
    for (drow, prow) in dx.chunks_mut(c).zip(probs.data().chunks(c)) {
        let dot: T = drow.iter().zip(prow).map(|(&g, &p)| g * p).sum();
        for (d, &p) in drow.iter_mut().zip(prow) {
            *d = p * (*d - dot);
        }
    }
    Tensor::new(probs.shape().to_vec(), dx).expect("shape")
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`. Eval mode (or rate 0) yields `None`.
pub fn dropout_mask<T: Real>(numel: usize, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Option<Vec<T>>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Param(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(None);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    Ok(Some(
        (0..numel)
            .map(|_| if rng.next_f64() < rate { T::zero() } else { keep })
            .collect(),
    ))
}

pub fn dropout<T: Real>(input: &Tensor<T>, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Tensor<T>> {
    Ok(match dropout_mask::<T>(input.numel(), rate, mode, rng)? {
        None => input.clone(),
        Some(mask) => {
            let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
            Tensor::new(input.shape().to_vec(), data)?
        }
    })
}

/// Batch normalisation with stored statistics (inference form).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub mean: Tensor<T>,
    pub variance: Tensor<T>,
    pub eps: f64,
}

impl<T: Real> BatchNormParams<T> {
    /// Identity statistics: gamma 1, beta 0, mean 0, variance 1.
    pub fn identity(channels: usize, eps: f64) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            mean: Tensor::zeros(&[channels]),
            variance: Tensor::full(&[channels], T::one()),
            eps,
        }
    }
}

pub fn batch_norm_inference<T: Real>(input: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    batch_norm_forward(input, &p.gamma, &p.beta, &p.mean, &p.variance, p.eps)
}

pub fn batch_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    variance: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let c = *input.shape().last().expect("non-empty shape");
    for (name, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("variance", variance)] {
        if t.numel() != c {
            return Err(Error::shape("batch_norm", name, c, t.numel()));
        }
    }
    let (scale, shift) = bn_affine(gamma, beta, mean, variance, eps);
    let mut out = input.data().to_vec();
    for row in out.chunks_mut(c) {
        for ((v, &s), &t) in row.iter_mut().zip(&scale).zip(&shift) {
            *v = *v * s + t;
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

fn bn_affine<T: Real>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &Tensor<T>,
    variance: &Tensor<T>,
    eps: f64,
) -> (Vec<T>, Vec<T>) {
    let eps = T::lit(eps);
    let scale: Vec<T> = gamma
        .data()
        .iter()
        .zip(variance.data())
        .map(|(&g, &v)| g / (v + eps).sqrt())
        .collect();
    let shift = beta
        .data()
        .iter()
        .zip(mean.data())
        .zip(&scale)
        .map(|((&b, &m), &s)| b - m * s)
        .collect();
    (scale, shift)
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn batch_norm_backward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    mean: &Tensor<T>,
    variance: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = gamma.numel();
    let e = T::lit(eps);
    let inv_std: Vec<T> = variance.data().iter().map(|&v| T::one() / (v + e).sqrt()).collect();
    let mut dx = vec![T::zero(); input.numel()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ((xrow, grow), drow) in input
        .data()
        .chunks(c)
        .zip(grad_out.data().chunks(c))
        .zip(dx.chunks_mut(c))
    {
        for ci in 0..c {
            let g = grow[ci];
            drow[ci] = g * gamma.data()[ci] * inv_std[ci];
            dgamma[ci] += g * (xrow[ci] - mean.data()[ci]) * inv_std[ci];
            dbeta[ci] += g;
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape"),
        Tensor::new(vec![c], dgamma).expect("shape"),
        Tensor::new(vec![c], dbeta).expect("shape"),
    )
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", "operand shape", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// residual block (pure forward)

/// One convolution of a residual branch or projection shortcut, with
/// optional inference batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnParams<T = f32> {
    pub conv: LayerParams<T>,
    pub padding: Padding,
    pub stride: usize,
    pub bn: Option<BatchNormParams<T>>,
    pub relu: bool,
}

impl<T: Real> ConvBnParams<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = conv2d(x, &self.conv, self.padding, self.stride)?;
        if let Some(bn) = &self.bn {
            y = batch_norm_inference(&y, bn)?;
        }
        Ok(if self.relu { relu(&y) } else { y })
    }
}

#[derive(Debug, Clone)]
pub struct ResidualParams<T = f32> {
    pub branch: Vec<ConvBnParams<T>>,
    /// Projection used when the branch changes shape; `None` is identity.
    pub shortcut: Option<ConvBnParams<T>>,
}

/// `relu(branch(x)) + shortcut(x)`: the shortcut is added after the branch
/// activation, so a zero branch passes the input through unchanged.
pub fn residual_block<T: Real>(input: &Tensor<T>, params: &ResidualParams<T>) -> Result<Tensor<T>> {
    let mut h = input.clone();
    for stage in &params.branch {
        h = stage.apply(&h)?;
    }
    let skip = match &params.shortcut {
        Some(p) => p.apply(input)?,
        None => input.clone(),
    };
    if h.shape() != skip.shape() {
        return Err(Error::shape(
            "residual_block",
            "branch/shortcut shape",
            format!("{:?}", skip.shape()),
            format!("{:?}", h.shape()),
        ));
    }
    add(&relu(&h), &skip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 5, 5, 1], |i| i as f64 * 0.5 - 3.0);
        let p = LayerParams::conv(t(&[1, 1, 1, 1], &[1.0]), Some(t(&[1], &[0.0])));
        assert_eq!(conv2d(&x, &p, Padding::Valid, 1).unwrap(), x);
    }

    #[test]
    fn conv_valid_shape() {
        let x = Tensor::<f32>::zeros(&[1, 224, 224, 1]);
        let p = LayerParams::conv(Tensor::zeros(&[3, 3, 1, 8]), Some(Tensor::zeros(&[8])));
        let y = conv2d(&x, &p, Padding::Valid, 1).unwrap();
        assert_eq!(y.shape(), &[1, 222, 222, 8]);
    }

    #[test]
    fn conv_same_preserves_size_at_stride_one() {
        let x = Tensor::<f32>::zeros(&[2, 7, 9, 3]);
        let p = LayerParams::conv(Tensor::zeros(&[3, 3, 3, 4]), None);
        assert_eq!(conv2d(&x, &p, Padding::Same, 1).unwrap().shape(), &[2, 7, 9, 4]);
        assert_eq!(conv2d(&x, &p, Padding::Same, 2).unwrap().shape(), &[2, 4, 5, 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_axis() {
        let x = Tensor::<f32>::zeros(&[1, 5, 5, 2]);
        let p = LayerParams::conv(Tensor::zeros(&[3, 3, 3, 4]), None);
        match conv2d(&x, &p, Padding::Valid, 1) {
            Err(Error::Shape { axis, .. }) => assert_eq!(axis, "input channels"),
            other => panic!("expected shape error, got {other:?}"),
        }
        let p = LayerParams::conv(Tensor::zeros(&[3, 3, 2, 4]), None);
        assert!(matches!(conv2d(&x, &p, Padding::Valid, 0), Err(Error::Param(_))));
    }

    #[test]
    fn maxpool_examples() {
        let x = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2d(&x).unwrap().data(), &[4.0]);
        let c = Tensor::<f32>::full(&[1, 6, 4, 2], 3.5);
        assert_eq!(maxpool2d(&c).unwrap(), Tensor::full(&[1, 3, 2, 2], 3.5));
        let odd = Tensor::<f32>::zeros(&[1, 109, 109, 1]);
        assert_eq!(maxpool2d(&odd).unwrap().shape(), &[1, 54, 54, 1]);
        let tiny = Tensor::<f32>::zeros(&[1, 1, 4, 1]);
        assert!(matches!(maxpool2d(&tiny), Err(Error::Shape { axis: "height", .. })));
    }

    #[test]
    fn dense_hand_arithmetic() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let p = LayerParams::dense(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), t(&[2], &[1.0, 1.0]));
        assert_eq!(dense(&x, &p).unwrap().data(), &[2.0, 3.0]);
        let bad = t(&[1, 3], &[1.0, 2.0, 3.0]);
        assert!(matches!(dense(&bad, &p), Err(Error::Shape { axis: "input features", .. })));
    }

    #[test]
    fn softmax_closed_form() {
        let ln = |v: f64| v.ln();
        let x = t(&[1, 4], &[0.0, ln(2.0), ln(4.0), ln(8.0)]);
        let p = softmax(&x).unwrap();
        for (got, want) in p.data().iter().zip([1.0, 2.0, 4.0, 8.0]) {
            assert!((got - want / 15.0).abs() < 1e-12);
        }
        let eq = softmax(&t(&[1, 4], &[3.0; 4])).unwrap();
        assert!(eq.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn softmax_large_logits_stay_finite() {
        let p = softmax(&Tensor::<f32>::new(vec![1, 3], vec![1000.0, 999.0, -1000.0]).unwrap()).unwrap();
        assert!(p.all_finite());
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::<f32>::from_fn(&[4, 8], |i| i as f32);
        let mut rng = RngState::new(1);
        assert_eq!(dropout(&x, 0.3, Mode::Eval, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert!(matches!(dropout(&x, 1.0, Mode::Train, &mut rng), Err(Error::Param(_))));
    }

    #[test]
    fn dropout_is_unbiased() {
        let x = Tensor::<f64>::full(&[1_000_000], 1.0);
        let y = dropout(&x, 0.3, Mode::Train, &mut RngState::new(11)).unwrap();
        let mean = y.sum() / 1e6;
        assert!((0.99..=1.01).contains(&mean), "mean {mean}");
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e6;
        assert!((zeros - 0.3).abs() < 0.01);
    }

    #[test]
    fn gap_examples() {
        let x = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(global_average_pool(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[2, 3, 5, 4], -1.25);
        assert_eq!(global_average_pool(&c).unwrap(), Tensor::full(&[2, 4], -1.25));
    }

    #[test]
    fn separable_identity_and_shape() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let p = LayerParams::separable(t(&[1, 1, 1, 1], &[1.0]), t(&[1, 1, 1, 1], &[1.0]), None);
        assert_eq!(separable_conv(&x, &p, Padding::Valid, 1).unwrap(), x);

        let x = Tensor::<f32>::zeros(&[1, 8, 8, 3]);
        let p = LayerParams::separable(
            Tensor::zeros(&[3, 3, 3, 1]),
            Tensor::zeros(&[1, 1, 3, 16]),
            Some(Tensor::zeros(&[16])),
        );
        assert_eq!(separable_conv(&x, &p, Padding::Valid, 1).unwrap().shape(), &[1, 6, 6, 16]);

        let wrong = LayerParams::separable(Tensor::zeros(&[3, 3, 2, 1]), Tensor::zeros(&[1, 1, 2, 4]), None);
        assert!(matches!(
            separable_conv(&x, &wrong, Padding::Valid, 1),
            Err(Error::Shape { axis: "input channels", .. })
        ));
    }

    #[test]
    fn residual_zero_branch_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 6, 6, 4], |i| (i as f64 * 0.37).sin());
        let stage = |relu| ConvBnParams {
            conv: LayerParams::conv(Tensor::zeros(&[3, 3, 4, 4]), Some(Tensor::zeros(&[4]))),
            padding: Padding::Same,
            stride: 1,
            bn: Some(BatchNormParams::identity(4, 1e-3)),
            relu,
        };
        let p = ResidualParams {
            branch: vec![stage(true), stage(false)],
            shortcut: None,
        };
        assert_eq!(residual_block(&x, &p).unwrap(), x);

        // A bias-only branch adds relu(bias) everywhere.
        let mut p2 = p.clone();
        p2.branch[1].bn = None;
        p2.branch[1].conv.bias = Some(t(&[4], &[0.5, -0.5, 0.0, 2.0]));
        let y = residual_block(&x, &p2).unwrap();
        for (i, (&a, &b)) in y.data().iter().zip(x.data()).enumerate() {
            let add = [0.5, 0.0, 0.0, 2.0][i % 4];
            assert!((a - b - add).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_requires_projection_when_channels_change() {
        let x = Tensor::<f32>::zeros(&[1, 56, 56, 64]);
        let mut p = ResidualParams {
            branch: vec![ConvBnParams {
                conv: LayerParams::conv(Tensor::zeros(&[1, 1, 64, 32]), None),
                padding: Padding::Same,
                stride: 1,
                bn: None,
                relu: false,
            }],
            shortcut: None,
        };
        assert!(matches!(residual_block(&x, &p), Err(Error::Shape { .. })));
        p.shortcut = Some(ConvBnParams {
            conv: LayerParams::conv(Tensor::zeros(&[1, 1, 64, 32]), None),
            padding: Padding::Same,
            stride: 1,
            bn: None,
            relu: false,
        });
        assert_eq!(residual_block(&x, &p).unwrap().shape(), &[1, 56, 56, 32]);
    }
}
