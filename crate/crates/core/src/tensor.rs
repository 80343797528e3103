//! Dense rank-4 tensors in `(n, c, h, w)` order and the handful of numeric
//! kernels the models are built from.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor dims must all be >= 1, got {0}")]
    ZeroDim(Dims),
    #[error("data length {len} does not match dims {dims}")]
    LengthMismatch { dims: Dims, len: usize },
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Dims,
        right: Dims,
    },
    #[error("conv2d: kernel expects {expected} input channels, input has {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("conv2d: kernel size {0} is even, only odd kernels are supported")]
    EvenKernel(usize),
    #[error("conv2d: kernel must be square, got {0}x{1}")]
    NonSquareKernel(usize, usize),
    #[error("conv2d: bias has {got} entries, kernel has {expected} output channels")]
    BiasMismatch { expected: usize, got: usize },
    #[error("conv2d: padding {padding} too small for kernel {k} on a {h}x{w} input")]
    EmptyOutput {
        padding: usize,
        k: usize,
        h: usize,
        w: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("numeric gradient: non-finite function value when perturbing coordinate {coordinate}")]
    NonFiniteGradient { coordinate: usize },
    #[error("numeric gradient: step must be positive and finite, got {0}")]
    InvalidStep(f64),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl From<(usize, usize, usize, usize)> for Dims {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Self { n, c, h, w }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major `(n, c, h, w)` array of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    dims: Dims,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor4")
            .field("dims", &self.dims)
            .field("data", &self.data)
            .finish()
    }
}

impl Tensor4 {
    pub fn from_vec(dims: impl Into<Dims>, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        check_dims(dims)?;
        if data.len() != dims.len() {
            return Err(TensorError::LengthMismatch {
                dims,
                len: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "from_vec" });
        }
        Ok(Self { dims, data })
    }

    pub fn filled(dims: impl Into<Dims>, value: f64) -> Result<Self> {
        let dims = dims.into();
        check_dims(dims)?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "filled" });
        }
        Ok(Self {
            dims,
            data: vec![value; dims.len()],
        })
    }

    pub fn zeros(dims: impl Into<Dims>) -> Result<Self> {
        Self::filled(dims, 0.0)
    }

    /// Same shape as `self`, all zeros. Infallible since `self` is valid.
    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims,
            data: vec![0.0; self.data.len()],
        }
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform(dims: impl Into<Dims>, bound: f64, rng: &mut impl Rng) -> Result<Self> {
        let dims = dims.into();
        check_dims(dims)?;
        let data = (0..dims.len())
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..=bound)
                } else {
                    0.0
                }
            })
            .collect();
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw buffer. Callers are responsible for keeping
    /// values finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.dims.n && c < self.dims.c && h < self.dims.h && w < self.dims.w);
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.index(n, c, h, w);
        self.data[i] = value;
    }

    /// One `(h, w)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.dims.plane();
        let start = (n * self.dims.c + c) * p;
        &self.data[start..start + p]
    }

    /// Slice out sample `n` as a batch-of-one tensor.
    pub fn sample(&self, n: usize) -> Tensor4 {
        let per = self.dims.c * self.dims.plane();
        Tensor4 {
            dims: Dims::new(1, self.dims.c, self.dims.h, self.dims.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor4 {
        self.map(|v| v * factor)
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor4) -> Result<()> {
        same_dims("add_assign", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(TensorError::NonFinite { op })
        }
    }
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.n == 0 || dims.c == 0 || dims.h == 0 || dims.w == 0 {
        return Err(TensorError::ZeroDim(dims));
    }
    Ok(())
}

fn same_dims(op: &'static str, a: &Tensor4, b: &Tensor4) -> Result<()> {
    if a.dims != b.dims {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.dims,
            right: b.dims,
        });
    }
    Ok(())
}

/// Convolution weights `(c_out, c_in, k, k)` plus one bias per output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvKernel {
    pub weight: Tensor4,
    pub bias: Vec<f64>,
}

impl ConvKernel {
    pub fn new(weight: Tensor4, bias: Vec<f64>) -> Result<Self> {
        let d = weight.dims();
        if d.h != d.w {
            return Err(TensorError::NonSquareKernel(d.h, d.w));
        }
        if d.h.is_multiple_of(2) {
            return Err(TensorError::EvenKernel(d.h));
        }
        if bias.len() != d.n {
            return Err(TensorError::BiasMismatch {
                expected: d.n,
                got: bias.len(),
            });
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(TensorError::NonFinite {
                op: "ConvKernel::new",
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Result<Self> {
        Self::new(Tensor4::zeros((c_out, c_in, k, k))?, vec![0.0; c_out])
    }

    /// Uniform in ±1/sqrt(fan_in), zero bias.
    pub fn init_uniform(c_out: usize, c_in: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Self::new(
            Tensor4::uniform((c_out, c_in, k, k), bound, rng)?,
            vec![0.0; c_out],
        )
    }

    pub fn c_out(&self) -> usize {
        self.weight.dims().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.dims().c
    }

    pub fn k(&self) -> usize {
        self.weight.dims().h
    }

    /// Padding that keeps spatial dims unchanged.
    pub fn same_padding(&self) -> usize {
        (self.k() - 1) / 2
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.dims().len() + self.bias.len()
    }
}

/// 2-D cross-correlation with zero padding and stride 1, bias added per
/// output channel.
pub fn conv2d(input: &Tensor4, kernel: &ConvKernel, padding: usize) -> Result<Tensor4> {
    conv2d_raw(input, &kernel.weight, Some(&kernel.bias), padding)
}

/// Output spatial dims of a stride-1 convolution.
pub fn conv_output_hw(h: usize, w: usize, k: usize, padding: usize) -> Option<(usize, usize)> {
    let oh = (h + 2 * padding).checked_sub(k)? + 1;
    let ow = (w + 2 * padding).checked_sub(k)? + 1;
    Some((oh, ow))
}

/// Valid output-column range `[lo, hi)` for kernel tap `kx`, i.e. the `ox`
/// with `0 <= ox + kx - padding < w_in`.
fn tap_range(k_off: usize, padding: usize, w_in: usize, w_out: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(k_off);
    let hi = (w_in + padding).saturating_sub(k_off).min(w_out);
    (lo, hi.max(lo))
}

fn validate_conv(
    input: Dims,
    weight: Dims,
    bias_len: Option<usize>,
    padding: usize,
) -> Result<(usize, usize)> {
    if weight.h != weight.w {
        return Err(TensorError::NonSquareKernel(weight.h, weight.w));
    }
    if weight.h.is_multiple_of(2) {
        return Err(TensorError::EvenKernel(weight.h));
    }
    if weight.c != input.c {
        return Err(TensorError::ChannelMismatch {
            expected: weight.c,
            got: input.c,
        });
    }
    if let Some(len) = bias_len {
        if len != weight.n {
            return Err(TensorError::BiasMismatch {
                expected: weight.n,
                got: len,
            });
        }
    }
    conv_output_hw(input.h, input.w, weight.h, padding).ok_or(TensorError::EmptyOutput {
        padding,
        k: weight.h,
        h: input.h,
        w: input.w,
    })
}

/// Convolution on raw weights; `bias = None` means no bias term.
pub fn conv2d_raw(
    input: &Tensor4,
    weight: &Tensor4,
    bias: Option<&[f64]>,
    padding: usize,
) -> Result<Tensor4> {
    let id = input.dims();
    let wd = weight.dims();
    let (oh, ow) = validate_conv(id, wd, bias.map(<[f64]>::len), padding)?;
    let k = wd.h;
    let od = Dims::new(id.n, wd.n, oh, ow);
    let mut out = vec![0.0; od.len()];
    let x = input.data();
    let wt = weight.data();

    for n in 0..id.n {
        for co in 0..wd.n {
            let obase = (n * wd.n + co) * oh * ow;
            let oplane = &mut out[obase..obase + oh * ow];
            if let Some(b) = bias {
                oplane.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..id.c {
                let ibase = (n * id.c + ci) * id.h * id.w;
                let iplane = &x[ibase..ibase + id.h * id.w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = tap_range(ky, padding, id.h, oh);
                    for kx in 0..k {
                        let wv = wt[((co * wd.c + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = tap_range(kx, padding, id.w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - padding;
                        let span = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - padding;
                            let orow = &mut oplane[oy * ow + ox_lo..oy * ow + ox_lo + span];
                            let irow = &iplane[iy * id.w + ix_lo..iy * id.w + ix_lo + span];
                            for (o, &i) in orow.iter_mut().zip(irow) {
                                *o += wv * i;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4 {
        dims: od,
        data: out,
    }
    .ensure_finite("conv2d")
}

/// Gradient of a convolution w.r.t. its input, given the output gradient.
pub fn conv2d_grad_input(
    grad_out: &Tensor4,
    weight: &Tensor4,
    input_dims: Dims,
    padding: usize,
) -> Result<Tensor4> {
    let wd = weight.dims();
    let (oh, ow) = validate_conv(input_dims, wd, None, padding)?;
    let gd = grad_out.dims();
    if gd != Dims::new(input_dims.n, wd.n, oh, ow) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_grad_input",
            left: gd,
            right: Dims::new(input_dims.n, wd.n, oh, ow),
        });
    }
    let k = wd.h;
    let id = input_dims;
    let mut gx = vec![0.0; id.len()];
    let g = grad_out.data();
    let wt = weight.data();
    for n in 0..id.n {
        for co in 0..wd.n {
            let gbase = (n * wd.n + co) * oh * ow;
            let gplane = &g[gbase..gbase + oh * ow];
            for ci in 0..id.c {
                let ibase = (n * id.c + ci) * id.h * id.w;
                let xplane = &mut gx[ibase..ibase + id.h * id.w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = tap_range(ky, padding, id.h, oh);
                    for kx in 0..k {
                        let wv = wt[((co * wd.c + ci) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = tap_range(kx, padding, id.w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - padding;
                        let span = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - padding;
                            let grow = &gplane[oy * ow + ox_lo..oy * ow + ox_lo + span];
                            let xrow = &mut xplane[iy * id.w + ix_lo..iy * id.w + ix_lo + span];
                            for (x, &gv) in xrow.iter_mut().zip(grow) {
                                *x += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor4 { dims: id, data: gx }.ensure_finite("conv2d_grad_input")
}

/// Gradients of a convolution w.r.t. weight and bias.
pub fn conv2d_grad_kernel(
    grad_out: &Tensor4,
    input: &Tensor4,
    weight_dims: Dims,
    padding: usize,
) -> Result<(Tensor4, Vec<f64>)> {
    let id = input.dims();
    let wd = weight_dims;
    let (oh, ow) = validate_conv(id, wd, None, padding)?;
    let gd = grad_out.dims();
    if gd != Dims::new(id.n, wd.n, oh, ow) {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_grad_kernel",
            left: gd,
            right: Dims::new(id.n, wd.n, oh, ow),
        });
    }
    let k = wd.h;
    let mut gw = vec![0.0; wd.len()];
    let mut gb = vec![0.0; wd.n];
    let g = grad_out.data();
    let x = input.data();
    for n in 0..id.n {
        for co in 0..wd.n {
            let gbase = (n * wd.n + co) * oh * ow;
            let gplane = &g[gbase..gbase + oh * ow];
            gb[co] += gplane.iter().sum::<f64>();
            for ci in 0..id.c {
                let ibase = (n * id.c + ci) * id.h * id.w;
                let iplane = &x[ibase..ibase + id.h * id.w];
                for ky in 0..k {
                    let (oy_lo, oy_hi) = tap_range(ky, padding, id.h, oh);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = tap_range(kx, padding, id.w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix_lo = ox_lo + kx - padding;
                        let span = ox_hi - ox_lo;
                        let mut acc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - padding;
                            let grow = &gplane[oy * ow + ox_lo..oy * ow + ox_lo + span];
                            let irow = &iplane[iy * id.w + ix_lo..iy * id.w + ix_lo + span];
                            acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        gw[((co * wd.c + ci) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    let gw = Tensor4 { dims: wd, data: gw }.ensure_finite("conv2d_grad_kernel")?;
    if gb.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite {
            op: "conv2d_grad_kernel",
        });
    }
    Ok((gw, gb))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise operation selector.
#[derive(Debug, Clone, Copy)]
pub enum Elementwise<'a> {
    Sigmoid,
    Tanh,
    ProductWith(&'a Tensor4),
    SumWith(&'a Tensor4),
}

pub fn elementwise(input: &Tensor4, op: Elementwise<'_>) -> Result<Tensor4> {
    match op {
        Elementwise::Sigmoid => Ok(input.map(sigmoid)),
        Elementwise::Tanh => Ok(input.map(f64::tanh)),
        Elementwise::ProductWith(other) => zip_with("product", input, other, |a, b| a * b),
        Elementwise::SumWith(other) => zip_with("sum", input, other, |a, b| a + b),
    }
}

fn zip_with(
    op: &'static str,
    a: &Tensor4,
    b: &Tensor4,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor4> {
    same_dims(op, a, b)?;
    Tensor4 {
        dims: a.dims,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
    .ensure_finite(op)
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns form partial
/// windows, so output dims are `ceil(h/2) x ceil(w/2)`. Also returns, per
/// output element, the flat input index of the selected maximum.
pub fn max_pool2(input: &Tensor4) -> (Tensor4, Vec<usize>) {
    let d = input.dims();
    let (oh, ow) = (d.h.div_ceil(2), d.w.div_ceil(2));
    let od = Dims::new(d.n, d.c, oh, ow);
    let mut out = Vec::with_capacity(od.len());
    let mut arg = Vec::with_capacity(od.len());
    for n in 0..d.n {
        for c in 0..d.c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for y in 2 * oy..(2 * oy + 2).min(d.h) {
                        for x in 2 * ox..(2 * ox + 2).min(d.w) {
                            let i = input.index(n, c, y, x);
                            if input.data[i] > best {
                                best = input.data[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (
        Tensor4 {
            dims: od,
            data: out,
        },
        arg,
    )
}

/// Central-difference gradient `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, params: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(TensorError::InvalidStep(step));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let plus = f(&p);
        p[i] = orig - step;
        let minus = f(&p);
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFiniteGradient { coordinate: i });
        }
        grad.push((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative error used by the gradient checks. Magnitudes below `1e-6` are
/// compared absolutely so vanishing gradients do not blow the ratio up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
