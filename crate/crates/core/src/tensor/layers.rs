//! Layer kernels: 3x3 convolution and transposed convolution, channel-wise
//! layer norm, GeLU, LeakyReLU, channel softmax and a 1x1 channel mixer.
//!
//! All image tensors are `[B, C, H, W]`. Convolution weights are
//! `[out, in, 3, 3]` for both directions; padding is fixed at one pixel and a
//! stride-2 transposed convolution adds one row/column of output padding so
//! it upsamples by exactly two.

use rand::Rng;

use super::tape::{Op, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const K: usize = 3;
const TAPS: usize = K * K;

/// Weight and bias of one layer.
///
/// Convolutions hold `[out, in, 3, 3]` kernels, layer norms hold a per-channel
/// scale in `weight` and shift in `bias`, the 1x1 mixer holds `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> LayerParams<T> {
    /// 3x3 kernel with fan-in scaled normal init and zero bias.
    pub fn kaiming3x3<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, rng: &mut R) -> Result<Self> {
        if out_ch == 0 || in_ch == 0 {
            return Err(Error::contract("layer widths must be positive"));
        }
        let std = (2.0 / (in_ch * TAPS) as f64).sqrt();
        Ok(Self {
            weight: Tensor::randn([out_ch, in_ch, K, K], std, rng).with_grad(),
            bias: Tensor::zeros([out_ch]).with_grad(),
        })
    }

    /// Unit scale, zero shift.
    pub fn norm(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::contract("layer norm needs at least one channel"));
        }
        Ok(Self {
            weight: Tensor::ones([channels]).with_grad(),
            bias: Tensor::zeros([channels]).with_grad(),
        })
    }

    pub fn pointwise<R: Rng + ?Sized>(out_ch: usize, in_ch: usize, rng: &mut R) -> Result<Self> {
        if out_ch == 0 || in_ch == 0 {
            return Err(Error::contract("layer widths must be positive"));
        }
        let std = (1.0 / in_ch as f64).sqrt();
        Ok(Self {
            weight: Tensor::randn([out_ch, in_ch], std, rng).with_grad(),
            bias: Tensor::zeros([out_ch]).with_grad(),
        })
    }

    pub fn numel(&self) -> usize {
        self.weight.numel() + self.bias.numel()
    }

    /// Swaps the in/out axes of a 3x3 kernel.
    pub fn transposed(&self) -> Result<Self> {
        let [o, i, kh, kw] = self.weight.dims4()?;
        let src = self.weight.data();
        let mut data = vec![T::zero(); src.len()];
        for a in 0..o {
            for b in 0..i {
                let s = (a * i + b) * TAPS;
                let d = (b * o + a) * TAPS;
                data[d..d + TAPS].copy_from_slice(&src[s..s + TAPS]);
            }
        }
        Ok(Self {
            weight: Tensor::from_vec([i, o, kh, kw], data)?,
            bias: Tensor::zeros([i]),
        })
    }

    pub fn cast<U: Real>(&self) -> LayerParams<U> {
        LayerParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// strided 3x3 kernels

#[derive(Clone, Copy)]
struct Plane {
    ch: usize,
    h: usize,
    w: usize,
}

impl Plane {
    fn len(&self) -> usize {
        self.h * self.w
    }
}

/// Weight view: element `(o, i, tap)` lives at `o * os + i * is + tap`.
#[derive(Clone, Copy)]
struct WView {
    os: usize,
    is: usize,
}

/// Range of `p` with `0 <= p * s + tap - 1 < len`.
#[inline]
fn valid_range(tap: usize, s: usize, len: usize, count: usize) -> (usize, usize) {
    let lo = usize::from(tap == 0);
    let hi = if len >= tap { (len - tap) / s + 1 } else { 0 };
    (lo, hi.min(count))
}

/// `out[b, o, p] += sum_{i, tap} w(o, i, tap) * x[b, i, p * s + tap - 1]`
fn gather<T: Real>(
    batch: usize,
    x: &[T],
    xp: Plane,
    wt: &[T],
    wv: WView,
    s: usize,
    out: &mut [T],
    op: Plane,
) {
    for b in 0..batch {
        for o in 0..op.ch {
            let ob = (b * op.ch + o) * op.len();
            let oplane = &mut out[ob..ob + op.len()];
            for i in 0..xp.ch {
                let xb = (b * xp.ch + i) * xp.len();
                let xplane = &x[xb..xb + xp.len()];
                let wbase = o * wv.os + i * wv.is;
                for kh in 0..K {
                    let (rlo, rhi) = valid_range(kh, s, xp.h, op.h);
                    for kw in 0..K {
                        let wval = wt[wbase + kh * K + kw];
                        let (clo, chi) = valid_range(kw, s, xp.w, op.w);
                        for r in rlo..rhi {
                            let xr = (r * s + kh - 1) * xp.w;
                            let orow = &mut oplane[r * op.w..(r + 1) * op.w];
                            for c in clo..chi {
                                orow[c] += wval * xplane[xr + c * s + kw - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[b, o, q * s + tap - 1] += sum_i w(o, i, tap) * x[b, i, q]`
fn scatter<T: Real>(
    batch: usize,
    x: &[T],
    xp: Plane,
    wt: &[T],
    wv: WView,
    s: usize,
    out: &mut [T],
    op: Plane,
) {
    for b in 0..batch {
        for o in 0..op.ch {
            let ob = (b * op.ch + o) * op.len();
            let oplane = &mut out[ob..ob + op.len()];
            for i in 0..xp.ch {
                let xb = (b * xp.ch + i) * xp.len();
                let xplane = &x[xb..xb + xp.len()];
                let wbase = o * wv.os + i * wv.is;
                for kh in 0..K {
                    let (rlo, rhi) = valid_range(kh, s, op.h, xp.h);
                    for kw in 0..K {
                        let wval = wt[wbase + kh * K + kw];
                        let (clo, chi) = valid_range(kw, s, op.w, xp.w);
                        for q in rlo..rhi {
                            let orow = (q * s + kh - 1) * op.w;
                            let xrow = &xplane[q * xp.w..(q + 1) * xp.w];
                            for c in clo..chi {
                                oplane[orow + c * s + kw - 1] += wval * xrow[c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `gw(o, i, tap) += sum_{b, p} small[b, o, p] * big[b, i, p * s + tap - 1]`
fn weight_grad<T: Real>(
    batch: usize,
    small: &[T],
    sp: Plane,
    big: &[T],
    bp: Plane,
    s: usize,
    gw: &mut [T],
    gv: WView,
) {
    for b in 0..batch {
        for o in 0..sp.ch {
            let sb = (b * sp.ch + o) * sp.len();
            let splane = &small[sb..sb + sp.len()];
            for i in 0..bp.ch {
                let bb = (b * bp.ch + i) * bp.len();
                let bplane = &big[bb..bb + bp.len()];
                let gbase = o * gv.os + i * gv.is;
                for kh in 0..K {
                    let (rlo, rhi) = valid_range(kh, s, bp.h, sp.h);
                    for kw in 0..K {
                        let (clo, chi) = valid_range(kw, s, bp.w, sp.w);
                        let mut acc = T::zero();
                        for r in rlo..rhi {
                            let brow = (r * s + kh - 1) * bp.w;
                            let srow = &splane[r * sp.w..(r + 1) * sp.w];
                            for c in clo..chi {
                                acc += srow[c] * bplane[brow + c * s + kw - 1];
                            }
                        }
                        gw[gbase + kh * K + kw] += acc;
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], batch: usize, plane: usize) {
    let ch = bias.len();
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate() {
            let base = (b * ch + c) * plane;
            out[base..base + plane].iter_mut().for_each(|v| *v = bv);
        }
    }
}

fn bias_grad<T: Real>(g: &[T], batch: usize, ch: usize, plane: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); ch];
    for b in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            let base = (b * ch + c) * plane;
            *acc += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    gb
}

fn check_kernel<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>, in_axis: usize) -> Result<([usize; 4], [usize; 4])> {
    let xd = x.dims4()?;
    let wd = w.dims4()?;
    if wd[2] != K || wd[3] != K {
        return Err(Error::dim(format!("kernels must be 3x3, got {:?}", w.shape())));
    }
    if wd[in_axis] != xd[1] {
        return Err(Error::dim(format!(
            "input has {} channels but the kernel {:?} expects {}",
            xd[1],
            w.shape(),
            wd[in_axis]
        )));
    }
    let out_ch = wd[1 - in_axis];
    if bias.shape() != [out_ch] {
        return Err(Error::dim(format!(
            "bias shape {:?} does not match {out_ch} output channels",
            bias.shape()
        )));
    }
    Ok((xd, wd))
}

/// Output of a backward kernel.
pub(crate) struct LayerGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn conv2d_raw<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let ([b, ci, h, wd], [co, ..]) = check_kernel(x, w, bias, 1)?;
    if stride == 0 || h % stride != 0 || wd % stride != 0 {
        return Err(Error::dim(format!(
            "spatial size {h}x{wd} is not divisible by stride {stride}"
        )));
    }
    let op = Plane {
        ch: co,
        h: h / stride,
        w: wd / stride,
    };
    let mut out = vec![T::zero(); b * co * op.len()];
    add_bias(&mut out, bias.data(), b, op.len());
    gather(
        b,
        x.data(),
        Plane { ch: ci, h, w: wd },
        w.data(),
        WView { os: ci * TAPS, is: TAPS },
        stride,
        &mut out,
        op,
    );
    Tensor::from_vec([b, co, op.h, op.w], out)
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    g: &[T],
    want_input: bool,
) -> LayerGrads<T> {
    let [b, ci, h, wd] = x.dims4().expect("checked in forward");
    let co = w.shape()[0];
    let xp = Plane { ch: ci, h, w: wd };
    let gp = Plane {
        ch: co,
        h: h / stride,
        w: wd / stride,
    };
    let input = want_input.then(|| {
        let mut gx = vec![T::zero(); x.numel()];
        scatter(b, g, gp, w.data(), WView { os: TAPS, is: ci * TAPS }, stride, &mut gx, xp);
        gx
    });
    let mut gw = vec![T::zero(); w.numel()];
    weight_grad(b, g, gp, x.data(), xp, stride, &mut gw, WView { os: ci * TAPS, is: TAPS });
    LayerGrads {
        input,
        weight: gw,
        bias: bias_grad(g, b, co, gp.len()),
    }
}

fn deconv_out_plane(h: usize, w: usize, ch: usize, stride: usize) -> Plane {
    // (h - 1) * s - 2 * pad + k + output_pad, with pad 1 and output_pad s - 1
    Plane {
        ch,
        h: h * stride,
        w: w * stride,
    }
}

fn deconv2d_raw<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let ([b, ci, h, wd], [co, ..]) = check_kernel(x, w, bias, 1)?;
    if !(1..=2).contains(&stride) {
        return Err(Error::contract(format!(
            "transposed convolution stride must be 1 or 2, got {stride}"
        )));
    }
    let op = deconv_out_plane(h, wd, co, stride);
    let mut out = vec![T::zero(); b * co * op.len()];
    add_bias(&mut out, bias.data(), b, op.len());
    scatter(
        b,
        x.data(),
        Plane { ch: ci, h, w: wd },
        w.data(),
        WView { os: ci * TAPS, is: TAPS },
        stride,
        &mut out,
        op,
    );
    Tensor::from_vec([b, co, op.h, op.w], out)
}

pub(crate) fn deconv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    g: &[T],
    want_input: bool,
) -> LayerGrads<T> {
    let [b, ci, h, wd] = x.dims4().expect("checked in forward");
    let co = w.shape()[0];
    let xp = Plane { ch: ci, h, w: wd };
    let gp = deconv_out_plane(h, wd, co, stride);
    let input = want_input.then(|| {
        let mut gx = vec![T::zero(); x.numel()];
        gather(b, g, gp, w.data(), WView { os: TAPS, is: ci * TAPS }, stride, &mut gx, xp);
        gx
    });
    let mut gw = vec![T::zero(); w.numel()];
    weight_grad(b, x.data(), xp, g, gp, stride, &mut gw, WView { os: TAPS, is: ci * TAPS });
    LayerGrads {
        input,
        weight: gw,
        bias: bias_grad(g, b, co, gp.len()),
    }
}

/// 3x3 convolution with one pixel of zero padding.
pub fn conv2d<T: Real>(x: &Tensor<T>, p: &LayerParams<T>, stride: usize) -> Result<Tensor<T>> {
    conv2d_raw(x, &p.weight, &p.bias, stride)
}

/// 3x3 transposed convolution; stride 2 doubles the spatial size.
pub fn deconv2d<T: Real>(x: &Tensor<T>, p: &LayerParams<T>, stride: usize) -> Result<Tensor<T>> {
    deconv2d_raw(x, &p.weight, &p.bias, stride)
}

// ---------------------------------------------------------------------------
// 1x1 channel mixing

fn pointwise_raw<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, ci, h, wd] = x.dims4()?;
    let (co, wi) = match w.shape() {
        &[co, wi] => (co, wi),
        s => return Err(Error::dim(format!("1x1 weights must be [out, in], got {s:?}"))),
    };
    if wi != ci || bias.shape() != [co] {
        return Err(Error::dim(format!(
            "1x1 layer {:?}/{:?} does not fit {ci} input channels",
            w.shape(),
            bias.shape()
        )));
    }
    let plane = h * wd;
    let mut out = vec![T::zero(); b * co * plane];
    add_bias(&mut out, bias.data(), b, plane);
    let (xs, ws) = (x.data(), w.data());
    for bb in 0..b {
        for o in 0..co {
            let ob = (bb * co + o) * plane;
            for i in 0..ci {
                let wv = ws[o * ci + i];
                let xb = (bb * ci + i) * plane;
                for p in 0..plane {
                    out[ob + p] += wv * xs[xb + p];
                }
            }
        }
    }
    Tensor::from_vec([b, co, h, wd], out)
}

pub(crate) fn pointwise_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &[T], want_input: bool) -> LayerGrads<T> {
    let [b, ci, h, wd] = x.dims4().expect("checked in forward");
    let co = w.shape()[0];
    let plane = h * wd;
    let (xs, ws) = (x.data(), w.data());
    let mut gw = vec![T::zero(); w.numel()];
    let mut gx = want_input.then(|| vec![T::zero(); x.numel()]);
    for bb in 0..b {
        for o in 0..co {
            let gb = (bb * co + o) * plane;
            for i in 0..ci {
                let xb = (bb * ci + i) * plane;
                let mut acc = T::zero();
                for p in 0..plane {
                    acc += g[gb + p] * xs[xb + p];
                }
                gw[o * ci + i] += acc;
                if let Some(gx) = gx.as_mut() {
                    let wv = ws[o * ci + i];
                    for p in 0..plane {
                        gx[xb + p] += wv * g[gb + p];
                    }
                }
            }
        }
    }
    LayerGrads {
        input: gx,
        weight: gw,
        bias: bias_grad(g, b, co, plane),
    }
}

/// Per-pixel linear combination of channels (a 1x1 convolution).
pub fn pointwise<T: Real>(x: &Tensor<T>, p: &LayerParams<T>) -> Result<Tensor<T>> {
    pointwise_raw(x, &p.weight, &p.bias)
}

// ---------------------------------------------------------------------------
// layer norm over the channel axis

/// Returns `(output, xhat, rstd)`; `xhat` is the pre-affine normalized input.
fn layer_norm_raw<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let [b, c, h, wd] = x.dims4()?;
    if c == 0 || w.shape() != [c] || bias.shape() != [c] {
        return Err(Error::dim(format!(
            "layer norm over {c} channels with scale {:?} and shift {:?}",
            w.shape(),
            bias.shape()
        )));
    }
    let plane = h * wd;
    let xs = x.data();
    let inv_c = T::of(1.0 / c as f64);
    let eps = T::of(eps);
    let mut xhat = vec![T::zero(); xs.len()];
    let mut rstd = vec![T::zero(); b * plane];
    let mut mean = vec![T::zero(); plane];
    let mut var = vec![T::zero(); plane];
    for bb in 0..b {
        mean.iter_mut().for_each(|m| *m = T::zero());
        var.iter_mut().for_each(|v| *v = T::zero());
        for ch in 0..c {
            let base = (bb * c + ch) * plane;
            for p in 0..plane {
                mean[p] += xs[base + p];
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for ch in 0..c {
            let base = (bb * c + ch) * plane;
            for p in 0..plane {
                let d = xs[base + p] - mean[p];
                var[p] += d * d;
            }
        }
        let r = &mut rstd[bb * plane..(bb + 1) * plane];
        for p in 0..plane {
            r[p] = T::one() / (var[p] * inv_c + eps).sqrt();
        }
        for ch in 0..c {
            let base = (bb * c + ch) * plane;
            for p in 0..plane {
                xhat[base + p] = (xs[base + p] - mean[p]) * r[p];
            }
        }
    }
    let (ws, bs) = (w.data(), bias.data());
    let mut out = vec![T::zero(); xs.len()];
    for bb in 0..b {
        for ch in 0..c {
            let base = (bb * c + ch) * plane;
            for p in 0..plane {
                out[base + p] = xhat[base + p] * ws[ch] + bs[ch];
            }
        }
    }
    Ok((Tensor::from_vec([b, c, h, wd], out)?, xhat, rstd))
}

pub(crate) fn layer_norm_backward<T: Real>(
    shape: &[usize],
    w: &Tensor<T>,
    xhat: &[T],
    rstd: &[T],
    g: &[T],
) -> LayerGrads<T> {
    let (b, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let ws = w.data();
    let inv_c = T::of(1.0 / c as f64);
    let mut gx = vec![T::zero(); g.len()];
    let mut gw = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let mut m1 = vec![T::zero(); plane];
    let mut m2 = vec![T::zero(); plane];
    for bb in 0..b {
        m1.iter_mut().for_each(|m| *m = T::zero());
        m2.iter_mut().for_each(|m| *m = T::zero());
        for ch in 0..c {
            let base = (bb * c + ch) * plane;
            let mut aw = T::zero();
            let mut ab = T::zero();
            for p in 0..plane {
                let gv = g[base + p];
                let xh = xhat[base + p];
                aw += gv * xh;
                ab += gv;
                let dxh = gv * ws[ch];
                m1[p] += dxh;
                m2[p] += dxh * xh;
            }
            gw[ch] += aw;
            gb[ch] += ab;
        }
        let r = &rstd[bb * plane..(bb + 1) * plane];
        for ch in 0..c {
            let base = (bb * c + ch) * plane;
            for p in 0..plane {
                let dxh = g[base + p] * ws[ch];
                gx[base + p] = r[p] * (dxh - m1[p] * inv_c - xhat[base + p] * m2[p] * inv_c);
            }
        }
    }
    LayerGrads {
        input: Some(gx),
        weight: gw,
        bias: gb,
    }
}

/// Normalizes each pixel's channel vector to zero mean and unit variance,
/// then applies the per-channel scale and shift.
pub fn layer_norm<T: Real>(x: &Tensor<T>, p: &LayerParams<T>, eps: f64) -> Result<Tensor<T>> {
    layer_norm_raw(x, &p.weight, &p.bias, eps).map(|r| r.0)
}

// ---------------------------------------------------------------------------
// pointwise activations

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    x * half * (T::one() + (x * T::of(INV_SQRT_2)).erf())
}

/// Exact GeLU, `x * Phi(x)`.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub(crate) fn gelu_backward<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| {
            let cdf = T::of(0.5) * (T::one() + (v * T::of(INV_SQRT_2)).erf());
            let pdf = T::of(INV_SQRT_2PI) * (-(v * v) * T::of(0.5)).exp();
            gv * (cdf + v * pdf)
        })
        .collect()
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

pub(crate) fn leaky_relu_backward<T: Real>(x: &[T], slope: T, g: &[T]) -> Vec<T> {
    x.iter()
        .zip(g)
        .map(|(&v, &gv)| if v >= T::zero() { gv } else { slope * gv })
        .collect()
}

/// Softmax across channels at every pixel, stabilized by max subtraction.
pub fn channel_softmax<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if c < 2 {
        return Err(Error::contract("channel softmax needs at least two channels"));
    }
    let plane = h * w;
    let xs = x.data();
    let mut out = vec![T::zero(); xs.len()];
    for bb in 0..b {
        let base = bb * c * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xs[base + ch * plane + p]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (xs[base + ch * plane + p] - m).exp();
                out[base + ch * plane + p] = e;
                total += e;
            }
            let inv = T::one() / total;
            for ch in 0..c {
                out[base + ch * plane + p] *= inv;
            }
        }
    }
    Tensor::from_vec([b, c, h, w], out)
}

pub(crate) fn channel_softmax_backward<T: Real>(y: &Tensor<T>, g: &[T]) -> Vec<T> {
    let [b, c, h, w] = y.dims4().expect("checked in forward");
    let plane = h * w;
    let ys = y.data();
    let mut gx = vec![T::zero(); ys.len()];
    for bb in 0..b {
        let base = bb * c * plane;
        for p in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + p;
                dot += g[i] * ys[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                gx[i] = ys[i] * (g[i] - dot);
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// cropping

pub(crate) fn crop<T: Real>(x: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
    let [b, c, h, w] = x.dims4()?;
    if top + height > h || left + width > w {
        return Err(Error::dim(format!(
            "crop {height}x{width}+{top}+{left} exceeds {h}x{w}"
        )));
    }
    let xs = x.data();
    let mut out = Vec::with_capacity(b * c * height * width);
    for plane in 0..b * c {
        for r in top..top + height {
            let row = plane * h * w + r * w;
            out.extend_from_slice(&xs[row + left..row + left + width]);
        }
    }
    Tensor::from_vec([b, c, height, width], out)
}

pub(crate) fn crop_backward<T: Real>(in_shape: &[usize], out_shape: &[usize], top: usize, left: usize, g: &[T]) -> Vec<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut gx = vec![T::zero(); in_shape.iter().product()];
    for plane in 0..in_shape[0] * in_shape[1] {
        for r in 0..oh {
            let dst = plane * h * w + (r + top) * w + left;
            let src = (plane * oh + r) * ow;
            gx[dst..dst + ow].copy_from_slice(&g[src..src + ow]);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// tape bindings

/// Parameters of one layer recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundParams<'t, T: Real> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<T: Real> LayerParams<T> {
    pub fn bind<'t>(&self, tape: &'t super::Tape<T>) -> BoundParams<'t, T> {
        BoundParams {
            weight: tape.leaf(&self.weight),
            bias: tape.leaf(&self.bias),
        }
    }

    /// Adds the gradients of a bound copy into `weight.grad` / `bias.grad`.
    pub fn accumulate_grads(&mut self, bound: &BoundParams<'_, T>, grads: &super::Gradients<T>) -> Result<()> {
        grads.accumulate_into(&bound.weight, &mut self.weight)?;
        grads.accumulate_into(&bound.bias, &mut self.bias)
    }
}

impl<'t, T: Real> Var<'t, T> {
    fn layer_requires_grad(&self, p: &BoundParams<'t, T>) -> bool {
        self.requires_grad() || p.weight.requires_grad() || p.bias.requires_grad()
    }

    pub fn conv2d(&self, p: &BoundParams<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        let value = conv2d_raw(&self.value(), &p.weight.value(), &p.bias.value(), stride)?;
        let op = Op::Conv2d {
            x: self.id(),
            w: p.weight.id(),
            b: p.bias.id(),
            stride,
        };
        Ok(self.tape().push(value, op, self.layer_requires_grad(p)))
    }

    pub fn deconv2d(&self, p: &BoundParams<'t, T>, stride: usize) -> Result<Var<'t, T>> {
        let value = deconv2d_raw(&self.value(), &p.weight.value(), &p.bias.value(), stride)?;
        let op = Op::Deconv2d {
            x: self.id(),
            w: p.weight.id(),
            b: p.bias.id(),
            stride,
        };
        Ok(self.tape().push(value, op, self.layer_requires_grad(p)))
    }

    pub fn pointwise(&self, p: &BoundParams<'t, T>) -> Result<Var<'t, T>> {
        let value = pointwise_raw(&self.value(), &p.weight.value(), &p.bias.value())?;
        let op = Op::Pointwise {
            x: self.id(),
            w: p.weight.id(),
            b: p.bias.id(),
        };
        Ok(self.tape().push(value, op, self.layer_requires_grad(p)))
    }

    pub fn layer_norm(&self, p: &BoundParams<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        let (value, xhat, rstd) = layer_norm_raw(&self.value(), &p.weight.value(), &p.bias.value(), eps)?;
        let op = Op::LayerNorm {
            x: self.id(),
            w: p.weight.id(),
            b: p.bias.id(),
            xhat,
            rstd,
        };
        Ok(self.tape().push(value, op, self.layer_requires_grad(p)))
    }

    pub fn gelu(&self) -> Var<'t, T> {
        let value = gelu(&self.value());
        self.unary(value, Op::Gelu(self.id()))
    }

    pub fn leaky_relu(&self, slope: T) -> Var<'t, T> {
        let value = leaky_relu(&self.value(), slope);
        self.unary(value, Op::LeakyRelu(self.id(), slope))
    }

    pub fn channel_softmax(&self) -> Result<Var<'t, T>> {
        let value = channel_softmax(&self.value())?;
        Ok(self.unary(value, Op::Softmax(self.id())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(w: Tensor<f64>, out_ch: usize) -> LayerParams<f64> {
        LayerParams {
            weight: w,
            bias: Tensor::zeros([out_ch]),
        }
    }

    #[test]
    fn conv_of_zeros_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LayerParams::<f64>::kaiming3x3(5, 3, &mut rng).unwrap();
        let y = conv2d(&Tensor::zeros([1, 3, 8, 8]), &p, 1).unwrap();
        assert_eq!(y.shape(), &[1, 5, 8, 8]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_counts_taps_under_zero_padding() {
        let p = params(Tensor::ones([1, 1, 3, 3]), 1);
        let y = conv2d(&Tensor::ones([1, 1, 4, 4]), &p, 1).unwrap();
        #[rustfmt::skip]
        let want = [
            4., 6., 6., 4.,
            6., 9., 9., 6.,
            6., 9., 9., 6.,
            4., 6., 6., 4.,
        ];
        assert_eq!(y.data(), &want);
    }

    #[test]
    fn conv_stride_two_halves_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LayerParams::<f32>::kaiming3x3(7, 3, &mut rng).unwrap();
        let x = Tensor::randn([2, 3, 16, 16], 1.0, &mut rng);
        assert_eq!(conv2d(&x, &p, 2).unwrap().shape(), &[2, 7, 8, 8]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LayerParams::<f32>::kaiming3x3(4, 3, &mut rng).unwrap();
        let err = conv2d(&Tensor::zeros([1, 2, 8, 8]), &p, 1).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(conv2d(&Tensor::zeros([1, 3, 7, 8]), &p, 2).is_err());
    }

    #[test]
    fn deconv_identity_kernel_reproduces_input() {
        let mut w = Tensor::<f64>::zeros([2, 2, 3, 3]);
        w.data_mut()[4] = 1.0; // (0,0) center
        w.data_mut()[(2 + 1) * 9 + 4] = 1.0; // (1,1) center
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn([1, 2, 5, 6], 1.0, &mut rng);
        let y = deconv2d(&x, &params(w, 2), 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn deconv_stride_two_doubles_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LayerParams::<f32>::kaiming3x3(6, 4, &mut rng).unwrap();
        let x = Tensor::randn([1, 4, 8, 8], 1.0, &mut rng);
        assert_eq!(deconv2d(&x, &p, 2).unwrap().shape(), &[1, 6, 16, 16]);
        assert!(deconv2d(&x, &p, 3).is_err());
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let x = Tensor::<f64>::from_vec([1, 2, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = layer_norm(&x, &LayerParams::norm(2).unwrap(), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn layer_norm_constant_channels_give_zero() {
        let x = Tensor::<f32>::full([1, 4, 3, 3], 2.5);
        let y = layer_norm(&x, &LayerParams::norm(4).unwrap(), 1e-6).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn([2, 16, 5, 5], 1.0, &mut rng);
        let y = layer_norm(&x, &LayerParams::norm(16).unwrap(), 1e-6).unwrap();
        for b in 0..2 {
            for p in 0..25 {
                let vals: Vec<f64> = (0..16).map(|c| y.data()[(b * 16 + c) * 25 + p]).collect();
                let mean = vals.iter().sum::<f64>() / 16.0;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
                assert!(mean.abs() < 1e-6, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn gelu_values() {
        let x = Tensor::<f64>::from_vec([3], vec![0.0, 1.0, -1.0]).unwrap();
        let y = gelu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
        assert!((y.data()[2] + 0.158_655_253_931_457).abs() < 1e-12);
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::<f32>::from_vec([2], vec![2.0, -1.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.2).data(), &[2.0, -0.2]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let y = channel_softmax(&Tensor::<f64>::zeros([1, 3, 2, 2])).unwrap();
        assert!(y.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let x = Tensor::<f32>::from_vec([1, 3, 1, 1], vec![1000.0, 0.0, 0.0]).unwrap();
        let y = channel_softmax(&x).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0, 0.0]);
        assert!(channel_softmax(&Tensor::<f32>::zeros([1, 1, 2, 2])).is_err());
    }

    #[test]
    fn transposed_swaps_axes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = LayerParams::<f64>::kaiming3x3(2, 3, &mut rng).unwrap();
        let t = p.transposed().unwrap();
        assert_eq!(t.weight.shape(), &[3, 2, 3, 3]);
        assert_eq!(t.weight.data()[(2 * 2 + 1) * 9 + 5], p.weight.data()[(3 + 2) * 9 + 5]);
        assert_eq!(t.transposed().unwrap().weight.data(), p.weight.data());
    }

    #[test]
    fn crop_and_backward_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::randn([2, 3, 6, 7], 1.0, &mut rng);
        let y = crop(&x, 1, 2, 4, 3).unwrap();
        let g = Tensor::<f64>::randn([2, 3, 4, 3], 1.0, &mut rng);
        let gx = crop_backward(x.shape(), y.shape(), 1, 2, g.data());
        let lhs = y.dot(&g).unwrap();
        let rhs: f64 = x.data().iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
