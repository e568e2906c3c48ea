use serde::{Deserialize, Serialize};

use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Silu,
    /// Exact form `x · Φ(x)` using `erf`, not the tanh approximation.
    Gelu,
    Sigmoid,
    /// `σ(x) + bias`. With the usual bias of −0.5 the map is odd.
    ShiftedSigmoid { bias: f64 },
}

impl Activation {
    pub const DEFAULT_SHIFT: f64 = -0.5;

    pub fn shifted_sigmoid() -> Self {
        Activation::ShiftedSigmoid {
            bias: Self::DEFAULT_SHIFT,
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { alpha } => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
            Activation::Sigmoid => sigmoid(x),
            Activation::ShiftedSigmoid { bias } => sigmoid(x) + bias,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| T::from_wide(kind.eval(v.to_wide())))
}

/// `(n, c·r², h, w) → (n, c, h·r, w·r)`; input channel `c·r² + i·r + j`
/// lands at sub-pixel `(i, j)`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 {
        return Err(Error::invalid("pixel_shuffle", "factor must be at least 1"));
    }
    if s.c % (r * r) != 0 {
        return Err(Error::invalid(
            "pixel_shuffle",
            format!("channels {} not divisible by {}", s.c, r * r),
        ));
    }
    let oc = s.c / (r * r);
    Ok(Tensor::from_fn(Shape::new(s.n, oc, s.h * r, s.w * r), |n, c, y, xx| {
        x.at(n, c * r * r + (y % r) * r + xx % r, y / r, xx / r)
    }))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if r == 0 || s.h % r != 0 || s.w % r != 0 {
        return Err(Error::invalid(
            "pixel_unshuffle",
            format!("spatial size {}x{} not divisible by {r}", s.h, s.w),
        ));
    }
    Ok(Tensor::from_fn(
        Shape::new(s.n, s.c * r * r, s.h / r, s.w / r),
        |n, c, y, xx| {
            let (base, sub) = (c / (r * r), c % (r * r));
            x.at(n, base, y * r + sub / r, xx * r + sub % r)
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel centers (`align_corners = false`), edge-clamped.
    Bilinear,
}

pub fn upsample<T: Scalar>(x: &Tensor<T>, r: usize, mode: UpsampleMode) -> Result<Tensor<T>> {
    if r == 0 {
        return Err(Error::invalid("upsample", "factor must be at least 1"));
    }
    let s = x.shape();
    match mode {
        UpsampleMode::Nearest => Ok(Tensor::from_fn(
            Shape::new(s.n, s.c, s.h * r, s.w * r),
            |n, c, y, xx| x.at(n, c, y / r, xx / r),
        )),
        UpsampleMode::Bilinear => resize_bilinear(x, s.h * r, s.w * r),
    }
}

/// Source coordinate and blend weight for one output index.
fn bilinear_taps(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear resize to `out_h × out_w` with half-pixel centers.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h == 0 || s.w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "empty spatial size"));
    }
    let rows: Vec<_> = (0..out_h).map(|y| bilinear_taps(y, s.h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|c| bilinear_taps(c, s.w, out_w)).collect();
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, out_h, out_w), |n, c, y, xx| {
        let (y0, y1, ly) = rows[y];
        let (x0, x1, lx) = cols[xx];
        let p = |yy, xc| x.at(n, c, yy, xc).to_wide();
        let top = p(y0, x0) * (1.0 - lx) + p(y0, x1) * lx;
        let bottom = p(y1, x0) * (1.0 - lx) + p(y1, x1) * lx;
        T::from_wide(top * (1.0 - ly) + bottom * ly)
    }))
}

pub fn channel_split<T: Scalar>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = x.shape();
    let total: usize = sizes.iter().sum();
    if total != s.c {
        return Err(Error::shape("channel_split", "c", s.c, total));
    }
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &len in sizes {
        let mut data = Vec::with_capacity(s.n * len * s.plane());
        for n in 0..s.n {
            let from = x.index(n, start, 0, 0);
            data.extend_from_slice(&x.data()[from..from + len * s.plane()]);
        }
        parts.push(Tensor::new(Shape::new(s.n, len, s.h, s.w), data)?);
        start += len;
    }
    Ok(parts)
}

pub fn channel_concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("channel_concat", "no inputs"))?
        .shape();
    let mut channels = 0;
    for p in parts {
        let s = p.shape();
        if s.n != first.n {
            return Err(Error::shape("channel_concat", "n", first.n, s.n));
        }
        if s.h != first.h {
            return Err(Error::shape("channel_concat", "h", first.h, s.h));
        }
        if s.w != first.w {
            return Err(Error::shape("channel_concat", "w", first.w, s.w));
        }
        channels += s.c;
    }
    let out = Shape::new(first.n, channels, first.h, first.w);
    let mut data = Vec::with_capacity(out.len());
    for n in 0..first.n {
        for p in parts {
            let block = p.shape().c * first.plane();
            data.extend_from_slice(&p.data()[n * block..(n + 1) * block]);
        }
    }
    Tensor::new(out, data)
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    for (dim, x, y) in [("n", sa.n, sb.n), ("c", sa.c, sb.c), ("h", sa.h, sb.h), ("w", sa.w, sb.w)] {
        if x != y {
            return Err(Error::shape(op, dim, x, y));
        }
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(sa, data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, k: f64) -> Tensor<T> {
    a.map(|v| T::from_wide(v.to_wide() * k))
}

/// Max pooling without padding; trailing rows/cols that do not fill a
/// window are dropped.
pub fn maxpool<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if k == 0 || stride == 0 {
        return Err(Error::invalid("maxpool", "window and stride must be at least 1"));
    }
    if s.h < k {
        return Err(Error::shape("maxpool", "h", k, s.h));
    }
    if s.w < k {
        return Err(Error::shape("maxpool", "w", k, s.w));
    }
    let oh = (s.h - k) / stride + 1;
    let ow = (s.w - k) / stride + 1;
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, oh, ow), |n, c, y, xx| {
        let mut m = T::neg_infinity();
        for i in 0..k {
            for j in 0..k {
                m = m.max(x.at(n, c, y * stride + i, xx * stride + j));
            }
        }
        m
    }))
}
