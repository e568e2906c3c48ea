//! Structural re-parameterization: collapsing multi-branch convolution
//! blocks into one deployable kernel.
//!
//! All lowering happens in `f64` and is cast back to the block's element type
//! once, at the end.
//!
//! Padding convention: within a sequential branch the whole spatial padding
//! is applied to the branch input (the first convolution pads, the rest do
//! not). A `1×1 → k×k` pair then sees the first convolution's bias on the
//! border exactly as the fused kernel does, so fusion is exact everywhere,
//! including the frame. Pairs that pad the intermediate instead are only
//! accepted when the first convolution carries no bias.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, conv2d, ConvSpec, Scalar, Shape, Tensor};

/// Fixed 3×3 edge filters used as frozen branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedFilter {
    SobelX,
    SobelY,
    Laplacian,
    /// `(1/16)·[[−1,−2,−1],[−2,12,−2],[−1,−2,−1]]`, zero-sum high-pass.
    Hpf,
}

impl FixedFilter {
    pub const ALL: [FixedFilter; 4] = [
        FixedFilter::SobelX,
        FixedFilter::SobelY,
        FixedFilter::Laplacian,
        FixedFilter::Hpf,
    ];

    pub fn kernel(self) -> [[f64; 3]; 3] {
        match self {
            FixedFilter::SobelX => [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
            FixedFilter::SobelY => [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]],
            FixedFilter::Laplacian => [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]],
            FixedFilter::Hpf => {
                let k = [[-1.0, -2.0, -1.0], [-2.0, 12.0, -2.0], [-1.0, -2.0, -1.0]];
                k.map(|row| row.map(|v| v / 16.0))
            }
        }
    }
}

/// The four fixed filters with their kernels.
pub fn fixed_filter_bank() -> [(FixedFilter, [[f64; 3]; 3]); 4] {
    FixedFilter::ALL.map(|f| (f, f.kernel()))
}

/// Inference-mode batch normalization statistics for `C` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self, c: usize) -> Result<()> {
        for (name, v) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("mean", &self.mean),
            ("var", &self.var),
        ] {
            if v.len() != c {
                return Err(Error::shape("fold_batchnorm", name, c, v.len()));
            }
        }
        if let Some(i) = self.var.iter().position(|v| v.to_wide() < 0.0) {
            return Err(Error::invalid(
                "fold_batchnorm",
                format!("negative variance in channel {i}"),
            ));
        }
        Ok(())
    }

    /// `γ (x − μ) / √(σ² + ε) + β` per channel.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        self.validate(s.c)?;
        let mut out = x.clone();
        let plane = s.plane();
        for n in 0..s.n {
            for c in 0..s.c {
                let inv = 1.0 / (self.var[c].to_wide() + self.eps).sqrt();
                let (g, b, m) = (self.gamma[c].to_wide(), self.beta[c].to_wide(), self.mean[c].to_wide());
                let start = x.index(n, c, 0, 0);
                for v in &mut out.data_mut()[start..start + plane] {
                    *v = T::from_wide(g * (v.to_wide() - m) * inv + b);
                }
            }
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> BatchNorm<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_wide(x.to_wide())).collect();
        BatchNorm {
            gamma: c(&self.gamma),
            beta: c(&self.beta),
            mean: c(&self.mean),
            var: c(&self.var),
            eps: self.eps,
        }
    }
}

/// One training-time branch of a re-parameterizable block. Every branch maps
/// `(n, C_in, h, w)` to `(n, C_out, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Branch<T: Scalar = f32> {
    Conv(ConvSpec<T>),
    /// Convolutions applied in order; at most one has a kernel larger
    /// than 1×1.
    Seq(Vec<ConvSpec<T>>),
    Identity,
    ScaledIdentity(Vec<T>),
    /// Depthwise fixed filter with a per-channel scale, optionally preceded
    /// by a 1×1 projection from `C_in` to `C_out` channels.
    FixedFilter {
        filter: FixedFilter,
        scale: Vec<T>,
        pre: Option<ConvSpec<T>>,
    },
    ConvBn {
        conv: ConvSpec<T>,
        bn: BatchNorm<T>,
    },
    /// Frozen base convolution plus a low-rank path: `down` is the
    /// `(r, C_in, k, k)` projection, `up` the `(C_out, r, 1, 1)` expansion.
    Lora {
        base: ConvSpec<T>,
        down: Tensor<T>,
        up: Tensor<T>,
    },
}

impl<T: Scalar> Branch<T> {
    /// Learnable parameters; fixed filter taps are added when
    /// `include_fixed` is set. Batch-norm running statistics are not
    /// parameters.
    pub fn param_count(&self, include_fixed: bool) -> usize {
        match self {
            Branch::Conv(c) => c.param_count(),
            Branch::Seq(cs) => cs.iter().map(ConvSpec::param_count).sum(),
            Branch::Identity => 0,
            Branch::ScaledIdentity(g) => g.len(),
            Branch::FixedFilter { scale, pre, .. } => {
                scale.len()
                    + pre.as_ref().map_or(0, ConvSpec::param_count)
                    + if include_fixed { 9 } else { 0 }
            }
            Branch::ConvBn { conv, bn } => conv.param_count() + 2 * bn.channels(),
            Branch::Lora { base, down, up } => base.param_count() + down.len() + up.len(),
        }
    }

    /// Convolutions this branch runs when evaluated unfused, in order; used
    /// for FLOP counting.
    pub fn unfused_convs(&self) -> Vec<ConvSpec<T>> {
        match self {
            Branch::Conv(c) | Branch::ConvBn { conv: c, .. } => vec![c.clone()],
            Branch::Seq(cs) => cs.clone(),
            Branch::Identity | Branch::ScaledIdentity(_) => Vec::new(),
            Branch::FixedFilter { filter, scale, pre } => {
                let mut v: Vec<_> = pre.iter().cloned().collect();
                if let Ok(dw) = depthwise_fixed(*filter, scale, pre.as_ref().map_or((0, 0), |p| p.padding)) {
                    v.push(dw);
                }
                v
            }
            Branch::Lora { base, down, up } => {
                let k = (down.shape().h, down.shape().w);
                vec![
                    base.clone(),
                    ConvSpec::new(down.clone(), None).with_padding(((k.0 - 1) / 2, (k.1 - 1) / 2)),
                    ConvSpec::new(up.clone(), None),
                ]
            }
        }
    }

    /// Evaluates the branch with ordinary tensor operations.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Branch::Conv(c) => conv2d(x, c),
            Branch::Seq(cs) => {
                let mut y = x.clone();
                for c in cs {
                    y = conv2d(&y, c)?;
                }
                Ok(y)
            }
            Branch::Identity => Ok(x.clone()),
            Branch::ScaledIdentity(g) => scale_channels(x, g),
            Branch::FixedFilter { filter, scale, pre } => {
                let (y, pre_pad) = match pre {
                    Some(p) => (conv2d(x, p)?, p.padding),
                    None => (x.clone(), (0, 0)),
                };
                conv2d(&y, &depthwise_fixed(*filter, scale, pre_pad)?)
            }
            Branch::ConvBn { conv, bn } => bn.apply(&conv2d(x, conv)?),
            Branch::Lora { base, down, up } => {
                let k = (down.shape().h, down.shape().w);
                let down = ConvSpec::new(down.clone(), None).with_padding(((k.0 - 1) / 2, (k.1 - 1) / 2));
                let low = conv2d(&conv2d(x, &down)?, &ConvSpec::new(up.clone(), None))?;
                tensor::add(&conv2d(x, base)?, &low)
            }
        }
    }

    /// Lowers the branch to a single stride-1, group-1 convolution.
    pub fn lower(&self, channels_in: usize, channels_out: usize, target: (usize, usize)) -> Result<ConvSpec<T>> {
        match self {
            Branch::Conv(c) => Ok(c.clone()),
            Branch::Seq(cs) => {
                let (first, rest) = cs
                    .split_first()
                    .ok_or_else(|| Error::Fusion("empty sequential branch".into()))?;
                rest.iter()
                    .try_fold(first.clone(), |acc, next| fuse_sequential(&acc, next))
            }
            Branch::Identity => {
                if channels_in != channels_out {
                    return Err(Error::Fusion(format!(
                        "identity branch needs C_in == C_out, got {channels_in} -> {channels_out}"
                    )));
                }
                identity_to_kernel(channels_in, target)
            }
            Branch::ScaledIdentity(g) => {
                if g.len() != channels_in || channels_in != channels_out {
                    return Err(Error::Fusion("scaled identity needs one scale per channel".into()));
                }
                let w = Tensor::from_fn(Shape::new(g.len(), g.len(), 1, 1), |o, i, _, _| {
                    if o == i {
                        g[o]
                    } else {
                        T::zero()
                    }
                });
                Ok(ConvSpec::new(w, None))
            }
            Branch::FixedFilter { filter, scale, pre } => {
                embed_fixed_filter(*filter, channels_out, scale, pre.as_ref())
            }
            Branch::ConvBn { conv, bn } => fold_batchnorm(conv, bn),
            Branch::Lora { base, down, up } => {
                let weight = merge_lora(&base.weight, up, down)?;
                Ok(ConvSpec {
                    weight,
                    ..base.clone()
                })
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Branch<U> {
        let cv = |v: &Vec<T>| v.iter().map(|x| U::from_wide(x.to_wide())).collect();
        match self {
            Branch::Conv(c) => Branch::Conv(c.cast()),
            Branch::Seq(cs) => Branch::Seq(cs.iter().map(ConvSpec::cast).collect()),
            Branch::Identity => Branch::Identity,
            Branch::ScaledIdentity(g) => Branch::ScaledIdentity(cv(g)),
            Branch::FixedFilter { filter, scale, pre } => Branch::FixedFilter {
                filter: *filter,
                scale: cv(scale),
                pre: pre.as_ref().map(ConvSpec::cast),
            },
            Branch::ConvBn { conv, bn } => Branch::ConvBn {
                conv: conv.cast(),
                bn: bn.cast(),
            },
            Branch::Lora { base, down, up } => Branch::Lora {
                base: base.cast(),
                down: down.cast(),
                up: up.cast(),
            },
        }
    }
}

fn scale_channels<T: Scalar>(x: &Tensor<T>, g: &[T]) -> Result<Tensor<T>> {
    let s = x.shape();
    if g.len() != s.c {
        return Err(Error::shape("scaled_identity", "c", g.len(), s.c));
    }
    let mut out = x.clone();
    let plane = s.plane();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let c = (i / plane) % s.c;
        *v = T::from_wide(v.to_wide() * g[c].to_wide());
    }
    Ok(out)
}

/// The depthwise form of a scaled fixed filter. Padding is whatever remains
/// of the 3×3 "same" padding after `pre_pad` was applied upstream.
fn depthwise_fixed<T: Scalar>(filter: FixedFilter, scale: &[T], pre_pad: (usize, usize)) -> Result<ConvSpec<T>> {
    if pre_pad.0 > 1 || pre_pad.1 > 1 {
        return Err(Error::Fusion("fixed filter pre-projection pads more than one pixel".into()));
    }
    let k = filter.kernel();
    let c = scale.len();
    let w = Tensor::from_fn(Shape::new(c, 1, 3, 3), |o, _, y, x| {
        T::from_wide(scale[o].to_wide() * k[y][x])
    });
    Ok(ConvSpec::new(w, None)
        .with_groups(c)
        .with_padding((1 - pre_pad.0, 1 - pre_pad.1)))
}

/// A multi-branch block whose branches are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct RepBlockSpec<T: Scalar = f32> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub target: (usize, usize),
    pub branches: Vec<Branch<T>>,
}

impl<T: Scalar> RepBlockSpec<T> {
    pub fn new(in_channels: usize, out_channels: usize, branches: Vec<Branch<T>>) -> Result<Self> {
        if branches.is_empty() {
            return Err(Error::Fusion("a block needs at least one branch".into()));
        }
        Ok(RepBlockSpec {
            in_channels,
            out_channels,
            target: (3, 3),
            branches,
        })
    }

    pub fn with_target(mut self, target: (usize, usize)) -> Self {
        self.target = target;
        self
    }

    /// Sum of the branch outputs, each computed unfused.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for b in &self.branches {
            let y = b.forward(x)?;
            acc = Some(match acc {
                None => y,
                Some(a) => tensor::add(&a, &y)?,
            });
        }
        acc.ok_or_else(|| Error::Fusion("a block needs at least one branch".into()))
    }

    pub fn param_count(&self, include_fixed: bool) -> usize {
        self.branches.iter().map(|b| b.param_count(include_fixed)).sum()
    }

    pub fn fuse(&self) -> Result<ConvSpec<T>> {
        fuse_block(self)
    }

    pub fn cast<U: Scalar>(&self) -> RepBlockSpec<U> {
        RepBlockSpec {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            target: self.target,
            branches: self.branches.iter().map(Branch::cast).collect(),
        }
    }
}

fn require_plain<T: Scalar>(c: &ConvSpec<T>, what: &str) -> Result<()> {
    c.validate()?;
    if c.stride != (1, 1) || c.groups != 1 || c.dilation != (1, 1) {
        return Err(Error::Fusion(format!(
            "{what}: only stride-1, group-1, undilated convolutions fuse"
        )));
    }
    Ok(())
}

fn wide(t: &[impl Scalar]) -> Vec<f64> {
    t.iter().map(|v| v.to_wide()).collect()
}

/// Collapses `b ∘ a` into one convolution. One of the two must be 1×1.
pub fn fuse_sequential<T: Scalar>(a: &ConvSpec<T>, b: &ConvSpec<T>) -> Result<ConvSpec<T>> {
    require_plain(a, "fuse_sequential")?;
    require_plain(b, "fuse_sequential")?;
    if a.out_channels() != b.in_channels() {
        return Err(Error::Fusion(format!(
            "channel mismatch: first produces {}, second expects {}",
            a.out_channels(),
            b.in_channels()
        )));
    }
    if !a.is_pointwise() && !b.is_pointwise() {
        return Err(Error::Fusion(
            "both kernels are larger than 1x1; their composition is not a single kernel of either size".into(),
        ));
    }
    let a_bias = a.bias.as_ref().map(|v| wide(v));
    if b.padding != (0, 0) && a_bias.as_ref().is_some_and(|v| v.iter().any(|&x| x != 0.0)) {
        return Err(Error::Fusion(
            "second convolution pads a biased intermediate; move the padding to the first convolution".into(),
        ));
    }
    let (c_in, mid, c_out) = (a.in_channels(), a.out_channels(), b.out_channels());
    let aw = wide(a.weight.data());
    let bw = wide(b.weight.data());
    let mut bias = b.bias.as_ref().map_or(vec![0.0; c_out], |v| wide(v));

    let (kh, kw, weight) = if a.is_pointwise() {
        // W[o,i,y,x] = Σ_m b[o,m,y,x] · a[m,i]
        let (kh, kw) = b.kernel();
        let taps = kh * kw;
        let mut w = vec![0.0; c_out * c_in * taps];
        for o in 0..c_out {
            for m in 0..mid {
                let bk = &bw[(o * mid + m) * taps..][..taps];
                for i in 0..c_in {
                    let am = aw[m * c_in + i];
                    let dst = &mut w[(o * c_in + i) * taps..][..taps];
                    for (d, &bv) in dst.iter_mut().zip(bk) {
                        *d += bv * am;
                    }
                }
                if let Some(ab) = &a_bias {
                    bias[o] += ab[m] * bk.iter().sum::<f64>();
                }
            }
        }
        (kh, kw, w)
    } else {
        // W[o,i,y,x] = Σ_m b[o,m] · a[m,i,y,x]
        let (kh, kw) = a.kernel();
        let taps = kh * kw;
        let mut w = vec![0.0; c_out * c_in * taps];
        for o in 0..c_out {
            for m in 0..mid {
                let bm = bw[o * mid + m];
                let ak = &aw[m * c_in * taps..][..c_in * taps];
                for (d, &av) in w[o * c_in * taps..][..c_in * taps].iter_mut().zip(ak) {
                    *d += bm * av;
                }
                if let Some(ab) = &a_bias {
                    bias[o] += bm * ab[m];
                }
            }
        }
        (kh, kw, w)
    };

    let has_bias = a.bias.is_some() || b.bias.is_some();
    Ok(ConvSpec {
        weight: Tensor::new(
            Shape::new(c_out, c_in, kh, kw),
            weight.into_iter().map(T::from_wide).collect(),
        )?,
        bias: has_bias.then(|| bias.into_iter().map(T::from_wide).collect()),
        stride: (1, 1),
        padding: (a.padding.0 + b.padding.0, a.padding.1 + b.padding.1),
        dilation: (1, 1),
        groups: 1,
    })
}

/// Zero-pads every kernel to `target` and sums kernels and biases.
pub fn fuse_parallel<T: Scalar>(branches: &[ConvSpec<T>], target: (usize, usize)) -> Result<ConvSpec<T>> {
    let first = branches
        .first()
        .ok_or_else(|| Error::Fusion("no branches to fuse".into()))?;
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Fusion("target kernel must be at least 1x1".into()));
    }
    let (c_in, c_out) = (first.in_channels(), first.out_channels());
    let taps = th * tw;
    let mut w = vec![0.0; c_out * c_in * taps];
    let mut bias = vec![0.0; c_out];
    let mut has_bias = false;
    for (idx, b) in branches.iter().enumerate() {
        require_plain(b, "fuse_parallel")?;
        if b.in_channels() != c_in || b.out_channels() != c_out {
            return Err(Error::Fusion(format!(
                "branch {idx} maps {} -> {} channels, expected {c_in} -> {c_out}",
                b.in_channels(),
                b.out_channels()
            )));
        }
        let (kh, kw) = b.kernel();
        if kh > th || kw > tw || (th - kh) % 2 != 0 || (tw - kw) % 2 != 0 {
            return Err(Error::Fusion(format!(
                "branch {idx} kernel {kh}x{kw} cannot be centred in {th}x{tw}"
            )));
        }
        if b.padding != b.same_padding() {
            return Err(Error::Fusion(format!(
                "branch {idx} padding {:?} does not preserve spatial size",
                b.padding
            )));
        }
        let (oy, ox) = ((th - kh) / 2, (tw - kw) / 2);
        for o in 0..c_out {
            for i in 0..c_in {
                for y in 0..kh {
                    for x in 0..kw {
                        w[((o * c_in + i) * th + oy + y) * tw + ox + x] +=
                            b.weight.at(o, i, y, x).to_wide();
                    }
                }
            }
        }
        if let Some(bb) = &b.bias {
            has_bias = true;
            for (acc, v) in bias.iter_mut().zip(bb) {
                *acc += v.to_wide();
            }
        }
    }
    Ok(ConvSpec {
        weight: Tensor::new(
            Shape::new(c_out, c_in, th, tw),
            w.into_iter().map(T::from_wide).collect(),
        )?,
        bias: has_bias.then(|| bias.into_iter().map(T::from_wide).collect()),
        stride: (1, 1),
        padding: ((th - 1) / 2, (tw - 1) / 2),
        dilation: (1, 1),
        groups: 1,
    })
}

/// The Dirac kernel: `C → C` with a single centre tap per channel.
pub fn identity_to_kernel<T: Scalar>(channels: usize, kernel: (usize, usize)) -> Result<ConvSpec<T>> {
    let (kh, kw) = kernel;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Fusion(format!("identity needs an odd kernel, got {kh}x{kw}")));
    }
    let w = Tensor::from_fn(Shape::new(channels, channels, kh, kw), |o, i, y, x| {
        if o == i && y == kh / 2 && x == kw / 2 {
            T::one()
        } else {
            T::zero()
        }
    });
    Ok(ConvSpec::same(w, None))
}

/// Folds inference batch norm into the preceding convolution.
pub fn fold_batchnorm<T: Scalar>(conv: &ConvSpec<T>, bn: &BatchNorm<T>) -> Result<ConvSpec<T>> {
    conv.validate()?;
    let c = conv.out_channels();
    bn.validate(c)?;
    let per_out = conv.weight.len() / c;
    let mut weight = conv.weight.clone();
    let mut bias = Vec::with_capacity(c);
    for j in 0..c {
        let k = bn.gamma[j].to_wide() / (bn.var[j].to_wide() + bn.eps).sqrt();
        for v in &mut weight.data_mut()[j * per_out..(j + 1) * per_out] {
            *v = T::from_wide(v.to_wide() * k);
        }
        let b0 = conv.bias.as_ref().map_or(0.0, |b| b[j].to_wide());
        bias.push(T::from_wide(bn.beta[j].to_wide() + (b0 - bn.mean[j].to_wide()) * k));
    }
    Ok(ConvSpec {
        weight,
        bias: Some(bias),
        ..conv.clone()
    })
}

/// `W_pt + up ∘ down` as one kernel. `down` is `(r, C_in, k, k)`, `up` is
/// `(C_out, r, 1, 1)`.
pub fn merge_lora<T: Scalar>(base: &Tensor<T>, up: &Tensor<T>, down: &Tensor<T>) -> Result<Tensor<T>> {
    let (bs, us, ds) = (base.shape(), up.shape(), down.shape());
    if us.h != 1 || us.w != 1 {
        return Err(Error::Fusion(format!("up-projection must be 1x1, got {}x{}", us.h, us.w)));
    }
    if us.c != ds.n {
        return Err(Error::Fusion(format!("rank mismatch: up has {}, down has {}", us.c, ds.n)));
    }
    if (us.n, ds.c, ds.h, ds.w) != (bs.n, bs.c, bs.h, bs.w) {
        return Err(Error::Fusion(format!(
            "low-rank product {}x{}x{}x{} does not match base kernel {bs}",
            us.n, ds.c, ds.h, ds.w
        )));
    }
    let rank = us.c;
    let per_out = bs.c * bs.h * bs.w;
    let dw = wide(down.data());
    let mut out = wide(base.data());
    for o in 0..bs.n {
        let dst = &mut out[o * per_out..][..per_out];
        for r in 0..rank {
            let u = up.at(o, r, 0, 0).to_wide();
            for (d, &v) in dst.iter_mut().zip(&dw[r * per_out..][..per_out]) {
                *d += u * v;
            }
        }
    }
    Tensor::new(bs, out.into_iter().map(T::from_wide).collect())
}

/// The fixed filter lowered to a dense `C → C` kernel (optionally composed
/// with a preceding 1×1 projection).
pub fn embed_fixed_filter<T: Scalar>(
    filter: FixedFilter,
    channels: usize,
    scale: &[T],
    pre: Option<&ConvSpec<T>>,
) -> Result<ConvSpec<T>> {
    if scale.len() != channels {
        return Err(Error::shape("embed_fixed_filter", "scale", channels, scale.len()));
    }
    let k = filter.kernel();
    let pre_pad = pre.map_or((0, 0), |p| p.padding);
    if pre_pad.0 > 1 || pre_pad.1 > 1 {
        return Err(Error::Fusion("fixed filter pre-projection pads more than one pixel".into()));
    }
    let w = Tensor::from_fn(Shape::new(channels, channels, 3, 3), |o, i, y, x| {
        if o == i {
            T::from_wide(scale[o].to_wide() * k[y][x])
        } else {
            T::zero()
        }
    });
    let dense = ConvSpec::new(w, None).with_padding((1 - pre_pad.0, 1 - pre_pad.1));
    match pre {
        Some(p) => {
            if !p.is_pointwise() {
                return Err(Error::Fusion("fixed filter pre-projection must be 1x1".into()));
            }
            fuse_sequential(p, &dense)
        }
        None => Ok(dense),
    }
}

/// Lowers every branch and sums them into one kernel of the block's target
/// size.
pub fn fuse_block<T: Scalar>(spec: &RepBlockSpec<T>) -> Result<ConvSpec<T>> {
    let lowered = spec
        .branches
        .iter()
        .map(|b| b.lower(spec.in_channels, spec.out_channels, spec.target))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_parallel(&lowered, spec.target)?;
    if fused.in_channels() != spec.in_channels || fused.out_channels() != spec.out_channels {
        return Err(Error::Fusion(format!(
            "block declares {} -> {} channels but branches map {} -> {}",
            spec.in_channels,
            spec.out_channels,
            fused.in_channels(),
            fused.out_channels()
        )));
    }
    Ok(fused)
}

/// Random convolution with weights uniform in `±1/√fan_in`.
pub fn random_conv<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    c_out: usize,
    c_in: usize,
    k: usize,
    bias: bool,
) -> ConvSpec<T> {
    let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
    let w = Tensor::random_uniform(Shape::new(c_out, c_in, k, k), rng, -bound, bound);
    let b = bias.then(|| {
        (0..c_out)
            .map(|_| T::from_wide(rng.random_range(-bound..bound)))
            .collect()
    });
    ConvSpec::same(w, b)
}

fn random_vec<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::from_wide(rng.random_range(lo..hi))).collect()
}

/// `1×1 → k×k` pair with the padding on the first convolution.
pub fn random_expand_seq<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    c_in: usize,
    mid: usize,
    c_out: usize,
    k: usize,
    bias: bool,
) -> Branch<T> {
    let p = (k - 1) / 2;
    let a = random_conv(rng, mid, c_in, 1, bias).with_padding((p, p));
    let b = random_conv(rng, c_out, mid, k, bias).with_padding((0, 0));
    Branch::Seq(vec![a, b])
}

/// Channel-expansion ("gain") block: for each gain `g`, a
/// `1×1 (C_in → g·C_in) → 3×3 (g·C_in → g·C_out) → 1×1 (g·C_out → C_out)`
/// branch, plus an identity skip when requested and `C_in == C_out`.
pub fn gain_block<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    c_in: usize,
    c_out: usize,
    gains: &[usize],
    skip: bool,
) -> Result<RepBlockSpec<T>> {
    let mut branches = Vec::new();
    for &g in gains {
        let a = random_conv(rng, c_in * g, c_in, 1, true).with_padding((1, 1));
        let b = random_conv(rng, c_out * g, c_in * g, 3, true).with_padding((0, 0));
        let c = random_conv(rng, c_out, c_out * g, 1, true);
        branches.push(Branch::Seq(vec![a, b, c]));
    }
    if skip && c_in == c_out {
        branches.push(Branch::Identity);
    }
    RepBlockSpec::new(c_in, c_out, branches)
}

/// Four `1×1 → 3×3` branches, one `1×1` branch and one `3×3` branch; no
/// skip connection.
pub fn general_rep_block<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    c_in: usize,
    c_out: usize,
) -> Result<RepBlockSpec<T>> {
    let mut branches: Vec<Branch<T>> = (0..4)
        .map(|_| random_expand_seq(rng, c_in, c_out, c_out, 3, true))
        .collect();
    branches.push(Branch::Conv(random_conv(rng, c_out, c_in, 1, true)));
    branches.push(Branch::Conv(random_conv(rng, c_out, c_in, 3, true)));
    RepBlockSpec::new(c_in, c_out, branches)
}

/// Edge-oriented block: a 3×3 conv, a 1×1 conv, a `1×1 → 3×3` pair, the
/// three gradient filters behind 1×1 projections, the high-pass filter and
/// (when shapes allow) an identity skip.
pub fn edge_rep_block<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    c_in: usize,
    c_out: usize,
) -> Result<RepBlockSpec<T>> {
    let mut branches = vec![
        Branch::Conv(random_conv(rng, c_out, c_in, 3, true)),
        Branch::Conv(random_conv(rng, c_out, c_in, 1, true)),
        random_expand_seq(rng, c_in, 2 * c_in, c_out, 3, true),
    ];
    for filter in [FixedFilter::SobelX, FixedFilter::SobelY, FixedFilter::Laplacian] {
        let pre = random_conv(rng, c_out, c_in, 1, true).with_padding((1, 1));
        branches.push(Branch::FixedFilter {
            filter,
            scale: random_vec(rng, c_out, -0.1, 0.1),
            pre: Some(pre),
        });
    }
    if c_in == c_out {
        branches.push(Branch::FixedFilter {
            filter: FixedFilter::Hpf,
            scale: random_vec(rng, c_out, -0.5, 0.5),
            pre: None,
        });
        branches.push(Branch::Identity);
    }
    RepBlockSpec::new(c_in, c_out, branches)
}

/// Batch norm with plausible random statistics.
pub fn random_batchnorm<T: Scalar, R: Rng + ?Sized>(rng: &mut R, c: usize) -> BatchNorm<T> {
    BatchNorm {
        gamma: random_vec(rng, c, 0.5, 1.5),
        beta: random_vec(rng, c, -0.5, 0.5),
        mean: random_vec(rng, c, -0.5, 0.5),
        var: random_vec(rng, c, 0.1, 2.0),
        eps: 1e-5,
    }
}

/// Low-rank branch around a random base: `up` Gaussian, `down` zero when
/// `zero_down` is set (the state before any training), random otherwise.
pub fn random_lora<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    c_in: usize,
    c_out: usize,
    k: usize,
    rank: usize,
    zero_down: bool,
) -> Branch<T> {
    let base = random_conv(rng, c_out, c_in, k, true);
    let up = Tensor::from_fn(Shape::new(c_out, rank, 1, 1), |_, _, _, _| {
        let v: f64 = StandardNormal.sample(rng);
        T::from_wide(0.1 * v)
    });
    let down = if zero_down {
        Tensor::zeros(Shape::new(rank, c_in, k, k))
    } else {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Tensor::random_uniform(Shape::new(rank, c_in, k, k), rng, -bound, bound)
    };
    Branch::Lora { base, down, up }
}

/// A block with one to five branches drawn from every branch kind, for
/// randomized fusion checks. The target kernel is 3×3 or, one time in four,
/// 5×5.
pub fn random_rep_block<T: Scalar, R: Rng + ?Sized>(rng: &mut R, c_in: usize, c_out: usize) -> Result<RepBlockSpec<T>> {
    let k = if rng.random_range(0..4) == 0 { 5 } else { 3 };
    let square = c_in == c_out;
    let n = rng.random_range(1..=5);
    let mut branches = Vec::with_capacity(n);
    while branches.len() < n {
        let bias = rng.random_bool(0.7);
        let branch = match rng.random_range(0..8) {
            0 => {
                let kk = [1, 3, k][rng.random_range(0..3)];
                Branch::Conv(random_conv(rng, c_out, c_in, kk, bias))
            }
            1 => {
                let mid = rng.random_range(1..=2 * c_in.max(c_out));
                random_expand_seq(rng, c_in, mid, c_out, k, bias)
            }
            2 => {
                let g = rng.random_range(1..=3);
                gain_block(rng, c_in, c_out, &[g], false)?.branches.remove(0)
            }
            3 if square => Branch::Identity,
            4 if square => Branch::ScaledIdentity(random_vec(rng, c_out, -1.0, 1.0)),
            5 => {
                let filter = FixedFilter::ALL[rng.random_range(0..FixedFilter::ALL.len())];
                let pre = (!square || rng.random_bool(0.5))
                    .then(|| random_conv(rng, c_out, c_in, 1, bias).with_padding((1, 1)));
                Branch::FixedFilter {
                    filter,
                    scale: random_vec(rng, c_out, -0.5, 0.5),
                    pre,
                }
            }
            6 => Branch::ConvBn {
                conv: random_conv(rng, c_out, c_in, k, bias),
                bn: random_batchnorm(rng, c_out),
            },
            7 => {
                let rank = rng.random_range(1..=4);
                let zero_down = rng.random_bool(0.25);
                random_lora(rng, c_in, c_out, k, rank, zero_down)
            }
            _ => continue,
        };
        branches.push(branch);
    }
    Ok(RepBlockSpec::new(c_in, c_out, branches)?.with_target((k, k)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn rng(seed: u64) -> StdRng {
        StdRng::seed_from_u64(seed)
    }

    fn input(rng: &mut StdRng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::random_uniform(Shape::new(1, c, h, w), rng, -1.0, 1.0)
    }

    #[test]
    fn scaling_first_conv_scales_kernel() {
        let mut r = rng(10);
        let a = ConvSpec::new(
            Tensor::from_fn(Shape::new(3, 3, 1, 1), |o, i, _, _| if o == i { 2.0 } else { 0.0 }),
            None,
        );
        let b: ConvSpec = random_conv(&mut r, 4, 3, 3, false);
        let fused = fuse_sequential(&a, &b).unwrap();
        for (f, k) in fused.weight.data().iter().zip(b.weight.data()) {
            assert!((f - 2.0 * k).abs() < 1e-7);
        }
    }

    #[test]
    fn sequential_forward_equivalence() {
        let mut r = rng(11);
        let x = input(&mut r, 4, 6, 6);
        let a: ConvSpec = random_conv(&mut r, 5, 4, 1, true).with_padding((1, 1));
        let b: ConvSpec = random_conv(&mut r, 3, 5, 3, true).with_padding((0, 0));
        let two_pass = conv2d(&conv2d(&x, &a).unwrap(), &b).unwrap();
        let fused = fuse_sequential(&a, &b).unwrap();
        assert_eq!(fused.padding, (1, 1));
        let one_pass = conv2d(&x, &fused).unwrap();
        assert!(two_pass.max_abs_diff(&one_pass).unwrap() <= 1e-4);

        // k×k then 1×1
        let c: ConvSpec = random_conv(&mut r, 5, 4, 3, true);
        let d: ConvSpec = random_conv(&mut r, 2, 5, 1, true);
        let two_pass = conv2d(&conv2d(&x, &c).unwrap(), &d).unwrap();
        let one_pass = conv2d(&x, &fuse_sequential(&c, &d).unwrap()).unwrap();
        assert!(two_pass.max_abs_diff(&one_pass).unwrap() <= 1e-4);
    }

    #[test]
    fn unbiased_first_conv_may_pad_late() {
        let mut r = rng(12);
        let x = input(&mut r, 3, 5, 7);
        let a: ConvSpec = random_conv(&mut r, 4, 3, 1, false);
        let b: ConvSpec = random_conv(&mut r, 3, 4, 3, true);
        let two_pass = conv2d(&conv2d(&x, &a).unwrap(), &b).unwrap();
        let one_pass = conv2d(&x, &fuse_sequential(&a, &b).unwrap()).unwrap();
        assert!(two_pass.max_abs_diff(&one_pass).unwrap() <= 1e-5);

        let biased: ConvSpec = random_conv(&mut r, 4, 3, 1, true);
        assert!(matches!(fuse_sequential(&biased, &b), Err(Error::Fusion(_))));
    }

    #[test]
    fn bias_contraction_closed_form() {
        // a: 1x1, 2 -> 3 with bias β; b: all-ones 3x3, 3 -> 2, no bias.
        let beta = [0.5f64, -1.25, 2.0];
        let a = ConvSpec::<f64>::new(
            Tensor::from_fn(Shape::new(3, 2, 1, 1), |o, i, _, _| (o * 2 + i) as f64 * 0.1),
            Some(beta.to_vec()),
        )
        .with_padding((1, 1));
        let b = ConvSpec::<f64>::new(Tensor::full(Shape::new(2, 3, 3, 3), 1.0), None);
        let fused = fuse_sequential(&a, &b).unwrap();
        let expected = 9.0 * beta.iter().sum::<f64>();
        for j in 0..2 {
            assert!((fused.bias.as_ref().unwrap()[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn both_large_kernels_rejected() {
        let mut r = rng(13);
        let a: ConvSpec = random_conv(&mut r, 3, 3, 3, false);
        let b: ConvSpec = random_conv(&mut r, 3, 3, 3, false);
        assert!(fuse_sequential(&a, &b).is_err());
        let c: ConvSpec = random_conv(&mut r, 3, 2, 1, false);
        assert!(fuse_sequential(&c, &c).is_err(), "2 -> 3 then 2 -> 3");
    }

    #[test]
    fn parallel_identities() {
        let mut r = rng(14);
        let k: ConvSpec = random_conv(&mut r, 3, 3, 3, true);
        let zero = ConvSpec::same(Tensor::zeros(k.weight.shape()), None);
        assert_eq!(fuse_parallel(&[k.clone(), zero], (3, 3)).unwrap(), k);

        let triple = fuse_parallel(&[k.clone(), k.clone(), k.clone()], (3, 3)).unwrap();
        for (t, v) in triple.weight.data().iter().zip(k.weight.data()) {
            assert!((t - 3.0 * v).abs() < 1e-6);
        }
    }

    #[test]
    fn parallel_mixed_sizes_forward() {
        let mut r = rng(15);
        let x = input(&mut r, 4, 7, 6);
        let one: ConvSpec = random_conv(&mut r, 5, 4, 1, true);
        let three: ConvSpec = random_conv(&mut r, 5, 4, 3, true);
        let fused = fuse_parallel(&[one.clone(), three.clone()], (3, 3)).unwrap();
        let sum = tensor::add(&conv2d(&x, &one).unwrap(), &conv2d(&x, &three).unwrap()).unwrap();
        assert!(sum.max_abs_diff(&conv2d(&x, &fused).unwrap()).unwrap() <= 1e-4);
    }

    #[test]
    fn parallel_rejects_parity_and_size() {
        let mut r = rng(16);
        let even = ConvSpec::<f32>::new(Tensor::zeros(Shape::new(2, 2, 2, 2)), None);
        assert!(fuse_parallel(&[even], (3, 3)).is_err());
        let big: ConvSpec = random_conv(&mut r, 2, 2, 5, false);
        assert!(fuse_parallel(&[big], (3, 3)).is_err());
    }

    #[test]
    fn identity_kernel() {
        let k = identity_to_kernel::<f32>(1, (3, 3)).unwrap();
        assert_eq!(k.weight.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mut r = rng(17);
        let x = input(&mut r, 3, 5, 5);
        let id = identity_to_kernel(3, (3, 3)).unwrap();
        assert_eq!(conv2d(&x, &id).unwrap(), x);
        assert!(identity_to_kernel::<f32>(3, (2, 2)).is_err());

        let kconv: ConvSpec = random_conv(&mut r, 3, 3, 3, true);
        let fused = fuse_parallel(&[kconv.clone(), id], (3, 3)).unwrap();
        let expected = tensor::add(&conv2d(&x, &kconv).unwrap(), &x).unwrap();
        assert!(expected.max_abs_diff(&conv2d(&x, &fused).unwrap()).unwrap() <= 1e-5);
    }

    #[test]
    fn batchnorm_folding() {
        let mut r = rng(18);
        let conv: ConvSpec = random_conv(&mut r, 4, 3, 3, true);
        let eps = 1e-5;
        let neutral = BatchNorm {
            gamma: vec![1.0; 4],
            beta: vec![0.0; 4],
            mean: vec![0.0; 4],
            var: vec![1.0 - eps as f32; 4],
            eps,
        };
        let folded = fold_batchnorm(&conv, &neutral).unwrap();
        assert!(folded.weight.max_abs_diff(&conv.weight).unwrap() < 1e-6);

        let bn = random_batchnorm(&mut r, 4);
        let x = input(&mut r, 3, 6, 5);
        let reference = bn.apply(&conv2d(&x, &conv).unwrap()).unwrap();
        let folded = fold_batchnorm(&conv, &bn).unwrap();
        assert!(reference.max_abs_diff(&conv2d(&x, &folded).unwrap()).unwrap() <= 1e-4);

        let dead = BatchNorm {
            gamma: vec![0.0; 4],
            ..bn.clone()
        };
        let folded = fold_batchnorm(&conv, &dead).unwrap();
        assert!(folded.weight.data().iter().all(|&v| v == 0.0));
        assert_eq!(folded.bias.unwrap(), bn.beta);

        let negative = BatchNorm {
            var: vec![-1.0; 4],
            ..bn
        };
        assert!(fold_batchnorm(&conv, &negative).is_err());
    }

    #[test]
    fn lora_with_zero_factor_is_exact() {
        let mut r = rng(19);
        let Branch::Lora { base, down, up } = random_lora::<f32, _>(&mut r, 4, 4, 3, 2, true) else {
            unreachable!()
        };
        assert_eq!(merge_lora(&base.weight, &up, &down).unwrap(), base.weight);
        let zero_up = Tensor::zeros(up.shape());
        let down = Tensor::random_uniform(down.shape(), &mut r, -1.0, 1.0);
        assert_eq!(merge_lora(&base.weight, &zero_up, &down).unwrap(), base.weight);
    }

    #[test]
    fn lora_forward_equivalence() {
        let mut r = rng(20);
        let branch = random_lora::<f32, _>(&mut r, 4, 5, 3, 2, false);
        let x = input(&mut r, 4, 6, 6);
        let two_path = branch.forward(&x).unwrap();
        let merged = branch.lower(4, 5, (3, 3)).unwrap();
        assert!(two_path.max_abs_diff(&conv2d(&x, &merged).unwrap()).unwrap() <= 1e-4);
        let Branch::Lora { base, down, .. } = branch else { unreachable!() };
        let bad_up = Tensor::zeros(Shape::new(5, 3, 1, 1));
        assert!(merge_lora(&base.weight, &bad_up, &down).is_err());
    }

    #[test]
    fn hpf_is_zero_sum_with_exact_taps() {
        let k = FixedFilter::Hpf.kernel();
        assert_eq!(k[1][1], 0.75);
        assert_eq!(k[0][0], -1.0 / 16.0);
        assert_eq!(k[0][1], -0.125);
        assert_eq!(k.iter().flatten().sum::<f64>(), 0.0);

        let x = Tensor::<f32>::full(Shape::new(1, 2, 5, 5), 3.0);
        let spec = embed_fixed_filter(FixedFilter::Hpf, 2, &[1.0, 1.0], None).unwrap();
        // interior only; zero padding makes the frame non-constant
        let y = conv2d(&x, &spec.with_padding((0, 0))).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn sobel_x_on_horizontal_ramp() {
        let x = Tensor::<f32>::from_fn(Shape::new(1, 1, 5, 6), |_, _, _, j| j as f32);
        let spec = embed_fixed_filter(FixedFilter::SobelX, 1, &[1.0], None).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        // (−1−2−1)(j−1) + (1+2+1)(j+1) = 8 in the interior
        for i in 1..4 {
            for j in 1..5 {
                assert_eq!(y.at(0, 0, i, j), 8.0);
            }
        }
    }

    #[test]
    fn fixed_filter_branch_with_projection() {
        let mut r = rng(21);
        let x = input(&mut r, 3, 6, 6);
        let branch = Branch::FixedFilter {
            filter: FixedFilter::Laplacian,
            scale: vec![0.3f32, -0.7, 1.1, 0.2],
            pre: Some(random_conv(&mut r, 4, 3, 1, true).with_padding((1, 1))),
        };
        let y = branch.forward(&x).unwrap();
        let fused = branch.lower(3, 4, (3, 3)).unwrap();
        assert!(y.max_abs_diff(&conv2d(&x, &fused).unwrap()).unwrap() <= 1e-5);
    }

    #[test]
    fn single_conv_block_returns_that_conv() {
        let mut r = rng(22);
        let k: ConvSpec = random_conv(&mut r, 4, 4, 3, true);
        let block = RepBlockSpec::new(4, 4, vec![Branch::Conv(k.clone())]).unwrap();
        assert_eq!(block.fuse().unwrap(), k);
    }

    #[test]
    fn gain_block_equivalence() {
        let mut r = rng(23);
        let block = gain_block::<f32, _>(&mut r, 6, 6, &[1, 2, 3], true).unwrap();
        assert_eq!(block.branches.len(), 4);
        let x = input(&mut r, 6, 9, 8);
        let fused = block.fuse().unwrap();
        let d = block.forward(&x).unwrap().max_abs_diff(&conv2d(&x, &fused).unwrap()).unwrap();
        assert!(d <= 1e-4, "{d}");
        assert!(fused.param_count() < block.param_count(false));
    }

    #[test]
    fn general_block_equivalence() {
        let mut r = rng(24);
        let block = general_rep_block::<f32, _>(&mut r, 8, 8).unwrap();
        assert_eq!(block.branches.len(), 6);
        let x = input(&mut r, 8, 7, 7);
        let fused = block.fuse().unwrap();
        let d = block.forward(&x).unwrap().max_abs_diff(&conv2d(&x, &fused).unwrap()).unwrap();
        assert!(d <= 1e-4, "{d}");
    }

    #[test]
    fn edge_block_equivalence_in_f64() {
        let mut r = rng(25);
        let block = edge_rep_block::<f64, _>(&mut r, 5, 5).unwrap();
        let x = Tensor::<f64>::random_uniform(Shape::new(2, 5, 6, 7), &mut r, -1.0, 1.0);
        let fused = block.fuse().unwrap();
        let d = block.forward(&x).unwrap().max_abs_diff(&conv2d(&x, &fused).unwrap()).unwrap();
        assert!(d <= 1e-10, "{d}");
    }

    #[test]
    fn identity_branch_needs_square_channels() {
        let block = RepBlockSpec::<f32>::new(3, 4, vec![Branch::Identity]).unwrap();
        assert!(block.fuse().is_err());
        assert!(RepBlockSpec::<f32>::new(3, 3, vec![]).is_err());
    }
}
