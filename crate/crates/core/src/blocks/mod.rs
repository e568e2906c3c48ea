//! Shared building blocks of efficient SR networks, the model graph and its
//! executor.

mod graph;
mod span;

use rand::Rng;

use crate::error::{Error, Result};
use crate::reparam::{self, RepBlockSpec};
use crate::tensor::{self, conv2d, Activation, ConvSpec, Shape, Tensor};

pub use graph::{forward, fuse_graph, GraphBuilder, ModelGraph, Node, Op, INPUT};
pub use span::{build_reference_span, SpanConfig};

/// A convolution slot that is either already a single kernel or still a
/// multi-branch training-time block.
#[derive(Debug, Clone, PartialEq)]
pub enum ConvLayer {
    Plain(ConvSpec),
    Rep(RepBlockSpec),
}

impl ConvLayer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            ConvLayer::Plain(c) => conv2d(x, c),
            ConvLayer::Rep(b) => b.forward(x),
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ConvLayer::Plain(c) => c.in_channels(),
            ConvLayer::Rep(b) => b.in_channels,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ConvLayer::Plain(c) => c.out_channels(),
            ConvLayer::Rep(b) => b.out_channels,
        }
    }

    pub fn is_rep(&self) -> bool {
        matches!(self, ConvLayer::Rep(_))
    }

    pub fn fused(&self) -> Result<ConvLayer> {
        Ok(match self {
            ConvLayer::Plain(c) => ConvLayer::Plain(c.clone()),
            ConvLayer::Rep(b) => ConvLayer::Plain(b.fuse()?),
        })
    }

    pub fn param_count(&self, include_fixed: bool) -> usize {
        match self {
            ConvLayer::Plain(c) => c.param_count(),
            ConvLayer::Rep(b) => b.param_count(include_fixed),
        }
    }

    /// Output shape for an input of shape `x`.
    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        match self {
            ConvLayer::Plain(c) => c.check_input(x),
            ConvLayer::Rep(b) => {
                if x.c != b.in_channels {
                    return Err(Error::shape("rep_conv", "c", b.in_channels, x.c));
                }
                Ok(Shape::new(x.n, b.out_channels, x.h, x.w))
            }
        }
    }
}

/// Swift parameter-free attention block.
///
/// `v = conv₃(act(conv₂(act(conv₁(x)))))`, `a = σ(v) + b`,
/// `out = (x + v) ⊙ a`. The attention has no weights of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Spab {
    pub convs: [ConvLayer; 3],
    pub act: Activation,
    pub attn_bias: f64,
}

impl Spab {
    pub fn channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    fn check(&self, c: usize) -> Result<()> {
        for (i, conv) in self.convs.iter().enumerate() {
            if conv.in_channels() != c || conv.out_channels() != c {
                return Err(Error::invalid(
                    "spab",
                    format!(
                        "conv {} maps {} -> {} channels, block width is {c}",
                        i + 1,
                        conv.in_channels(),
                        conv.out_channels()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Runs a SPAB and returns `(output, attention map)`.
pub fn spab_forward(x: &Tensor, block: &Spab) -> Result<(Tensor, Tensor)> {
    block.check(x.shape().c)?;
    let h1 = tensor::activation(&block.convs[0].forward(x)?, block.act);
    let h2 = tensor::activation(&block.convs[1].forward(&h1)?, block.act);
    let v = block.convs[2].forward(&h2)?;
    let attention = tensor::activation(&v, Activation::ShiftedSigmoid { bias: block.attn_bias });
    let out = tensor::mul(&tensor::add(x, &v)?, &attention)?;
    Ok((out, attention))
}

/// Simplified enhanced spatial attention: a single 3×3 convolution in the
/// reduced branch and no 1×1 projections.
///
/// `g = σ(up(conv(maxpool(reduce(x)))))`, `out = x ⊙ g`, where `reduce` is a
/// stride-2 unpadded 3×3 convolution and `up` resizes bilinearly back to the
/// input size.
#[derive(Debug, Clone, PartialEq)]
pub struct EsaSimplified {
    pub reduce: ConvSpec,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub body: ConvLayer,
}

impl EsaSimplified {
    pub fn channels(&self) -> usize {
        self.reduce.in_channels()
    }

    /// Smallest input side the block accepts.
    pub fn min_side(&self) -> usize {
        let (kh, _) = self.reduce.kernel();
        // (h - k) / s + 1 >= pool  <=>  h >= (pool - 1) * s + k
        (self.pool_kernel - 1) * self.reduce.stride.0 + kh
    }

    pub fn output_shape(&self, x: Shape) -> Result<Shape> {
        let min = self.min_side();
        if x.h < min {
            return Err(Error::shape("esa", "h", min, x.h));
        }
        if x.w < min {
            return Err(Error::shape("esa", "w", min, x.w));
        }
        if x.c != self.channels() || self.body.out_channels() != x.c {
            return Err(Error::shape("esa", "c", self.channels(), x.c));
        }
        Ok(x)
    }

    /// Shapes of the reduced branch for an input of shape `x`:
    /// after `reduce`, after pooling.
    pub fn branch_shapes(&self, x: Shape) -> Result<(Shape, Shape)> {
        self.output_shape(x)?;
        let reduced = self.reduce.check_input(x)?;
        let ph = (reduced.h - self.pool_kernel) / self.pool_stride + 1;
        let pw = (reduced.w - self.pool_kernel) / self.pool_stride + 1;
        Ok((reduced, Shape::new(x.n, reduced.c, ph, pw)))
    }
}

pub fn esa_simplified_forward(x: &Tensor, esa: &EsaSimplified) -> Result<Tensor> {
    let s = esa.output_shape(x.shape())?;
    let reduced = conv2d(x, &esa.reduce)?;
    let pooled = tensor::maxpool(&reduced, esa.pool_kernel, esa.pool_stride)?;
    let body = esa.body.forward(&pooled)?;
    let up = tensor::resize_bilinear(&body, s.h, s.w)?;
    let gate = tensor::activation(&up, Activation::Sigmoid);
    tensor::mul(x, &gate)
}

/// Declarative description of one block, instantiated with random weights.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockConfig {
    Spab {
        channels: usize,
        attn_bias: f64,
        gains: Vec<usize>,
    },
    RepConv {
        in_channels: usize,
        out_channels: usize,
        gains: Vec<usize>,
    },
    /// Re-parameterizable conv with fixed edge-filter branches.
    EdgeBlock { channels: usize },
    EsaSimplified { channels: usize, reduced: usize },
}

impl BlockConfig {
    pub fn spab(channels: usize) -> Self {
        BlockConfig::Spab {
            channels,
            attn_bias: Activation::DEFAULT_SHIFT,
            gains: vec![2],
        }
    }

    pub fn instantiate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Op> {
        match self {
            BlockConfig::Spab {
                channels,
                attn_bias,
                gains,
            } => {
                let c = nonzero(*channels)?;
                let mut conv = || -> Result<ConvLayer> {
                    Ok(ConvLayer::Rep(reparam::gain_block(rng, c, c, gains, true)?))
                };
                Ok(Op::Spab(Spab {
                    convs: [conv()?, conv()?, conv()?],
                    act: Activation::Silu,
                    attn_bias: *attn_bias,
                }))
            }
            BlockConfig::RepConv {
                in_channels,
                out_channels,
                gains,
            } => Ok(Op::Conv(ConvLayer::Rep(reparam::gain_block(
                rng,
                nonzero(*in_channels)?,
                nonzero(*out_channels)?,
                gains,
                true,
            )?))),
            BlockConfig::EdgeBlock { channels } => {
                let c = nonzero(*channels)?;
                Ok(Op::Conv(ConvLayer::Rep(reparam::edge_rep_block(rng, c, c)?)))
            }
            BlockConfig::EsaSimplified { channels, reduced } => {
                let (c, f) = (nonzero(*channels)?, nonzero(*reduced)?);
                let reduce = reparam::random_conv(rng, f, c, 3, true)
                    .with_padding((0, 0))
                    .with_stride((2, 2));
                Ok(Op::Esa(EsaSimplified {
                    reduce,
                    pool_kernel: 7,
                    pool_stride: 3,
                    body: ConvLayer::Plain(reparam::random_conv(rng, c, f, 3, true)),
                }))
            }
        }
    }
}

fn nonzero(c: usize) -> Result<usize> {
    if c == 0 {
        return Err(Error::invalid("block", "channel count must be at least 1"));
    }
    Ok(c)
}
