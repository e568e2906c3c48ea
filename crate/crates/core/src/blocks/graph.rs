use std::collections::HashMap;

use super::{esa_simplified_forward, spab_forward, ConvLayer, EsaSimplified, Spab};
use crate::error::{Error, Result};
use crate::tensor::{self, Activation, Shape, Tensor, UpsampleMode};

/// Name of the graph's single input.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv(ConvLayer),
    Activation(Activation),
    PixelShuffle(usize),
    Upsample { factor: usize, mode: UpsampleMode },
    Add,
    Mul,
    Concat,
    /// Splits along channels and keeps part `index`.
    Split { sizes: Vec<usize>, index: usize },
    MaxPool { kernel: usize, stride: usize },
    Spab(Spab),
    Esa(EsaSimplified),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv(_) => "conv",
            Op::Activation(_) => "activation",
            Op::PixelShuffle(_) => "pixel_shuffle",
            Op::Upsample { .. } => "upsample",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Concat => "concat",
            Op::Split { .. } => "split",
            Op::MaxPool { .. } => "maxpool",
            Op::Spab(_) => "spab",
            Op::Esa(_) => "esa",
        }
    }

    /// Required number of inputs; `None` means one or more.
    fn arity(&self) -> Option<usize> {
        match self {
            Op::Add | Op::Mul => Some(2),
            Op::Concat => None,
            _ => Some(1),
        }
    }

    pub fn output_shape(&self, inputs: &[Shape]) -> Result<Shape> {
        let x = inputs[0];
        let same_as_first = |op: &'static str| -> Result<Shape> {
            for s in &inputs[1..] {
                if *s != x {
                    return Err(Error::invalid(op, format!("operand shapes {x} and {s} differ")));
                }
            }
            Ok(x)
        };
        match self {
            Op::Conv(layer) => layer.output_shape(x),
            Op::Activation(_) => Ok(x),
            Op::PixelShuffle(r) => {
                if *r == 0 || x.c % (r * r) != 0 {
                    return Err(Error::invalid(
                        "pixel_shuffle",
                        format!("channels {} not divisible by {}", x.c, r * r),
                    ));
                }
                Ok(Shape::new(x.n, x.c / (r * r), x.h * r, x.w * r))
            }
            Op::Upsample { factor, .. } => {
                if *factor == 0 {
                    return Err(Error::invalid("upsample", "factor must be at least 1"));
                }
                Ok(Shape::new(x.n, x.c, x.h * factor, x.w * factor))
            }
            Op::Add => same_as_first("add"),
            Op::Mul => same_as_first("mul"),
            Op::Concat => {
                let mut c = 0;
                for s in inputs {
                    if (s.n, s.h, s.w) != (x.n, x.h, x.w) {
                        return Err(Error::invalid("concat", format!("operand shapes {x} and {s} differ")));
                    }
                    c += s.c;
                }
                Ok(Shape::new(x.n, c, x.h, x.w))
            }
            Op::Split { sizes, index } => {
                let total: usize = sizes.iter().sum();
                if total != x.c {
                    return Err(Error::shape("split", "c", x.c, total));
                }
                let c = *sizes
                    .get(*index)
                    .ok_or_else(|| Error::invalid("split", format!("part {index} of {}", sizes.len())))?;
                Ok(Shape::new(x.n, c, x.h, x.w))
            }
            Op::MaxPool { kernel, stride } => {
                if *kernel == 0 || *stride == 0 {
                    return Err(Error::invalid("maxpool", "window and stride must be at least 1"));
                }
                if x.h < *kernel || x.w < *kernel {
                    return Err(Error::shape("maxpool", "h", *kernel, x.h.min(x.w)));
                }
                Ok(Shape::new(
                    x.n,
                    x.c,
                    (x.h - kernel) / stride + 1,
                    (x.w - kernel) / stride + 1,
                ))
            }
            Op::Spab(b) => {
                for conv in &b.convs {
                    if conv.in_channels() != x.c || conv.out_channels() != x.c {
                        return Err(Error::shape("spab", "c", conv.in_channels(), x.c));
                    }
                }
                Ok(x)
            }
            Op::Esa(e) => e.output_shape(x),
        }
    }

    pub fn run(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        match self {
            Op::Conv(layer) => layer.forward(x),
            Op::Activation(a) => Ok(tensor::activation(x, *a)),
            Op::PixelShuffle(r) => tensor::pixel_shuffle(x, *r),
            Op::Upsample { factor, mode } => tensor::upsample(x, *factor, *mode),
            Op::Add => tensor::add(x, inputs[1]),
            Op::Mul => tensor::mul(x, inputs[1]),
            Op::Concat => tensor::channel_concat(inputs),
            Op::Split { sizes, index } => {
                let mut parts = tensor::channel_split(x, sizes)?;
                if *index >= parts.len() {
                    return Err(Error::invalid("split", format!("part {index} of {}", parts.len())));
                }
                Ok(parts.swap_remove(*index))
            }
            Op::MaxPool { kernel, stride } => tensor::maxpool(x, *kernel, *stride),
            Op::Spab(b) => Ok(spab_forward(x, b)?.0),
            Op::Esa(e) => esa_simplified_forward(x, e),
        }
    }

    /// Convolution layers held by this op, in execution order.
    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        match self {
            Op::Conv(c) => vec![c],
            Op::Spab(b) => b.convs.iter().collect(),
            Op::Esa(e) => vec![&e.body],
            _ => Vec::new(),
        }
    }

    pub fn has_rep(&self) -> bool {
        self.conv_layers().iter().any(|c| c.is_rep())
    }

    pub fn fused(&self) -> Result<Op> {
        Ok(match self {
            Op::Conv(c) => Op::Conv(c.fused()?),
            Op::Spab(b) => Op::Spab(Spab {
                convs: [b.convs[0].fused()?, b.convs[1].fused()?, b.convs[2].fused()?],
                ..b.clone()
            }),
            Op::Esa(e) => Op::Esa(EsaSimplified {
                body: e.body.fused()?,
                ..e.clone()
            }),
            other => other.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<String>,
}

/// Topologically ordered layer list with a single input (named
/// [`INPUT`]) and a single output (the last node).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    in_channels: usize,
    scale: usize,
    channels: usize,
    nodes: Vec<Node>,
    /// Per node, the slots of its inputs: 0 is the graph input, `i + 1`
    /// is node `i`.
    slots: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(in_channels: usize, scale: usize, channels: usize, nodes: Vec<Node>) -> Result<Self> {
        if scale == 0 {
            return Err(Error::graph(INPUT, "scale must be at least 1"));
        }
        let mut seen: HashMap<&str, usize> = HashMap::from([(INPUT, 0)]);
        let mut slots = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if node.inputs.is_empty() {
                return Err(Error::graph(&node.id, "node has no inputs"));
            }
            if let Some(k) = node.op.arity() {
                if node.inputs.len() != k {
                    return Err(Error::graph(
                        &node.id,
                        format!("{} takes {k} inputs, got {}", node.op.kind(), node.inputs.len()),
                    ));
                }
            }
            let resolved = node
                .inputs
                .iter()
                .map(|name| {
                    seen.get(name.as_str()).copied().ok_or_else(|| {
                        Error::graph(&node.id, format!("input `{name}` is not defined earlier"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if seen.insert(&node.id, i + 1).is_some() {
                return Err(Error::graph(&node.id, "duplicate node id"));
            }
            slots.push(resolved);
        }
        Ok(ModelGraph {
            in_channels,
            scale,
            channels,
            nodes,
            slots,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// Feature width, as declared by whoever built the graph.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output_id(&self) -> &str {
        self.nodes.last().map_or(INPUT, |n| n.id.as_str())
    }

    pub fn has_rep(&self) -> bool {
        self.nodes.iter().any(|n| n.op.has_rep())
    }

    /// Per-node input shapes and output shape for a given input shape.
    /// Fails on the first node whose operands do not fit, naming it; also
    /// fails when the output is not the input upscaled by `scale`.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<(Vec<Shape>, Shape)>> {
        if input.c != self.in_channels {
            return Err(Error::graph(INPUT, format!("expected {} channels, got {}", self.in_channels, input.c)));
        }
        let mut shapes = vec![input];
        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, slots) in self.nodes.iter().zip(&self.slots) {
            let ins: Vec<Shape> = slots.iter().map(|&s| shapes[s]).collect();
            let o = node
                .op
                .output_shape(&ins)
                .map_err(|e| Error::graph(&node.id, e))?;
            shapes.push(o);
            out.push((ins, o));
        }
        let last = *shapes.last().unwrap_or(&input);
        if last.h != input.h * self.scale || last.w != input.w * self.scale {
            return Err(Error::graph(
                self.output_id(),
                format!(
                    "output {}x{} is not the {}x{} input upscaled by {}",
                    last.h, last.w, input.h, input.w, self.scale
                ),
            ));
        }
        Ok(out)
    }

    /// Runs the graph node by node. Intermediate tensors are dropped as soon
    /// as their last consumer has run.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        self.infer_shapes(img.shape())?;
        if self.nodes.is_empty() {
            return Ok(img.clone());
        }
        let mut last_use = vec![0usize; self.nodes.len() + 1];
        for (i, slots) in self.slots.iter().enumerate() {
            for &s in slots {
                last_use[s] = i;
            }
        }
        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len() + 1];
        values[0] = Some(img.clone());
        for (i, (node, slots)) in self.nodes.iter().zip(&self.slots).enumerate() {
            let out = {
                let ins: Vec<&Tensor> = slots
                    .iter()
                    .map(|&s| values[s].as_ref().expect("value released before last use"))
                    .collect();
                node.op.run(&ins).map_err(|e| Error::graph(&node.id, e))?
            };
            for &s in slots {
                if last_use[s] == i {
                    values[s] = None;
                }
            }
            values[i + 1] = Some(out);
        }
        Ok(values.pop().flatten().expect("graph output"))
    }
}

/// Free-function form of [`ModelGraph::forward`].
pub fn forward(model: &ModelGraph, img: &Tensor) -> Result<Tensor> {
    model.forward(img)
}

/// Rewrites every multi-branch layer into its single-kernel equivalent.
pub fn fuse_graph(model: &ModelGraph) -> Result<ModelGraph> {
    let nodes = model
        .nodes
        .iter()
        .map(|n| {
            Ok(Node {
                id: n.id.clone(),
                op: n.op.fused().map_err(|e| Error::graph(&n.id, e))?,
                inputs: n.inputs.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelGraph::new(model.in_channels, model.scale, model.channels, nodes)
}

/// Appends nodes in order.
#[derive(Debug)]
pub struct GraphBuilder {
    in_channels: usize,
    scale: usize,
    channels: usize,
    nodes: Vec<Node>,
}

impl GraphBuilder {
    pub fn new(in_channels: usize, scale: usize, channels: usize) -> Self {
        GraphBuilder {
            in_channels,
            scale,
            channels,
            nodes: Vec::new(),
        }
    }

    pub fn add(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        self.nodes.push(Node {
            id: id.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        id.to_string()
    }

    pub fn build(self) -> Result<ModelGraph> {
        ModelGraph::new(self.in_channels, self.scale, self.channels, self.nodes)
    }
}
