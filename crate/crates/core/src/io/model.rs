//! JSON graph description whose weights live in a companion ESRW blob.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::weights::{self, NamedTensor, WeightMap};
use crate::blocks::{ConvLayer, EsaSimplified, ModelGraph, Node, Op, Spab};
use crate::error::{Error, Result};
use crate::reparam::{BatchNorm, Branch, FixedFilter, RepBlockSpec};
use crate::tensor::{Activation, ConvSpec, Shape, Tensor, UpsampleMode};

pub const FORMAT: &str = "esrkit-graph";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub format: String,
    pub version: u32,
    /// Weights blob, relative to the graph file's directory.
    pub weights: String,
    pub in_channels: usize,
    pub scale: usize,
    pub channels: usize,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: String,
    pub op: OpRecord,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OpRecord {
    Conv { layer: LayerRecord },
    Activation { activation: Activation },
    PixelShuffle { factor: usize },
    Upsample { factor: usize, mode: UpsampleMode },
    Add,
    Mul,
    Concat,
    Split { sizes: Vec<usize>, index: usize },
    #[serde(rename = "maxpool")]
    MaxPool { kernel: usize, stride: usize },
    Spab { convs: Vec<LayerRecord>, act: Activation, attn_bias: f64 },
    Esa { reduce: ConvRecord, pool_kernel: usize, pool_stride: usize, body: LayerRecord },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerRecord {
    Plain { conv: ConvRecord },
    Rep {
        in_channels: usize,
        out_channels: usize,
        target: (usize, usize),
        branches: Vec<BranchRecord>,
    },
}

/// A convolution; `weight` and `bias` name tensors in the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvRecord {
    pub weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormRecord {
    pub gamma: String,
    pub beta: String,
    pub mean: String,
    pub var: String,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum BranchRecord {
    Conv { conv: ConvRecord },
    Seq { convs: Vec<ConvRecord> },
    Identity,
    ScaledIdentity { scale: String },
    FixedFilter {
        filter: FixedFilter,
        scale: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pre: Option<ConvRecord>,
    },
    ConvBn { conv: ConvRecord, bn: BatchNormRecord },
    Lora { base: ConvRecord, down: String, up: String },
}

struct Writer {
    weights: WeightMap,
}

impl Writer {
    fn put(&mut self, name: String, dims: Vec<usize>, data: &[f32]) -> String {
        self.weights.insert(name.clone(), NamedTensor { dims, data: data.to_vec() });
        name
    }

    fn tensor(&mut self, name: String, t: &Tensor) -> String {
        self.put(name, t.shape().dims().to_vec(), t.data())
    }

    fn vector(&mut self, name: String, v: &[f32]) -> String {
        self.put(name, vec![v.len()], v)
    }

    fn conv(&mut self, prefix: &str, c: &ConvSpec) -> ConvRecord {
        ConvRecord {
            weight: self.tensor(format!("{prefix}.weight"), &c.weight),
            bias: c.bias.as_ref().map(|b| self.vector(format!("{prefix}.bias"), b)),
            stride: c.stride,
            padding: c.padding,
            dilation: c.dilation,
            groups: c.groups,
        }
    }

    fn branch(&mut self, prefix: &str, b: &Branch) -> BranchRecord {
        match b {
            Branch::Conv(c) => BranchRecord::Conv { conv: self.conv(prefix, c) },
            Branch::Seq(cs) => BranchRecord::Seq {
                convs: cs.iter().enumerate().map(|(i, c)| self.conv(&format!("{prefix}.{i}"), c)).collect(),
            },
            Branch::Identity => BranchRecord::Identity,
            Branch::ScaledIdentity(g) => BranchRecord::ScaledIdentity {
                scale: self.vector(format!("{prefix}.scale"), g),
            },
            Branch::FixedFilter { filter, scale, pre } => BranchRecord::FixedFilter {
                filter: *filter,
                scale: self.vector(format!("{prefix}.scale"), scale),
                pre: pre.as_ref().map(|p| self.conv(&format!("{prefix}.pre"), p)),
            },
            Branch::ConvBn { conv, bn } => BranchRecord::ConvBn {
                conv: self.conv(prefix, conv),
                bn: BatchNormRecord {
                    gamma: self.vector(format!("{prefix}.bn.gamma"), &bn.gamma),
                    beta: self.vector(format!("{prefix}.bn.beta"), &bn.beta),
                    mean: self.vector(format!("{prefix}.bn.mean"), &bn.mean),
                    var: self.vector(format!("{prefix}.bn.var"), &bn.var),
                    eps: bn.eps,
                },
            },
            Branch::Lora { base, down, up } => BranchRecord::Lora {
                base: self.conv(prefix, base),
                down: self.tensor(format!("{prefix}.lora_down"), down),
                up: self.tensor(format!("{prefix}.lora_up"), up),
            },
        }
    }

    fn layer(&mut self, prefix: &str, l: &ConvLayer) -> LayerRecord {
        match l {
            ConvLayer::Plain(c) => LayerRecord::Plain { conv: self.conv(prefix, c) },
            ConvLayer::Rep(b) => LayerRecord::Rep {
                in_channels: b.in_channels,
                out_channels: b.out_channels,
                target: b.target,
                branches: b
                    .branches
                    .iter()
                    .enumerate()
                    .map(|(i, br)| self.branch(&format!("{prefix}.b{i}"), br))
                    .collect(),
            },
        }
    }

    fn op(&mut self, id: &str, op: &Op) -> OpRecord {
        match op {
            Op::Conv(l) => OpRecord::Conv { layer: self.layer(id, l) },
            Op::Activation(a) => OpRecord::Activation { activation: *a },
            Op::PixelShuffle(r) => OpRecord::PixelShuffle { factor: *r },
            Op::Upsample { factor, mode } => OpRecord::Upsample { factor: *factor, mode: *mode },
            Op::Add => OpRecord::Add,
            Op::Mul => OpRecord::Mul,
            Op::Concat => OpRecord::Concat,
            Op::Split { sizes, index } => OpRecord::Split { sizes: sizes.clone(), index: *index },
            Op::MaxPool { kernel, stride } => OpRecord::MaxPool { kernel: *kernel, stride: *stride },
            Op::Spab(s) => OpRecord::Spab {
                convs: s
                    .convs
                    .iter()
                    .enumerate()
                    .map(|(i, l)| self.layer(&format!("{id}.conv{}", i + 1), l))
                    .collect(),
                act: s.act,
                attn_bias: s.attn_bias,
            },
            Op::Esa(e) => OpRecord::Esa {
                reduce: self.conv(&format!("{id}.reduce"), &e.reduce),
                pool_kernel: e.pool_kernel,
                pool_stride: e.pool_stride,
                body: self.layer(&format!("{id}.body"), &e.body),
            },
        }
    }
}

/// Splits a model into its graph description and weights.
pub fn to_records(model: &ModelGraph, weights_file: &str) -> (GraphFile, WeightMap) {
    let mut w = Writer { weights: WeightMap::new() };
    let nodes = model
        .nodes()
        .iter()
        .map(|n| NodeRecord {
            id: n.id.clone(),
            op: w.op(&n.id, &n.op),
            inputs: n.inputs.clone(),
        })
        .collect();
    let graph = GraphFile {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        weights: weights_file.into(),
        in_channels: model.in_channels(),
        scale: model.scale(),
        channels: model.channels(),
        nodes,
    };
    (graph, w.weights)
}

struct Reader<'a> {
    weights: &'a WeightMap,
    used: HashSet<&'a str>,
}

impl<'a> Reader<'a> {
    fn get(&mut self, name: &str) -> Result<&'a NamedTensor> {
        let (key, t) = self
            .weights
            .get_key_value(name)
            .ok_or_else(|| Error::Format(format!("weight {name:?} is not in the weights blob")))?;
        self.used.insert(key.as_str());
        Ok(t)
    }

    fn tensor(&mut self, name: &str) -> Result<Tensor> {
        let t = self.get(name)?;
        match t.dims[..] {
            [n, c, h, w] => Tensor::new(Shape::new(n, c, h, w), t.data.clone()),
            _ => Err(Error::Format(format!("weight {name:?} has rank {}, expected 4", t.dims.len()))),
        }
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        let t = self.get(name)?;
        if t.dims != [len] {
            return Err(Error::Format(format!("weight {name:?} has dims {:?}, expected [{len}]", t.dims)));
        }
        Ok(t.data.clone())
    }

    fn conv(&mut self, r: &ConvRecord) -> Result<ConvSpec> {
        let weight = self.tensor(&r.weight)?;
        let cout = weight.shape().n;
        let bias = r.bias.as_ref().map(|b| self.vector(b, cout)).transpose()?;
        let spec = ConvSpec {
            weight,
            bias,
            stride: r.stride,
            padding: r.padding,
            dilation: r.dilation,
            groups: r.groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn branch(&mut self, r: &BranchRecord, cout: usize) -> Result<Branch> {
        Ok(match r {
            BranchRecord::Conv { conv } => Branch::Conv(self.conv(conv)?),
            BranchRecord::Seq { convs } => Branch::Seq(convs.iter().map(|c| self.conv(c)).collect::<Result<_>>()?),
            BranchRecord::Identity => Branch::Identity,
            BranchRecord::ScaledIdentity { scale } => Branch::ScaledIdentity(self.vector(scale, cout)?),
            BranchRecord::FixedFilter { filter, scale, pre } => Branch::FixedFilter {
                filter: *filter,
                scale: self.vector(scale, cout)?,
                pre: pre.as_ref().map(|p| self.conv(p)).transpose()?,
            },
            BranchRecord::ConvBn { conv, bn } => {
                let conv = self.conv(conv)?;
                let c = conv.out_channels();
                Branch::ConvBn {
                    bn: BatchNorm {
                        gamma: self.vector(&bn.gamma, c)?,
                        beta: self.vector(&bn.beta, c)?,
                        mean: self.vector(&bn.mean, c)?,
                        var: self.vector(&bn.var, c)?,
                        eps: bn.eps,
                    },
                    conv,
                }
            }
            BranchRecord::Lora { base, down, up } => Branch::Lora {
                base: self.conv(base)?,
                down: self.tensor(down)?,
                up: self.tensor(up)?,
            },
        })
    }

    fn layer(&mut self, r: &LayerRecord) -> Result<ConvLayer> {
        Ok(match r {
            LayerRecord::Plain { conv } => ConvLayer::Plain(self.conv(conv)?),
            LayerRecord::Rep {
                in_channels,
                out_channels,
                target,
                branches,
            } => {
                let branches = branches
                    .iter()
                    .map(|b| self.branch(b, *out_channels))
                    .collect::<Result<Vec<_>>>()?;
                ConvLayer::Rep(RepBlockSpec::new(*in_channels, *out_channels, branches)?.with_target(*target))
            }
        })
    }

    fn op(&mut self, r: &OpRecord) -> Result<Op> {
        Ok(match r {
            OpRecord::Conv { layer } => Op::Conv(self.layer(layer)?),
            OpRecord::Activation { activation } => Op::Activation(*activation),
            OpRecord::PixelShuffle { factor } => Op::PixelShuffle(*factor),
            OpRecord::Upsample { factor, mode } => Op::Upsample { factor: *factor, mode: *mode },
            OpRecord::Add => Op::Add,
            OpRecord::Mul => Op::Mul,
            OpRecord::Concat => Op::Concat,
            OpRecord::Split { sizes, index } => Op::Split { sizes: sizes.clone(), index: *index },
            OpRecord::MaxPool { kernel, stride } => Op::MaxPool { kernel: *kernel, stride: *stride },
            OpRecord::Spab { convs, act, attn_bias } => {
                let layers = convs.iter().map(|l| self.layer(l)).collect::<Result<Vec<_>>>()?;
                let convs: [ConvLayer; 3] = layers
                    .try_into()
                    .map_err(|v: Vec<_>| Error::Format(format!("spab needs 3 convolutions, got {}", v.len())))?;
                Op::Spab(Spab { convs, act: *act, attn_bias: *attn_bias })
            }
            OpRecord::Esa { reduce, pool_kernel, pool_stride, body } => Op::Esa(EsaSimplified {
                reduce: self.conv(reduce)?,
                pool_kernel: *pool_kernel,
                pool_stride: *pool_stride,
                body: self.layer(body)?,
            }),
        })
    }
}

/// Rebuilds a model; every referenced weight must exist and every weight
/// in the blob must be referenced.
pub fn from_records(graph: &GraphFile, weights: &WeightMap) -> Result<ModelGraph> {
    if graph.format != FORMAT {
        return Err(Error::Format(format!("graph format is {:?}, expected {FORMAT:?}", graph.format)));
    }
    if graph.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported graph version {}", graph.version)));
    }
    let mut r = Reader { weights, used: HashSet::new() };
    let nodes = graph
        .nodes
        .iter()
        .map(|n| {
            Ok(Node {
                id: n.id.clone(),
                op: r.op(&n.op).map_err(|e| Error::graph(&n.id, e))?,
                inputs: n.inputs.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(unused) = weights.keys().find(|k| !r.used.contains(k.as_str())) {
        return Err(Error::Format(format!("weight {unused:?} is not referenced by the graph")));
    }
    ModelGraph::new(graph.in_channels, graph.scale, graph.channels, nodes)
}

pub fn graph_to_json(graph: &GraphFile) -> Result<String> {
    serde_json::to_string_pretty(graph).map_err(|e| Error::Format(e.to_string()))
}

pub fn graph_from_json(text: &str) -> Result<GraphFile> {
    serde_json::from_str(text).map_err(|e| Error::Format(format!("graph file: {e}")))
}

/// Companion weights path for a graph path: same stem, `.esrw` extension.
pub fn weights_path_for(graph_path: &Path) -> PathBuf {
    graph_path.with_extension("esrw")
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Writes the graph to `graph_path` and the weights next to it.
pub fn save_model(model: &ModelGraph, graph_path: &Path) -> Result<()> {
    let weights_path = weights_path_for(graph_path);
    let file_name = weights_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Io(format!("{}: not a valid file name", weights_path.display())))?;
    let (graph, weights) = to_records(model, file_name);
    let text = graph_to_json(&graph)?;
    let blob = weights::encode(&weights)?;
    std::fs::write(graph_path, text + "\n").map_err(|e| io_err(graph_path, e))?;
    std::fs::write(&weights_path, blob).map_err(|e| io_err(&weights_path, e))?;
    Ok(())
}

pub fn load_model(graph_path: &Path) -> Result<ModelGraph> {
    let text = std::fs::read_to_string(graph_path).map_err(|e| io_err(graph_path, e))?;
    let graph = graph_from_json(&text)?;
    let weights_path = graph_path.parent().unwrap_or(Path::new("")).join(&graph.weights);
    let blob = std::fs::read(&weights_path).map_err(|e| io_err(&weights_path, e))?;
    from_records(&graph, &weights::decode(&blob)?)
}
