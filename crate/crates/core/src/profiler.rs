//! Parameter, FLOP and wall-clock runtime measurement of a [`ModelGraph`].

use std::time::Instant;

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ConvLayer, ModelGraph, Op};
use crate::error::{Error, Result};
use crate::reparam::Branch;
use crate::tensor::{ConvSpec, Shape, Tensor};

pub const DEFAULT_INPUT_HW: (usize, usize) = (256, 256);
pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_REPS: usize = 50;

/// Learnable parameters of every layer, counting each re-parameterizable
/// block in its current (possibly unfused) form. Fixed filter taps are
/// included when `include_fixed` is set.
pub fn count_params(model: &ModelGraph, include_fixed: bool) -> usize {
    model
        .nodes()
        .iter()
        .map(|node| match &node.op {
            Op::Esa(e) => e.reduce.param_count() + e.body.param_count(include_fixed),
            op => op.conv_layers().iter().map(|c| c.param_count(include_fixed)).sum(),
        })
        .sum()
}

/// How FLOPs are tallied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopConvention {
    /// FLOPs per multiply-accumulate: 1, or 2 to also count bias adds.
    pub mac_factor: u64,
    /// Count one op per output element of activations, element-wise
    /// arithmetic, resampling and attention gating.
    pub include_elementwise: bool,
}

impl Default for FlopConvention {
    fn default() -> Self {
        FlopConvention {
            mac_factor: 1,
            include_elementwise: false,
        }
    }
}

fn conv_flops(spec: &ConvSpec, x: Shape, conv: FlopConvention) -> Result<(u64, Shape)> {
    let out = spec.check_input(x)?;
    let (kh, kw) = spec.kernel();
    let per_out = (spec.in_channels() * kh * kw) as u64;
    let outputs = out.len() as u64;
    let mut flops = outputs * per_out * conv.mac_factor;
    if conv.mac_factor >= 2 && spec.bias.is_some() {
        flops += outputs;
    }
    Ok((flops, out))
}

fn layer_flops(layer: &ConvLayer, x: Shape, conv: FlopConvention) -> Result<(u64, Shape)> {
    let block = match layer {
        ConvLayer::Plain(c) => return conv_flops(c, x, conv),
        ConvLayer::Rep(b) => b,
    };
    let out = layer.output_shape(x)?;
    let mut total = 0;
    for branch in &block.branches {
        let mut s = x;
        for spec in branch.unfused_convs() {
            let (f, next) = conv_flops(&spec, s, conv)?;
            total += f;
            s = next;
        }
        if conv.include_elementwise {
            let extra = match branch {
                Branch::ScaledIdentity(_) | Branch::ConvBn { .. } => 1,
                Branch::Lora { .. } => 1,
                _ => 0,
            };
            total += extra * out.len() as u64;
        }
    }
    if conv.include_elementwise {
        // branch summation
        total += (block.branches.len() as u64 - 1) * out.len() as u64;
    }
    Ok((total, out))
}

fn op_flops(op: &Op, inputs: &[Shape], out: Shape, conv: FlopConvention) -> Result<u64> {
    let x = inputs[0];
    let elems = out.len() as u64;
    let ew = |n: u64| if conv.include_elementwise { n * elems } else { 0 };
    Ok(match op {
        Op::Conv(layer) => layer_flops(layer, x, conv)?.0,
        Op::Spab(b) => {
            let mut total = 0;
            for layer in &b.convs {
                total += layer_flops(layer, x, conv)?.0;
            }
            // two activations, attention sigmoid, residual add, gating
            total + ew(5)
        }
        Op::Esa(e) => {
            let (_, pooled) = e.branch_shapes(x)?;
            let (reduce, _) = conv_flops(&e.reduce, x, conv)?;
            let (body, _) = layer_flops(&e.body, pooled, conv)?;
            let pool = if conv.include_elementwise { pooled.len() as u64 } else { 0 };
            // resize, sigmoid, gating
            reduce + body + pool + ew(3)
        }
        Op::Activation(_) | Op::Add | Op::Mul | Op::PixelShuffle(_) | Op::Upsample { .. } | Op::MaxPool { .. } => {
            ew(1)
        }
        Op::Concat | Op::Split { .. } => 0,
    })
}

/// FLOPs of one forward pass on a `1 × C × h × w` input. Multi-branch
/// blocks are counted branch by branch as they execute unfused.
pub fn count_flops(model: &ModelGraph, input_hw: (usize, usize), conv: FlopConvention) -> Result<u64> {
    if conv.mac_factor == 0 {
        return Err(Error::invalid("count_flops", "mac factor must be at least 1"));
    }
    let input = Shape::new(1, model.in_channels(), input_hw.0, input_hw.1);
    let shapes = model.infer_shapes(input)?;
    let mut total = 0;
    for (node, (ins, out)) in model.nodes().iter().zip(&shapes) {
        total += op_flops(&node.op, ins, *out, conv).map_err(|e| Error::graph(&node.id, e))?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub min_ms: f64,
    pub reps: usize,
    pub warmup: usize,
    pub threads: usize,
    pub cpu_model: String,
}

impl RuntimeStats {
    fn from_samples(mut samples: Vec<f64>, warmup: usize, threads: usize) -> Self {
        let reps = samples.len();
        let mean_ms = samples.iter().sum::<f64>() / reps as f64;
        samples.sort_by(f64::total_cmp);
        let median_ms = if reps % 2 == 1 {
            samples[reps / 2]
        } else {
            0.5 * (samples[reps / 2 - 1] + samples[reps / 2])
        };
        RuntimeStats {
            mean_ms,
            median_ms,
            min_ms: samples[0],
            reps,
            warmup,
            threads,
            cpu_model: cpu_model(),
        }
    }
}

/// Timing harness settings. `threads == 0` uses rayon's default count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuntimeConfig {
    pub input_hw: (usize, usize),
    pub warmup: usize,
    pub reps: usize,
    pub threads: usize,
    pub seed: u64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            input_hw: DEFAULT_INPUT_HW,
            warmup: DEFAULT_WARMUP,
            reps: DEFAULT_REPS,
            threads: 0,
            seed: 0,
        }
    }
}

/// First "model name" line of /proc/cpuinfo, or "unknown".
pub fn cpu_model() -> String {
    std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown".into())
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid("runtime", e.to_string()))
}

fn bench_input(model: &ModelGraph, cfg: &RuntimeConfig) -> Result<Tensor> {
    if cfg.reps == 0 {
        return Err(Error::invalid("runtime", "reps must be at least 1"));
    }
    let shape = Shape::new(1, model.in_channels(), cfg.input_hw.0, cfg.input_hw.1);
    model.infer_shapes(shape)?;
    Ok(Tensor::random_uniform(shape, &mut StdRng::seed_from_u64(cfg.seed), 0.0, 1.0))
}

fn time_once(model: &ModelGraph, x: &Tensor) -> Result<f64> {
    let start = Instant::now();
    let y = model.forward(x)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    std::hint::black_box(y);
    Ok(ms)
}

/// Mean and median wall-clock forward time on a fixed random input, run
/// inside a private thread pool.
pub fn measure_runtime(model: &ModelGraph, cfg: RuntimeConfig) -> Result<RuntimeStats> {
    let x = bench_input(model, &cfg)?;
    let pool = pool(cfg.threads)?;
    let threads = pool.current_num_threads();
    pool.install(|| {
        for _ in 0..cfg.warmup {
            time_once(model, &x)?;
        }
        let samples = (0..cfg.reps).map(|_| time_once(model, &x)).collect::<Result<Vec<_>>>()?;
        Ok(RuntimeStats::from_samples(samples, cfg.warmup, threads))
    })
}

/// Times two models on the same input with interleaved repetitions, so
/// that drift in machine load affects both alike.
pub fn measure_paired(a: &ModelGraph, b: &ModelGraph, cfg: RuntimeConfig) -> Result<(RuntimeStats, RuntimeStats)> {
    let x = bench_input(a, &cfg)?;
    b.infer_shapes(x.shape())?;
    let pool = pool(cfg.threads)?;
    let threads = pool.current_num_threads();
    pool.install(|| {
        for _ in 0..cfg.warmup {
            time_once(a, &x)?;
            time_once(b, &x)?;
        }
        let (mut sa, mut sb) = (Vec::with_capacity(cfg.reps), Vec::with_capacity(cfg.reps));
        for i in 0..cfg.reps {
            if i % 2 == 0 {
                sa.push(time_once(a, &x)?);
                sb.push(time_once(b, &x)?);
            } else {
                sb.push(time_once(b, &x)?);
                sa.push(time_once(a, &x)?);
            }
        }
        Ok((
            RuntimeStats::from_samples(sa, cfg.warmup, threads),
            RuntimeStats::from_samples(sb, cfg.warmup, threads),
        ))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub params: usize,
    pub params_m: f64,
    pub flops: u64,
    pub flops_g: f64,
    pub input_hw: (usize, usize),
    pub mac_factor: u64,
    pub include_elementwise: bool,
    pub include_fixed: bool,
    pub runtime: Option<RuntimeStats>,
}

/// Params and FLOPs, plus runtime when `runtime` is given.
pub fn profile(
    model: &ModelGraph,
    input_hw: (usize, usize),
    conv: FlopConvention,
    include_fixed: bool,
    runtime: Option<RuntimeConfig>,
) -> Result<ProfileReport> {
    let params = count_params(model, include_fixed);
    let flops = count_flops(model, input_hw, conv)?;
    let runtime = runtime
        .map(|cfg| measure_runtime(model, RuntimeConfig { input_hw, ..cfg }))
        .transpose()?;
    Ok(ProfileReport {
        params,
        params_m: params as f64 / 1e6,
        flops,
        flops_g: flops as f64 / 1e9,
        input_hw,
        mac_factor: conv.mac_factor,
        include_elementwise: conv.include_elementwise,
        include_fixed,
        runtime,
    })
}
