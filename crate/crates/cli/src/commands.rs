use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde_json::json;

use esrkit::blocks::{fuse_graph, ModelGraph, SpanConfig};
use esrkit::io::{self, image::quantize};
use esrkit::metrics::{psnr, PsnrMode, DEFAULT_SHAVE};
use esrkit::profiler::{self, FlopConvention, RuntimeConfig};
use esrkit::scoring::{self, Baseline, ScoreWeights};
use esrkit::{Error, Tensor};

#[derive(Debug, Parser)]
#[command(name = "esrkit", version, about = "Efficient super-resolution toolkit")]
pub struct Cli {
    /// Worker threads for the inference engine (0 = all cores).
    #[arg(long, global = true, env = "ESRKIT_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a SPAN-style model with random weights.
    BuildSpan(BuildSpanArgs),
    /// Upscale an image.
    Infer(InferArgs),
    /// Collapse every multi-branch convolution into a single kernel.
    Fuse(FuseArgs),
    /// Count parameters and FLOPs and time inference.
    Profile(ProfileArgs),
    /// PSNR between two images.
    Psnr(PsnrArgs),
    /// Score and rank a leaderboard CSV.
    Score(ScoreArgs),
    /// Paired runtime of a model and its fused form.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct BuildSpanArgs {
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    depth: usize,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Channel-expansion gains of each multi-branch conv.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    gains: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fuse the model before running it.
    #[arg(long)]
    fused: bool,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProfileArgs {
    #[arg(long)]
    model: PathBuf,
    /// Input size as HxW.
    #[arg(long, default_value = "256x256", value_parser = parse_hw)]
    input: (usize, usize),
    /// Timed repetitions; 0 skips timing.
    #[arg(long, default_value_t = profiler::DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = profiler::DEFAULT_WARMUP)]
    warmup: usize,
    /// FLOPs per multiply-accumulate (1 or 2).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..=2))]
    mac_factor: u64,
    /// Also count activations and other per-element ops.
    #[arg(long)]
    include_elementwise: bool,
    /// Leave fixed filter taps out of the parameter count.
    #[arg(long)]
    exclude_fixed: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct PsnrArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SHAVE)]
    shave: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, default_value_t = Baseline::default().runtime)]
    baseline_runtime: f64,
    #[arg(long, default_value_t = Baseline::default().params)]
    baseline_params: f64,
    #[arg(long, default_value_t = Baseline::default().flops)]
    baseline_flops: f64,
    /// Validation and test PSNR floors.
    #[arg(long, value_delimiter = ',', num_args = 1, default_value = "26.90,26.99")]
    thresholds: Vec<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "64x64", value_parser = parse_hw)]
    input: (usize, usize),
    #[arg(long, default_value_t = profiler::DEFAULT_REPS)]
    reps: usize,
    #[arg(long, default_value_t = profiler::DEFAULT_WARMUP)]
    warmup: usize,
    #[arg(long)]
    json: bool,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(h), parse(w)) {
        (Some(h), Some(w)) => Ok((h, w)),
        _ => Err(format!("expected positive HxW, got {s:?}")),
    }
}

pub struct Failure {
    pub prefix: &'static str,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let prefix = match &e {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument { .. } => "invalid",
            Error::Fusion(_) => "fusion",
            Error::Graph { .. } => "graph",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
        };
        Failure {
            prefix,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        prefix: "invalid",
        message: message.into(),
    }
}

type CmdResult = Result<(), Failure>;

pub fn run(cli: Cli) -> CmdResult {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| invalid(format!("thread pool: {e}")))?;
    match cli.command {
        Command::BuildSpan(a) => build_span(a),
        Command::Infer(a) => infer(a),
        Command::Fuse(a) => fuse(a),
        Command::Profile(a) => profile(a, cli.threads),
        Command::Psnr(a) => psnr_cmd(a),
        Command::Score(a) => score(a),
        Command::Bench(a) => bench(a, cli.threads),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn build_span(a: BuildSpanArgs) -> CmdResult {
    let config = SpanConfig {
        gains: a.gains,
        seed: a.seed,
        ..SpanConfig::new(a.channels, a.depth, a.scale)
    };
    let model = config.build()?;
    io::save_model(&model, &a.out)?;
    println!(
        "wrote {} ({} params)",
        a.out.display(),
        profiler::count_params(&model, true)
    );
    Ok(())
}

fn load(path: &Path, fused: bool) -> Result<ModelGraph, Failure> {
    let model = io::load_model(path)?;
    Ok(if fused { fuse_graph(&model)? } else { model })
}

/// Maps 0–255 pixels to the unit range the models work on and back.
fn run_on_image(model: &ModelGraph, img: &Tensor) -> Result<Tensor, Failure> {
    if img.shape().c != model.in_channels() {
        return Err(Failure::from(Error::Shape {
            op: "infer",
            dim: "c",
            expected: model.in_channels(),
            actual: img.shape().c,
        }));
    }
    let y = model.forward(&img.map(|v| v / 255.0))?;
    Ok(y.map(|v| v * 255.0))
}

fn infer(a: InferArgs) -> CmdResult {
    let model = load(&a.model, a.fused)?;
    let img = io::read_image(&a.input)?;
    let out = run_on_image(&model, &img)?;
    io::write_image(&a.out, &out)?;
    let s = out.shape();
    println!("wrote {} ({}x{})", a.out.display(), s.h, s.w);
    Ok(())
}

fn fuse(a: FuseArgs) -> CmdResult {
    let model = io::load_model(&a.model)?;
    let fused = fuse_graph(&model)?;
    io::save_model(&fused, &a.out)?;
    println!(
        "wrote {}: params {} -> {}",
        a.out.display(),
        profiler::count_params(&model, true),
        profiler::count_params(&fused, true)
    );
    Ok(())
}

fn profile(a: ProfileArgs, threads: usize) -> CmdResult {
    let model = io::load_model(&a.model)?;
    let convention = FlopConvention {
        mac_factor: a.mac_factor,
        include_elementwise: a.include_elementwise,
    };
    let runtime = (a.reps > 0).then_some(RuntimeConfig {
        input_hw: a.input,
        warmup: a.warmup,
        reps: a.reps,
        threads,
        seed: 0,
    });
    let report = profiler::profile(&model, a.input, convention, !a.exclude_fixed, runtime)?;
    if a.json {
        print_json(&serde_json::to_value(&report).expect("serializable"));
        return Ok(());
    }
    println!("input      {}x{}", report.input_hw.0, report.input_hw.1);
    println!("params     {} ({:.4} M)", report.params, report.params_m);
    println!(
        "flops      {} ({:.4} G, {} per MAC)",
        report.flops, report.flops_g, report.mac_factor
    );
    if let Some(r) = &report.runtime {
        println!(
            "runtime    mean {:.3} ms, median {:.3} ms over {} reps ({} threads, {})",
            r.mean_ms, r.median_ms, r.reps, r.threads, r.cpu_model
        );
    }
    Ok(())
}

fn psnr_cmd(a: PsnrArgs) -> CmdResult {
    let x = io::read_image(&a.a)?;
    let y = io::read_image(&a.b)?;
    let p = psnr(&x, &y, a.shave, PsnrMode::Quantized)?;
    if a.json {
        let value = if p.is_finite() { json!(p) } else { json!(null) };
        print_json(&json!({ "psnr_db": value, "infinite": p.is_infinite(), "shave": a.shave }));
    } else if p.is_infinite() {
        println!("inf");
    } else {
        println!("{p:.4}");
    }
    Ok(())
}

fn score(a: ScoreArgs) -> CmdResult {
    let [val, test] = a.thresholds[..] else {
        return Err(invalid(format!(
            "--thresholds takes two values (validation,test), got {}",
            a.thresholds.len()
        )));
    };
    let baseline = Baseline {
        runtime: a.baseline_runtime,
        params: a.baseline_params,
        flops: a.baseline_flops,
        psnr_val: val,
        psnr_test: test,
    };
    let records = scoring::load_records(&a.csv)?;
    let reports = scoring::rank(&records, &baseline, ScoreWeights::default())?;
    if a.json {
        print_json(&json!({ "baseline": baseline, "records": reports }));
    } else {
        print!("{}", scoring::format_table(&reports));
    }
    Ok(())
}

fn bench(a: BenchArgs, threads: usize) -> CmdResult {
    let model = io::load_model(&a.model)?;
    let fused = fuse_graph(&model)?;
    let cfg = RuntimeConfig {
        input_hw: a.input,
        warmup: a.warmup,
        reps: a.reps,
        threads,
        seed: 0,
    };
    let (slow, fast) = profiler::measure_paired(&model, &fused, cfg)?;

    // gray-level agreement on the benchmark input, scaled to 8 bits
    let x = Tensor::random_uniform(
        esrkit::Shape::new(1, model.in_channels(), a.input.0, a.input.1),
        &mut StdRng::seed_from_u64(0),
        0.0,
        255.0,
    );
    let ya = run_on_image(&model, &x)?;
    let yb = run_on_image(&fused, &x)?;
    let max_gray = ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(&p, &q)| (quantize(p) as i32 - quantize(q) as i32).abs())
        .max()
        .unwrap_or(0);

    let params = (profiler::count_params(&model, true), profiler::count_params(&fused, true));
    if a.json {
        print_json(&json!({
            "input_hw": a.input,
            "unfused": { "params": params.0, "runtime": slow },
            "fused": { "params": params.1, "runtime": fast },
            "speedup_median": slow.median_ms / fast.median_ms,
            "max_gray_level_diff": max_gray,
        }));
    } else {
        println!("input      {}x{}, {} paired reps", a.input.0, a.input.1, slow.reps);
        println!(
            "unfused    {} params, median {:.3} ms, mean {:.3} ms",
            params.0, slow.median_ms, slow.mean_ms
        );
        println!(
            "fused      {} params, median {:.3} ms, mean {:.3} ms",
            params.1, fast.median_ms, fast.mean_ms
        );
        println!("speedup    {:.2}x (median)", slow.median_ms / fast.median_ms);
        println!("max |diff| {max_gray} gray levels");
    }
    Ok(())
}
