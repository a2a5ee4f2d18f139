use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dyconv::analysis::{correlation_histogram, run_oracle};
use dyconv::arch::{
    block_table, builtin, count_flops_at, plan_block, ratio_to_original, FusionPath, Network, NetworkSpec, Trace, Variant,
};
use dyconv::dynconv::fuse_kernels;
use dyconv::io::{generate, model_dtype, run_bench, BenchConfig, Dataset, ModelFile, SynthConfig};
use dyconv::training::{evaluate, train, Graph, Mode, TrainConfig};
use dyconv::{ConvGeometry, DType, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Dynamic convolution toolkit: training, evaluation, cost accounting,
/// benchmarks and analysis.
#[derive(Parser)]
#[command(name = "dyconv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic 10-class image dataset.
    GenData(GenDataArgs),
    /// Train a network and write its model file and per-step metrics log.
    Train(TrainArgs),
    /// Print top-1 accuracy of a model on a dataset.
    Eval(EvalArgs),
    /// Print the per-block MAC table of a spec.
    Flops(FlopsArgs),
    /// Time kernel fusion against feature fusion on 1x1 dynamic convs.
    Bench(BenchArgs),
    /// Histogram of channel correlations of every block output.
    Corr(CorrArgs),
    /// Run the seeded noise-cancellation oracle.
    Oracle(OracleArgs),
    /// Dump the per-input fused kernels of every dynamic layer.
    FuseExport(FuseExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Path_ {
    Kernel,
    Feature,
}

impl From<Path_> for FusionPath {
    fn from(p: Path_) -> Self {
        match p {
            Path_::Kernel => FusionPath::Kernel,
            Path_::Feature => FusionPath::Feature,
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    #[arg(long, default_value_t = 0.8)]
    noise: f64,
}

#[derive(Args)]
struct SpecArg {
    /// Spec file, or one of dy-tiny-mobile, fix-tiny-mobile, tiny-mobilenet-v2.
    #[arg(long)]
    spec: String,
    /// Override the bank size of every dynamic block.
    #[arg(long)]
    gt: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArg,
    #[arg(long)]
    data: PathBuf,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Metrics log (`step lr loss top1` per line); stdout when omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    /// TOML training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value = "f32")]
    dtype: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "kernel")]
    path: Path_,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
}

#[derive(Args)]
struct FlopsArgs {
    #[command(flatten)]
    spec: SpecArg,
    /// Square input resolution; the spec's own when omitted.
    #[arg(long)]
    input_size: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 6)]
    gt: usize,
    #[arg(long, value_delimiter = ',', default_value = "56,112,224")]
    input_size: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,128")]
    channels: Vec<usize>,
    #[arg(long, default_value_t = 15)]
    runs: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CorrArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Number of leading samples fed through the network.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
}

#[derive(Args)]
struct FuseExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Sample index inside the dataset.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => match parse_dtype(&a.dtype)? {
            DType::F32 => train_cmd::<f32>(a)?,
            DType::F64 => train_cmd::<f64>(a)?,
        },
        Command::Eval(a) => match file_dtype(&a.model)? {
            DType::F32 => eval_cmd::<f32>(a)?,
            DType::F64 => eval_cmd::<f64>(a)?,
        },
        Command::Flops(a) => flops_cmd(a)?,
        Command::Bench(a) => bench_cmd(a)?,
        Command::Corr(a) => match file_dtype(&a.model)? {
            DType::F32 => corr_cmd::<f32>(a)?,
            DType::F64 => corr_cmd::<f64>(a)?,
        },
        Command::Oracle(a) => return oracle_cmd(a),
        Command::FuseExport(a) => match file_dtype(&a.model)? {
            DType::F32 => fuse_export_cmd::<f32>(a)?,
            DType::F64 => fuse_export_cmd::<f64>(a)?,
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_dtype(s: &str) -> Result<DType> {
    DType::parse(s).with_context(|| format!("unknown dtype {s:?}; expected f32 or f64"))
}

fn file_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    model_dtype(&bytes).with_context(|| format!("reading {}", path.display()))
}

fn load_spec(arg: &SpecArg) -> Result<NetworkSpec> {
    let path = Path::new(&arg.spec);
    let spec = if path.exists() {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        NetworkSpec::parse(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        let name = arg.spec.strip_suffix(".spec").unwrap_or(&arg.spec);
        match builtin(name) {
            Some(s) => s,
            None => bail!("{} is neither a spec file nor a built-in spec name", arg.spec),
        }
    };
    Ok(match arg.gt {
        Some(g) => spec.with_group_size(g)?,
        None => spec,
    })
}

fn output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        noise: a.noise,
        ..SynthConfig::new(a.samples, a.seed)
    };
    generate(&cfg)?.save(&a.out)?;
    Ok(())
}

fn train_cmd<T: Scalar>(a: TrainArgs) -> Result<()> {
    let spec = load_spec(&a.spec)?;
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.base_lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let data = Dataset::load(&a.data)?;
    let mut net = Network::<T>::new(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let mut sink: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(std::io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut write_err = None;
    train(&mut net, &data, &cfg, |log| {
        if write_err.is_none() {
            if let Err(e) = writeln!(sink, "{log}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing metrics log");
    }
    sink.flush()?;
    ModelFile::from_network(&net).save(&a.out)?;
    Ok(())
}

fn eval_cmd<T: Scalar>(a: EvalArgs) -> Result<()> {
    let mut net = ModelFile::<T>::load(&a.model)?.into_network()?;
    let data = Dataset::load(&a.data)?;
    let top1 = evaluate(&mut net, &data, a.batch_size, a.path.into())?;
    println!("top1 {top1:.2}");
    Ok(())
}

fn flops_cmd(a: FlopsArgs) -> Result<()> {
    let spec = load_spec(&a.spec)?;
    let (_, h, w) = spec.input;
    let (h, w) = a.input_size.map_or((h, w), |s| (s, s));
    let report = count_flops_at(&spec, h, w)?;
    println!("# {} at {h}x{w}; MACs", spec.name);
    println!("block kind in out stride gt conv fusion predictor total ratio_to_original");
    let stem = report.scope_total("stem");
    println!("stem conv {} {} {} - {stem} 0 0 {stem} -", spec.input.0, spec.stem.out_channels, spec.stem.stride);
    let stem_geom = ConvGeometry::same(
        spec.input.0,
        spec.stem.out_channels,
        spec.stem.kernel_size,
        spec.stem.stride,
        1,
    )?;
    let mut hw = stem_geom.output_hw(h, w)?;
    for (row, b) in block_table(&spec, &report).iter().zip(&spec.blocks) {
        let ratio = if b.kind.variant == Variant::Original {
            "-".to_string()
        } else {
            ratio_to_original(b, hw)?.to_string()
        };
        println!(
            "{} {} {} {} {} {} {} {} {} {} {ratio}",
            row.index,
            row.kind,
            b.in_channels,
            b.out_channels,
            b.stride,
            b.group_size,
            row.conv,
            row.fusion,
            row.predictor,
            row.total()
        );
        hw = plan_block(b, hw)?.out_hw;
    }
    let head = report.scope_total("head");
    println!("head fc - - - - {head} 0 0 {head} -");
    println!("total {}", report.total());
    println!("overhead {}", report.overhead());
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        group_size: a.gt,
        channels: a.channels,
        input_sizes: a.input_size,
        batch: 1,
        warmup: a.warmup,
        runs: a.runs,
        seed: a.seed,
    };
    output(a.out.as_deref(), &run_bench(&cfg)?.to_text())
}

fn corr_cmd<T: Scalar>(a: CorrArgs) -> Result<()> {
    let mut net = ModelFile::<T>::load(&a.model)?.into_network()?;
    let data = Dataset::load(&a.data)?;
    let n = a.samples.min(data.len());
    if n == 0 {
        bail!("no samples to analyze");
    }
    let (x, _) = data.batch::<T>(&(0..n).collect::<Vec<_>>())?;
    let mut g = Graph::new();
    let input = g.input(x);
    let mut trace = Trace::default();
    net.forward_traced(&mut g, input, Mode::Eval, FusionPath::Kernel, Some(&mut trace))?;
    let mut text = String::new();
    for (i, node) in trace.block_outputs.iter().enumerate() {
        text.push_str(&format!("## block{i}\n"));
        text.push_str(&correlation_histogram(g.value(*node)?)?.to_text());
    }
    output(a.out.as_deref(), &text)
}

fn oracle_cmd(a: OracleArgs) -> Result<ExitCode> {
    let s = run_oracle(a.seed, a.trials)?;
    println!("trials {}", s.trials);
    println!("max_det_error {:.3e}", s.max_det_error);
    println!("max_beta_error {:.3e}", s.max_beta_error);
    println!("max_alpha_error {:.3e}", s.max_alpha_error);
    println!("max_residual {:.3e}", s.max_residual);
    println!("max_reconstruction_error {:.3e}", s.max_reconstruction_error);
    println!("max_fused_error {:.3e}", s.max_fused_error);
    let ok = s.max_det_error < 1e-8 && s.max_beta_error < 1e-8;
    println!("{}", if ok { "PASS" } else { "FAIL" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn fuse_export_cmd<T: Scalar>(a: FuseExportArgs) -> Result<()> {
    let mut net = ModelFile::<T>::load(&a.model)?.into_network()?;
    let data = Dataset::load(&a.data)?;
    if a.index >= data.len() {
        bail!("sample {} outside a dataset of {}", a.index, data.len());
    }
    let (x, _) = data.batch::<T>(&[a.index])?;
    let mut g = Graph::new();
    let input = g.input(x);
    let mut trace = Trace::default();
    net.forward_traced(&mut g, input, Mode::Eval, FusionPath::Kernel, Some(&mut trace))?;
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    for (name, node) in &trace.coefficients {
        let (block, layer) = name
            .strip_prefix("block")
            .and_then(|r| r.split_once('.'))
            .with_context(|| format!("unexpected layer name {name}"))?;
        let dyn_layer = net.dynamic_layer(block.parse()?, layer)?;
        let eta = g.value(*node)?;
        tensors.push((format!("{name}.fused"), fuse_kernels(&dyn_layer, eta.data())?));
        tensors.push((format!("{name}.coefficients"), eta.clone()));
    }
    if tensors.is_empty() {
        bail!("{} has no dynamic layers", net.spec().name);
    }
    ModelFile {
        spec: net.spec().clone(),
        tensors,
    }
    .save(&a.out)?;
    Ok(())
}
