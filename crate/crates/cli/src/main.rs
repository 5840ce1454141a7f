use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lynx_core::analysis::{
    compare_methods, fit_stack_lora, layer_sweep, method_ladder, write_comparison_csv,
    write_sweep_csv, ComparisonReport, ReportHeader, SweepReport,
};
use lynx_core::bench::{preset_cases, run_bench, write_csv, BenchCase};
use lynx_core::io::{self as lio, Tensor};
use lynx_core::lowrank::{
    gd_fit, rrr_fit, slim_init, split_batches, LoraPair, LoraSidecar, TrainConfig, DEFAULT_RANK,
};
use lynx_core::model::{build_stack, forward, ExecPolicy, LayerMode, Preset, Stack, StackConfig};
use lynx_core::sparsify::{prune_weights, score_weights, CompensationGranularity, ScoreSpec};
use lynx_core::spmm::{fused_sparse_linear, fused_sparse_lora_linear, spmm, KernelConfig};
use lynx_core::tensor::{column_l2_norms, sample, DenseMatrix, RandomSpec};
use lynx_core::{pack, sparsify_activation, LynxError, NMPattern, DEFAULT_EPS};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

/// Errors in how the tool was invoked rather than in the data it read.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// N:M activation sparsity toolkit: sparsify, pack, multiply, fit
/// compensation, sweep stacks and benchmark kernels.
#[derive(Parser, Debug)]
#[command(name = "lynx", version)]
struct Cli {
    /// Worker threads for parallel kernels and sweeps (0 = all cores).
    #[arg(long, global = true, env = "LYNX_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Top-K sparsify a dense activation tensor with norm compensation.
    Sparsify(SparsifyArgs),
    /// Compress an already N:M-sparse dense tensor into the packed format.
    Pack(PackArgs),
    /// Multiply a packed (or dense, sparsified on the fly) input by a weight.
    Spmm(SpmmArgs),
    /// Fit a low-rank compensation pair for one or more stack layers.
    Fit(FitArgs),
    /// Per-layer weight vs activation sparsification errors for a stack.
    Sweep(SweepArgs),
    /// End-to-end comparison of the activation-sparsity method ladder.
    Compare(CompareArgs),
    /// Time dense, staged and fused kernels.
    Bench(BenchArgs),
    /// Build a synthetic stack and save it to a directory.
    StackBuild(StackBuildArgs),
    /// Check a tensor file, stack, LoRA directory, JSON or CSV written by this tool.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Clone)]
struct SparsityOpts {
    /// Sparsity pattern as N:M.
    #[arg(long, default_value = "2:4")]
    pattern: NMPattern,
    /// Norm-compensation granularity: none, per-tensor, per-row or per-group.
    #[arg(long, default_value = "per-tensor")]
    granularity: CompensationGranularity,
    /// Denominator guard added to the kept energy (dimensionless).
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f32,
}

#[derive(Args, Debug, Clone)]
struct KernelOpts {
    /// Row tile of the kernels (rows).
    #[arg(long, default_value_t = 64)]
    tile_m: usize,
    /// Output-column tile of the kernels (columns).
    #[arg(long, default_value_t = 64)]
    tile_n: usize,
    /// Contraction tile of the kernels (elements, multiple of M).
    #[arg(long, default_value_t = 256)]
    tile_k: usize,
    /// Split row tiles across threads.
    #[arg(long)]
    parallel: bool,
}

impl KernelOpts {
    fn config(&self) -> KernelConfig {
        KernelConfig {
            tile_m: self.tile_m,
            tile_n: self.tile_n,
            tile_k: self.tile_k,
            parallel_rows: self.parallel,
        }
    }
}

#[derive(Args, Debug)]
struct SparsifyArgs {
    /// Dense input tensor (.lynx).
    #[arg(long = "in")]
    input: PathBuf,
    #[command(flatten)]
    sparsity: SparsityOpts,
    /// Output tensor (.lynx).
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON file for the compensation scales.
    #[arg(long)]
    scale_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "2:4")]
    pattern: NMPattern,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SpmmArgs {
    /// Packed input, or a dense input to sparsify inside the fused kernel.
    #[arg(long = "in")]
    input: PathBuf,
    /// Weight tensor stored as d_out x d_in.
    #[arg(long)]
    weight: PathBuf,
    /// LoRA directory (lora_a.lynx, lora_b.lynx) for the fused dense-input path.
    #[arg(long)]
    lora: Option<PathBuf>,
    #[command(flatten)]
    sparsity: SparsityOpts,
    #[command(flatten)]
    kernel: KernelOpts,
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON file for the fused-path phase timings.
    #[arg(long)]
    timing_out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Solver {
    Rrr,
    Gd,
    Slim,
}

impl Solver {
    fn name(self) -> &'static str {
        match self {
            Solver::Rrr => "rrr",
            Solver::Gd => "gd",
            Solver::Slim => "slim",
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Stack directory written by stack-build.
    #[arg(long)]
    stack: PathBuf,
    /// Layer name or dotted suffix; a suffix may match several layers.
    #[arg(long)]
    layer: String,
    /// LoRA rank R.
    #[arg(long, default_value_t = DEFAULT_RANK)]
    rank: usize,
    #[arg(long, value_enum, default_value = "rrr")]
    solver: Solver,
    /// Stack input batch (tokens x d_model); required by rrr and gd.
    #[arg(long)]
    batch: Option<PathBuf>,
    /// Treat --batch as the layer's own input instead of the stack input.
    #[arg(long)]
    layer_input: bool,
    #[command(flatten)]
    sparsity: SparsityOpts,
    /// Weight score used to prune before the slim solver.
    #[arg(long, default_value = "wanda")]
    score: ScoreSpec,
    /// RNG seed for gd initialization (required by gd).
    #[arg(long)]
    seed: Option<u64>,
    /// Gradient steps for gd.
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Learning rate for gd.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Tokens per gd mini-batch.
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    /// Half-width of the uniform gd initialization.
    #[arg(long, default_value_t = 1e-5)]
    init_scale: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct StackSource {
    /// Stack directory; otherwise the stack is built from the flags below.
    #[arg(long)]
    stack: Option<PathBuf>,
    #[arg(long, default_value = "qwen-like")]
    preset: Preset,
    /// Number of transformer blocks.
    #[arg(long, default_value_t = 6)]
    depth: usize,
    /// Divisor applied to every layer width.
    #[arg(long, default_value_t = 16)]
    scale: usize,
    /// Weight seed when building a stack.
    #[arg(long)]
    seed: Option<u64>,
    /// Stack input tensor; otherwise spike-slab(0.1) tokens are sampled.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Tokens to sample when --input is absent.
    #[arg(long, default_value_t = 256)]
    tokens: usize,
    /// Seed for sampled inputs (required when --input is absent).
    #[arg(long)]
    input_seed: Option<u64>,
}

impl StackSource {
    fn stack(&self) -> Result<Stack> {
        match &self.stack {
            Some(dir) => Ok(Stack::load(dir)?),
            None => {
                let seed = self
                    .seed
                    .ok_or_else(|| usage("--seed is required when building a stack"))?;
                Ok(build_stack(&StackConfig::new(
                    self.preset,
                    self.depth,
                    self.scale,
                    seed,
                ))?)
            }
        }
    }

    fn input(&self, d_model: usize) -> Result<DenseMatrix> {
        match &self.input {
            Some(p) => Ok(lio::load_dense(p)?),
            None => {
                let seed = self
                    .input_seed
                    .ok_or_else(|| usage("--input-seed is required when --input is absent"))?;
                Ok(sample(
                    &RandomSpec::spike_slab(0.1, 0.01, 1.0, seed),
                    self.tokens,
                    d_model,
                )?)
            }
        }
    }
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    source: StackSource,
    /// Weight-pruning score for the weight-sparsity arm.
    #[arg(long, default_value = "magnitude")]
    score: ScoreSpec,
    #[command(flatten)]
    sparsity: SparsityOpts,
    /// JSON report path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// CSV path; "-" writes to standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    source: StackSource,
    /// LoRA rank R for the fitted rungs.
    #[arg(long, default_value_t = DEFAULT_RANK)]
    rank: usize,
    /// Compensation granularity of the NC rungs.
    #[arg(long, default_value = "per-tensor")]
    granularity: CompensationGranularity,
    /// Separate calibration batch for fitting; defaults to the evaluation input.
    #[arg(long)]
    fit_input: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    /// CSV path; "-" writes to standard output.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Shape grid: qwen-shapes or table5.
    #[arg(long, conflicts_with_all = ["m", "n", "k"])]
    preset: Option<String>,
    /// Divisor applied to preset shapes.
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Activation rows for a custom shape.
    #[arg(long, requires_all = ["n", "k"])]
    m: Option<usize>,
    /// Output features for a custom shape.
    #[arg(long)]
    n: Option<usize>,
    /// Contraction width for a custom shape.
    #[arg(long)]
    k: Option<usize>,
    /// Timed repeats per kernel (median reported).
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Untimed warmup runs per kernel.
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// LoRA rank of the fused LoRA timing.
    #[arg(long, default_value_t = DEFAULT_RANK)]
    lora_rank: usize,
    #[command(flatten)]
    sparsity: SparsityOpts,
    #[command(flatten)]
    kernel: KernelOpts,
    /// Input seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report path.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StackBuildArgs {
    #[arg(long, default_value = "qwen-like")]
    preset: Preset,
    #[arg(long, default_value_t = 6)]
    depth: usize,
    #[arg(long, default_value_t = 16)]
    scale: usize,
    /// Weight seed.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Files or directories to check.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// `-` selects standard output.
fn csv_sink(path: &Path) -> Result<Box<dyn Write>> {
    if path.as_os_str() == "-" {
        Ok(Box::new(io::stdout().lock()))
    } else {
        Ok(Box::new(
            fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
        ))
    }
}

fn cmd_sparsify(a: &SparsifyArgs) -> Result<()> {
    let x = lio::load_dense(&a.input)?;
    let s = &a.sparsity;
    let (record, sx) = sparsify_activation(&x, s.pattern, s.granularity, s.eps)?;
    lio::save_dense(&a.out, &sx)?;
    if let Some(p) = &a.scale_out {
        write_json(p, &record)?;
    }
    Ok(())
}

fn cmd_pack(a: &PackArgs) -> Result<()> {
    let x = lio::load_dense(&a.input)?;
    lio::save_packed(&a.out, &pack(&x, a.pattern)?)?;
    Ok(())
}

fn cmd_spmm(a: &SpmmArgs) -> Result<()> {
    let w = lio::load_dense(&a.weight)?;
    let cfg = a.kernel.config();
    let s = &a.sparsity;
    let y = match lio::load(&a.input)? {
        Tensor::Packed(p) => {
            if a.lora.is_some() {
                return Err(usage(
                    "--lora needs a dense --in; a packed input has already lost the dense values",
                ));
            }
            spmm(&p, &w, &cfg)?
        }
        Tensor::Dense(x) => match &a.lora {
            Some(dir) => {
                let (pair, _) = LoraPair::load(dir)?;
                fused_sparse_lora_linear(
                    &x,
                    &w,
                    pair.la(),
                    pair.lb(),
                    s.pattern,
                    s.granularity,
                    s.eps,
                    &cfg,
                )?
            }
            None => {
                let (y, timing) =
                    fused_sparse_linear(&x, &w, s.pattern, s.granularity, s.eps, &cfg)?;
                if let Some(p) = &a.timing_out {
                    write_json(p, &timing)?;
                }
                y
            }
        },
    };
    lio::save_dense(&a.out, &y)?;
    Ok(())
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let stack = Stack::load(&a.stack)?;
    let hits = stack.find_layers(&a.layer);
    if hits.is_empty() {
        return Err(
            LynxError::UndefinedReference(format!("no layer matches '{}'", a.layer)).into(),
        );
    }
    let s = &a.sparsity;
    let inputs = match (a.solver, &a.batch) {
        (Solver::Slim, _) => None,
        (_, None) => {
            return Err(usage(format!(
                "--batch is required by the {} solver",
                a.solver.name()
            )))
        }
        (_, Some(p)) => {
            let x = lio::load_dense(p)?;
            if a.layer_input {
                Some(vec![x; stack.layers.len()])
            } else {
                Some(forward(&stack, &x, &ExecPolicy::dense())?.layer_inputs)
            }
        }
    };
    let train = match a.solver {
        Solver::Gd => {
            let seed = a
                .seed
                .ok_or_else(|| usage("--seed is required by the gd solver"))?;
            Some(TrainConfig {
                steps: a.steps,
                learning_rate: a.lr,
                batch: a.batch_size,
                seed,
                init_scale: a.init_scale,
            })
        }
        _ => None,
    };
    for &i in &hits {
        let layer = &stack.layers[i];
        let w = &layer.weight;
        let (pair, final_loss, rank_deficient) = match a.solver {
            Solver::Rrr => {
                let x = &inputs.as_ref().expect("batch checked above")[i];
                let fit = rrr_fit(x, w, s.pattern, s.granularity, s.eps, a.rank)?;
                (fit.lora, fit.loss, fit.rank_deficient)
            }
            Solver::Gd => {
                let cfg = train.expect("gd config built above");
                let x = &inputs.as_ref().expect("batch checked above")[i];
                let batches = split_batches(x, cfg.batch)?;
                let (pair, trace) =
                    gd_fit(&batches, w, s.pattern, s.granularity, s.eps, a.rank, &cfg)?;
                (
                    pair,
                    *trace.last().expect("trace holds the final loss"),
                    false,
                )
            }
            Solver::Slim => {
                let norms = match &a.batch {
                    Some(p) if a.score.needs_norms() => {
                        let x = lio::load_dense(p)?;
                        let x = if a.layer_input {
                            x
                        } else {
                            forward(&stack, &x, &ExecPolicy::dense())?
                                .layer_inputs
                                .swap_remove(i)
                        };
                        Some(column_l2_norms(&x))
                    }
                    None if a.score.needs_norms() => {
                        return Err(usage(format!(
                            "--score {} needs --batch for activation norms",
                            a.score
                        )))
                    }
                    _ => None,
                };
                let pruned =
                    prune_weights(w, &score_weights(w, norms.as_deref(), a.score)?, s.pattern)?;
                let pair = slim_init(w, &pruned, a.rank)?;
                let err = lynx_core::lowrank::reconstruction_error(&w.sub(&pruned)?, &pair)?;
                (pair, err * err, false)
            }
        };
        let sidecar = LoraSidecar {
            rank: pair.rank(),
            d_out: pair.d_out(),
            d_in: pair.d_in(),
            solver: a.solver.name().to_string(),
            layer: Some(layer.spec.name.clone()),
            pattern: s.pattern,
            granularity: s.granularity,
            eps: s.eps,
            seed: train.map(|t| t.seed),
            train,
            final_loss,
            rank_deficient,
        };
        let dir = if hits.len() == 1 {
            a.out.clone()
        } else {
            a.out.join(&layer.spec.name)
        };
        pair.save(&dir, &sidecar)?;
        eprintln!(
            "{}: rank {} loss {:.6e} -> {}",
            layer.spec.name,
            pair.rank(),
            final_loss,
            dir.display()
        );
    }
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let stack = a.source.stack()?;
    let x0 = a.source.input(stack.d_model)?;
    let s = &a.sparsity;
    let mut weight = ExecPolicy::uniform(LayerMode::WeightSparse(a.score));
    let mut act = ExecPolicy::uniform(LayerMode::activation(s.granularity));
    for p in [&mut weight, &mut act] {
        p.pattern = s.pattern;
        p.eps = s.eps;
    }
    let layers = layer_sweep(&stack, &x0, &weight, &act)?;
    if let Some(p) = &a.csv {
        write_sweep_csv(csv_sink(p)?, &layers)?;
    }
    let report = SweepReport {
        header: ReportHeader::default(),
        preset: stack.config.preset.as_str().to_string(),
        seed: stack.config.seed,
        weight_mode: weight.default.label(),
        activation_mode: act.default.label(),
        layers,
    };
    match &a.json {
        Some(p) => write_json(p, &report)?,
        None if a.csv.is_none() => println!("{}", serde_json::to_string_pretty(&report)?),
        None => {}
    }
    Ok(())
}

fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let stack = a.source.stack()?;
    let x0 = a.source.input(stack.d_model)?;
    let x_fit = match &a.fit_input {
        Some(p) => lio::load_dense(p)?,
        None => x0.clone(),
    };
    let loras = fit_stack_lora(
        &stack,
        &x_fit,
        NMPattern::TWO_FOUR,
        a.granularity,
        DEFAULT_EPS,
        a.rank,
    )?;
    let ladder = method_ladder(&stack, &loras, a.granularity)?;
    let comparison = compare_methods(&stack, &x0, &ladder)?;
    if let Some(p) = &a.csv {
        write_comparison_csv(csv_sink(p)?, &comparison)?;
    }
    let report = ComparisonReport {
        header: ReportHeader::default(),
        preset: stack.config.preset.as_str().to_string(),
        seed: stack.config.seed,
        comparison,
    };
    match &a.json {
        Some(p) => write_json(p, &report)?,
        None if a.csv.is_none() => println!("{}", serde_json::to_string_pretty(&report)?),
        None => {}
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let mut cases = match (&a.preset, a.m, a.n, a.k) {
        (Some(name), ..) => preset_cases(name, a.scale, a.seed)?,
        (None, Some(m), Some(n), Some(k)) => vec![BenchCase::new(m, n, k, a.seed)],
        _ => return Err(usage("bench needs --preset or all of --m, --n, --k")),
    };
    for c in &mut cases {
        c.repeats = a.repeats;
        c.warmup = a.warmup;
        c.pattern = a.sparsity.pattern;
        c.granularity = a.sparsity.granularity;
    }
    let report = run_bench(&cases, &a.kernel.config(), a.lora_rank)?;
    eprintln!("# {}", report.note);
    write_csv(io::stdout().lock(), &report.rows)?;
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn cmd_stack_build(a: &StackBuildArgs) -> Result<()> {
    let stack = build_stack(&StackConfig::new(a.preset, a.depth, a.scale, a.seed))?;
    stack.save(&a.out)?;
    eprintln!(
        "{} layers in {} blocks -> {}",
        stack.layers.len(),
        stack.blocks.len(),
        a.out.display()
    );
    Ok(())
}

fn validate_path(p: &Path) -> Result<String> {
    if p.is_dir() {
        if p.join("manifest.json").exists() {
            let s = Stack::load(p)?;
            return Ok(format!("stack with {} layers", s.layers.len()));
        }
        if p.join("lora.json").exists() {
            let (pair, _) = LoraPair::load(p)?;
            return Ok(format!(
                "lora pair {}x{} rank {}",
                pair.d_out(),
                pair.d_in(),
                pair.rank()
            ));
        }
        bail!(LynxError::Format(format!(
            "{} holds neither manifest.json nor lora.json",
            p.display()
        )));
    }
    match p.extension().and_then(|e| e.to_str()) {
        Some("json") => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<serde_json::Value>(&text).map_err(LynxError::from)?;
            Ok("json".into())
        }
        Some("csv") => {
            let mut rdr =
                csv::Reader::from_path(p).map_err(|e| LynxError::Format(e.to_string()))?;
            let mut rows = 0;
            for rec in rdr.records() {
                rec.map_err(|e| LynxError::Format(e.to_string()))?;
                rows += 1;
            }
            Ok(format!("csv with {rows} rows"))
        }
        _ => match lio::load(p)? {
            Tensor::Dense(m) => Ok(format!("dense {}x{}", m.rows(), m.cols())),
            Tensor::Packed(pk) => {
                let violations = pk.validate();
                if let Some(v) = violations.first() {
                    bail!(LynxError::Format(format!(
                        "{} violations, first: {v}",
                        violations.len()
                    )));
                }
                Ok(format!(
                    "packed {} {}x{}",
                    pk.pattern(),
                    pk.rows(),
                    pk.cols()
                ))
            }
        },
    }
}

fn cmd_validate(a: &ValidateArgs) -> Result<()> {
    let mut first_err = None;
    for p in &a.paths {
        match validate_path(p) {
            Ok(what) => println!("ok {}: {what}", p.display()),
            Err(e) => {
                println!("invalid {}: {e:#}", p.display());
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match e.downcast_ref::<LynxError>() {
        Some(le) if le.is_numeric() => EXIT_NUMERIC,
        Some(LynxError::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| anyhow!("configuring {n} threads: {e}"))?;
    }
    match &cli.command {
        Command::Sparsify(a) => cmd_sparsify(a),
        Command::Pack(a) => cmd_pack(a),
        Command::Spmm(a) => cmd_spmm(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Bench(a) => cmd_bench(a),
        Command::StackBuild(a) => cmd_stack_build(a),
        Command::Validate(a) => cmd_validate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
