//! Command-line front end: argument parsing, dispatch and exit codes.
//!
//! Every subcommand returns an exit code instead of panicking so tests can
//! drive [`run`] in-process.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use s2corr::correlation::{FeatureBundle, FeatureGrid};
use s2corr::gradcheck::{chunked_suite, pipeline_suite, scan_suite, CheckOptions, GradCheck};
use s2corr::infer::{
    bilinear_upsample, miou, tiled_infer, SegPrediction, TileConfig, IGNORE_LABEL,
};
use s2corr::numerics::{load_tensor, Bundle, Rng, Scalar, Tensor};
use s2corr::optim::AdamWConfig;
use s2corr::refine::{
    forward_trace, load_pipeline, Chunking, DomainTexts, PipelineConfig, PipelineDims,
    PipelineParams,
};
use s2corr::synth::{
    bench_chunk_speed, bench_vocab_scaling, train_denoise, BenchReport, ChunkBenchConfig,
    SynthConfig, TimingOpts, TrainConfig, VocabBenchConfig,
};
use s2corr::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_FORMAT: i32 = 2;
pub const EXIT_SHAPE: i32 = 3;
pub const EXIT_USAGE: i32 = 4;

/// Verbosity filter, in `env_logger` syntax.
pub const LOG_ENV: &str = "S2CORR_LOG";

/// Selective state-space refinement of text-image correlation maps.
#[derive(Debug, Parser)]
#[command(name = "s2corr", version, term_width = 100)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Refine the correlation map of a feature bundle and write every stage.
    Refine(RefineArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train the pipeline on synthetic corrupted features.
    TrainSynth(TrainArgs),
    /// Time the class-axis aggregators or the chunked scan.
    Bench(BenchArgs),
    /// Sliding-window inference over a large output grid.
    TileInfer(TileArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

impl Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

/// Chunk length selection; at most one flag may be given.
#[derive(Clone, Debug, Args)]
#[group(multiple = false)]
pub struct ChunkArgs {
    /// Tokens per chunk, clamped to the largest divisor of the grid width.
    #[arg(long)]
    pub chunk_len: Option<usize>,
    /// Chunks over the whole grid, L = HW / n [default: 16 when no chunking flag is given].
    #[arg(long)]
    pub num_chunks: Option<usize>,
    /// Chunks per grid row, L = W / n.
    #[arg(long)]
    pub chunks_per_row: Option<usize>,
}

impl ChunkArgs {
    pub fn chunking(&self) -> Chunking {
        match (self.chunk_len, self.num_chunks, self.chunks_per_row) {
            (Some(l), _, _) => Chunking::Len(l),
            (_, _, Some(n)) => Chunking::PerRow(n),
            (_, Some(n), _) => Chunking::Total(n),
            _ => Chunking::Total(16),
        }
    }
}

/// Architecture and scan settings shared by the model-running subcommands.
#[derive(Clone, Debug, Args)]
pub struct ModelArgs {
    /// Correlation embedding width.
    #[arg(long = "d-f", default_value_t = 128)]
    pub d_f: usize,
    #[command(flatten)]
    pub chunks: ChunkArgs,
    /// Factor applied to the carried state at every row start.
    #[arg(long, default_value_t = 1.0)]
    pub eta_cross: f64,
    /// Alternate row direction.
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub snake: bool,
    /// Initial geometric decay prior of every head.
    #[arg(long, default_value_t = 0.8)]
    pub gamma: f64,
    /// Decay-prior heads K; must divide d_f.
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Spatial modulation and scan rounds.
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
}

impl ModelArgs {
    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            blocks: self.blocks,
            chunking: self.chunks.chunking(),
            eta_cross: self.eta_cross,
            snake: self.snake,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct RunArgs {
    /// Root seed; every random quantity derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Clone, Debug, Args)]
pub struct RefineArgs {
    /// Feature bundle directory.
    #[arg(long)]
    pub bundle: PathBuf,
    /// Saved pipeline; its sidecar overrides the architecture flags. Random init from --seed when absent.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Output bundle directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Debug, Args)]
pub struct GradcheckArgs {
    /// Random draws of the sequential and chunked scan suites.
    #[arg(long, default_value_t = 20)]
    pub scan_draws: usize,
    /// Random draws of the pipeline suite.
    #[arg(long, default_value_t = 5)]
    pub pipeline_draws: usize,
    /// Optional JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
    /// Negate one analytic gradient to prove the check can fail.
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Report directory (report.json, losses.csv).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// Training samples, reused every step.
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Synthetic grid side.
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Visual and text feature dimension d.
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    /// Correlation embedding width.
    #[arg(long = "d-f", default_value_t = 16)]
    pub d_f: usize,
    #[command(flatten)]
    pub chunks: ChunkArgs,
    #[arg(long, default_value_t = 1.0)]
    pub eta_cross: f64,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub snake: bool,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    /// Class scan against class attention over growing vocabularies.
    Vocab,
    /// Chunked-scan throughput per chunk length and thread count.
    Chunk,
}

#[derive(Clone, Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value_t = BenchKind::Vocab)]
    pub kind: BenchKind,
    /// Report directory (bench.json, bench.csv).
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary sizes, at least three, strictly increasing.
    #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128, 256])]
    pub sizes: Vec<usize>,
    /// Chunk lengths of the chunk benchmark.
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 8, 16, 32])]
    pub chunk_lens: Vec<usize>,
    /// Grid side.
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    #[arg(long = "d-f", default_value_t = 32)]
    pub d_f: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Worker threads [default: hardware parallelism].
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args)]
pub struct TileArgs {
    /// Feature bundle whose token grid spans the whole output.
    #[arg(long, required_unless_present = "stub_class")]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Output directory (labels.s2ct, logits.s2ct, metrics.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth labels (S2CT, out_h x out_w) for an mIoU report.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Window side in output pixels.
    #[arg(long, default_value_t = 448)]
    pub kernel: usize,
    /// Fractional overlap of neighbouring windows.
    #[arg(long, default_value_t = 0.333)]
    pub overlap: f64,
    /// Output resolution HxW.
    #[arg(long, default_value = "448x896", value_parser = parse_res)]
    pub out_res: (usize, usize),
    /// Replace the model by constant logits favouring this class.
    #[arg(long, hide = true)]
    pub stub_class: Option<usize>,
    /// Class count of the stub model.
    #[arg(long, hide = true, default_value_t = 8)]
    pub stub_classes: usize,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub run: RunArgs,
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((p(h)?, p(w)?))
}

/// Failure of a subcommand, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(msg: impl Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: msg.to_string(),
        }
    }

    fn check(msg: impl Display) -> Self {
        Self {
            code: EXIT_CHECK,
            message: msg.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Format(_)
            | Error::MissingEntry { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => EXIT_FORMAT,
            Error::Dimension(_) => EXIT_SHAPE,
            Error::Argument(_) => EXIT_USAGE,
            Error::Contract(_) | Error::NonFinite(_) => EXIT_CHECK,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CmdResult = Result<(), Failure>;

/// Rendered `--help` of the top level or of one subcommand.
pub fn help_text(subcommand: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let target = match subcommand {
        Some(name) => cmd
            .find_subcommand_mut(name)
            .unwrap_or_else(|| panic!("unknown subcommand {name}")),
        None => &mut cmd,
    };
    target.render_long_help().to_string()
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::Refine(a) => cmd_refine(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::TrainSynth(a) => cmd_train_synth(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::TileInfer(a) => cmd_tile_infer(&a),
    }
}

fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R, Failure> {
    if threads == 0 {
        return Err(Failure::usage("--threads must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Failure::usage(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Loads `--params` or draws a fresh pipeline for the bundle's shapes.
fn pipeline_for<T: Scalar>(
    params: Option<&Path>,
    model: &ModelArgs,
    seed: u64,
    feature_dim: usize,
    num_classes: usize,
) -> Result<(PipelineParams<T>, PipelineConfig), Failure> {
    if let Some(dir) = params {
        let (p, file) = load_pipeline::<T>(dir)?;
        p.check(feature_dim, num_classes)?;
        info!("loaded pipeline from {}", dir.display());
        return Ok((p, file.config));
    }
    let dims = PipelineDims::new(feature_dim, model.d_f, num_classes).with_heads(model.heads);
    let mut p = PipelineParams::<T>::init(dims, &Rng::new(seed))?;
    p.spatial_scan.set_uniform_gamma(model.gamma)?;
    p.class_scan.set_uniform_gamma(model.gamma)?;
    Ok((p, model.pipeline()))
}

fn domain_texts<T: Scalar>(fb: &FeatureBundle<T>) -> Result<DomainTexts<T>, Failure> {
    Ok(match &fb.domain_texts {
        Some(t) => DomainTexts::new(t.clone())?,
        None => DomainTexts::neutral(fb.visual.dim())?,
    })
}

/// Writes logits, labels and the three intermediate correlation stages.
pub fn cmd_refine(a: &RefineArgs) -> CmdResult {
    let bundle = Bundle::read(&a.bundle)?;
    match a.run.dtype {
        Dtype::F32 => refine_impl::<f32>(a, &bundle),
        Dtype::F64 => refine_impl::<f64>(a, &bundle),
    }
}

fn refine_impl<T: Scalar>(a: &RefineArgs, bundle: &Bundle) -> CmdResult {
    let fb = FeatureBundle::<T>::from_bundle(bundle)?;
    let (h, w) = (fb.visual.height(), fb.visual.width());
    let nc = fb.text.num_classes();
    let (params, cfg) = pipeline_for::<T>(
        a.params.as_deref(),
        &a.model,
        a.run.seed,
        fb.visual.dim(),
        nc,
    )?;
    let dt = domain_texts(&fb)?;
    let plan = cfg.plan(h, w)?;
    println!("plan: {}", plan.describe());

    let trace = with_threads(a.run.threads, || {
        forward_trace(&fb.visual, &fb.text, &dt, &params, &cfg)
    })??;
    let df = params.embed_dim();
    let pred = SegPrediction::from_logits(trace.logits.reshape(&[h, w, nc])?)?;
    let mut out = Bundle::new();
    out.insert("logits", &pred.logits);
    out.insert("labels", &pred.label_tensor());
    out.insert(
        "corr_initial",
        &trace.initial.values.clone().reshape(&[h, w, nc])?,
    );
    out.insert(
        "corr_spatial",
        &trace.spatial.values.clone().reshape(&[h, w, nc, df])?,
    );
    out.insert(
        "corr_class",
        &trace.class.values.clone().reshape(&[h, w, nc, df])?,
    );
    out.set_meta("class_names", serde_json::json!(fb.text.class_names()));
    out.set_meta("chunk_len", plan.chunk_len());
    out.set_meta("seed", a.run.seed);
    out.set_meta("dtype", a.run.dtype.to_string());
    out.write(&a.out)?;
    println!("wrote 5 tensors to {}", a.out.display());
    Ok(())
}

fn print_check(r: &GradCheck) {
    let status = if r.passed() { "ok" } else { "FAIL" };
    println!(
        "{:<16} {} draws={:<3} entries={:<6} max_rel_err={:.3e} threshold={:.0e} {status}",
        r.suite, r.dtype, r.draws, r.checked, r.max_rel_err, r.threshold
    );
    if !r.passed() {
        println!("  worst entry: {}", r.worst_entry);
    }
}

/// Runs every finite-difference suite; exit 1 when any exceeds its threshold.
pub fn cmd_gradcheck(a: &GradcheckArgs) -> CmdResult {
    if a.scan_draws == 0 || a.pipeline_draws == 0 {
        return Err(Failure::usage("draw counts must be positive"));
    }
    let opts = CheckOptions {
        inject_sign_flip: a.inject_sign_flip,
    };
    let seed = a.run.seed;
    let reports = with_threads(a.run.threads, || match a.run.dtype {
        Dtype::F32 => [
            scan_suite::<f32>(seed, a.scan_draws, opts),
            chunked_suite::<f32>(seed + 1, a.scan_draws, opts),
            pipeline_suite::<f32>(seed + 2, a.pipeline_draws, opts),
        ],
        Dtype::F64 => [
            scan_suite::<f64>(seed, a.scan_draws, opts),
            chunked_suite::<f64>(seed + 1, a.scan_draws, opts),
            pipeline_suite::<f64>(seed + 2, a.pipeline_draws, opts),
        ],
    })?;
    if a.run.dtype == Dtype::F32 {
        println!(
            "dtype f32: thresholds relaxed to {:.0e}",
            reports[0].threshold
        );
    }
    reports.iter().for_each(print_check);
    if let Some(path) = &a.out {
        fs::write(
            path,
            serde_json::to_vec_pretty(&reports).map_err(Error::from)?,
        )?;
    }
    match reports.iter().find(|r| !r.passed()) {
        Some(r) => Err(Failure::check(format!(
            "{} gradient check failed at {}",
            r.suite, r.worst_entry
        ))),
        None => Ok(()),
    }
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        synth: SynthConfig {
            height: a.grid,
            width: a.grid,
            num_classes: a.classes,
            feature_dim: a.feature_dim,
            ..SynthConfig::default()
        },
        pipeline: PipelineConfig {
            blocks: a.blocks,
            chunking: a.chunks.chunking(),
            eta_cross: a.eta_cross,
            snake: a.snake,
        },
        embed_dim: a.d_f,
        heads: a.heads,
        steps: a.steps,
        batch: a.batch,
        optimizer: AdamWConfig {
            lr: a.lr,
            weight_decay: a.weight_decay,
            ..AdamWConfig::default()
        },
        seed: a.seed,
        ..TrainConfig::default()
    }
}

/// Trains on synthetic data and writes `report.json` and `losses.csv`.
pub fn cmd_train_synth(a: &TrainArgs) -> CmdResult {
    let cfg = train_config(a);
    let plan = cfg.pipeline.plan(cfg.synth.height, cfg.synth.width)?;
    println!("plan: {}", plan.describe());
    let report = with_threads(a.threads, || match a.dtype {
        Dtype::F32 => train_denoise::<f32>(&cfg),
        Dtype::F64 => train_denoise::<f64>(&cfg),
    })??;
    fs::create_dir_all(&a.out)?;
    let json = serde_json::to_vec_pretty(&report).map_err(Error::from)?;
    fs::write(a.out.join("report.json"), json)?;
    let mut csv = String::from("step,loss,step_ms\n");
    for (i, l) in report.losses.iter().enumerate() {
        let ms = report
            .step_ms
            .get(i)
            .map_or(String::new(), |v| format!("{v:.4}"));
        csv.push_str(&format!("{i},{l:.10e},{ms}\n"));
    }
    fs::write(a.out.join("losses.csv"), csv)?;
    println!(
        "loss {:.5} -> {:.5}; accuracy raw {:.4}, refined {:.4} (held out); {:.1} s",
        report.initial_loss,
        report.final_loss,
        report.raw_accuracy,
        report.refined_accuracy,
        report.wall_s
    );
    match report.diverged_at {
        Some(step) => Err(Failure::check(format!(
            "loss became non-finite at step {step}"
        ))),
        None => Ok(()),
    }
}

fn write_bench(report: &BenchReport, out: &Path) -> CmdResult {
    fs::create_dir_all(out)?;
    report.write_json(out.join("bench.json"))?;
    report.write_csv(out.join("bench.csv"))?;
    for m in &report.measurements {
        let tp = m
            .throughput
            .map_or(String::new(), |t| format!(" {t:.3e} tokens/s"));
        println!(
            "{:<16} size={:<5} threads={:<3} median={:.4e} s{tp}",
            m.method, m.size, m.threads, m.median_s
        );
    }
    for s in &report.summaries {
        match s.slope {
            Some(v) => println!("{}: log-log slope {v:.3}", s.method),
            None => println!("{}: slope inconclusive (below timer resolution)", s.method),
        }
    }
    report.notes.iter().for_each(|n| println!("note: {n}"));
    Ok(())
}

/// Runs one benchmark and writes `bench.json` and `bench.csv`.
pub fn cmd_bench(a: &BenchArgs) -> CmdResult {
    let threads = a
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let timing = TimingOpts {
        reps: a.reps,
        warmup: a.warmup,
        ..TimingOpts::default()
    };
    let report = match a.kind {
        BenchKind::Vocab => {
            if a.sizes.len() < 3 {
                return Err(Failure::usage(format!(
                    "need ≥3 sizes, got {}",
                    a.sizes.len()
                )));
            }
            bench_vocab_scaling(&VocabBenchConfig {
                sizes: a.sizes.clone(),
                height: a.grid,
                width: a.grid,
                embed_dim: a.d_f,
                timing,
                threads,
                seed: a.seed,
            })?
        }
        BenchKind::Chunk => bench_chunk_speed(&ChunkBenchConfig {
            height: a.grid,
            width: a.grid,
            embed_dim: a.d_f,
            chunk_lens: a.chunk_lens.clone(),
            timing,
            threads,
            seed: a.seed,
            ..ChunkBenchConfig::default()
        })?,
    };
    if threads < 2 && a.kind == BenchKind::Chunk {
        warn!("only one thread available; multi-threaded speedup cannot be measured");
    }
    write_bench(&report, &a.out)
}

/// Sliding-window inference. Windows are laid out in output pixels; each
/// maps to the token crop under it, is refined, and is upsampled back to
/// the window size.
pub fn cmd_tile_infer(a: &TileArgs) -> CmdResult {
    match a.run.dtype {
        Dtype::F32 => tile_impl::<f32>(a),
        Dtype::F64 => tile_impl::<f64>(a),
    }
}

fn tile_impl<T: Scalar>(a: &TileArgs) -> CmdResult {
    let (out_h, out_w) = a.out_res;
    let cfg = TileConfig {
        kernel: a.kernel,
        overlap: a.overlap,
        out_h,
        out_w,
    };
    cfg.validate()?;
    let (pred, names) = match (&a.bundle, a.stub_class) {
        (_, Some(class)) => {
            let nc = a.stub_classes;
            if class >= nc {
                return Err(Failure::usage(format!("stub class {class} >= {nc}")));
            }
            let k = cfg.kernel;
            let window = Tensor::<T>::from_fn(&[k, k, nc], |i| {
                if i % nc == class {
                    T::one()
                } else {
                    T::zero()
                }
            })?;
            let pred = with_threads(a.run.threads, || {
                tiled_infer(&cfg, nc, |_, _| Ok(window.clone()))
            })??;
            (pred, (0..nc).map(|c| c.to_string()).collect::<Vec<_>>())
        }
        (Some(path), None) => {
            let fb = FeatureBundle::<T>::from_bundle(&Bundle::read(path)?)?;
            let pred = tile_with_model(a, &cfg, &fb)?;
            (pred, fb.text.class_names().to_vec())
        }
        (None, None) => return Err(Failure::usage("--bundle is required")),
    };
    fs::create_dir_all(&a.out)?;
    let mut b = Bundle::new();
    b.insert("labels", &pred.label_tensor());
    b.insert("logits", &pred.logits);
    b.set_meta("class_names", serde_json::json!(names));
    b.write(&a.out)?;
    println!(
        "{} windows of {k}x{k} over {out_h}x{out_w}",
        cfg.windows()?.len(),
        k = cfg.kernel
    );
    if let Some(gt_path) = &a.gt {
        let gt = load_tensor::<f64>(gt_path)?;
        if gt.dims() != [out_h, out_w] {
            return Err(Error::Dimension(format!(
                "ground truth {:?} vs output {out_h}x{out_w}",
                gt.dims()
            ))
            .into());
        }
        let gt: Vec<usize> = gt.data().iter().map(|&v| v as usize).collect();
        let r = miou(&pred.labels, &gt, names.len(), IGNORE_LABEL)?;
        let per_class: serde_json::Map<String, serde_json::Value> = names
            .iter()
            .zip(&r.per_class)
            .filter_map(|(n, v)| v.map(|v| (n.clone(), v.into())))
            .collect();
        let metrics = serde_json::json!({ "per_class": per_class, "mean_iou": r.mean });
        fs::write(
            a.out.join("metrics.json"),
            serde_json::to_vec_pretty(&metrics).map_err(Error::from)?,
        )?;
        println!("mean IoU {:.4}", r.mean);
    }
    Ok(())
}

fn tile_with_model<T: Scalar>(
    a: &TileArgs,
    cfg: &TileConfig,
    fb: &FeatureBundle<T>,
) -> Result<SegPrediction<T>, Failure> {
    let (gh, gw) = (fb.visual.height(), fb.visual.width());
    if !cfg.out_h.is_multiple_of(gh) || !cfg.out_w.is_multiple_of(gw) || cfg.out_h / gh != cfg.out_w / gw {
        return Err(Error::Dimension(format!(
            "token grid {gh}x{gw} does not tile output {}x{} with a common integer scale",
            cfg.out_h, cfg.out_w
        ))
        .into());
    }
    let scale = cfg.out_h / gh;
    if !cfg.kernel.is_multiple_of(scale) {
        return Err(Failure::usage(format!(
            "kernel {} is not a multiple of the token size {scale}",
            cfg.kernel
        )));
    }
    let kt = cfg.kernel / scale;
    let nc = fb.text.num_classes();
    let (params, pcfg) = pipeline_for::<T>(
        a.params.as_deref(),
        &a.model,
        a.run.seed,
        fb.visual.dim(),
        nc,
    )?;
    let dt = domain_texts(fb)?;
    let crop_plan = pcfg.plan(kt, kt)?;
    println!("window plan: {}", crop_plan.describe());
    let window = |top: usize, left: usize| -> s2corr::Result<Tensor<T>> {
        // Pixel origins between token boundaries snap to the token below.
        let crop: FeatureGrid<T> = fb.visual.crop(top / scale, left / scale, kt, kt)?;
        let trace = forward_trace(&crop, &fb.text, &dt, &params, &pcfg)?;
        bilinear_upsample(
            &trace.logits.reshape(&[kt, kt, nc])?,
            cfg.kernel,
            cfg.kernel,
        )
    };
    Ok(with_threads(a.run.threads, || {
        tiled_infer(cfg, nc, window)
    })??)
}
