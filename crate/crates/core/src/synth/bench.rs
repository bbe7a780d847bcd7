use std::fs;
use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline_attn::{class_attention, AttnParams};
use crate::correlation::CorrelationVolume;
use crate::error::{arg_err, Error, Result};
use crate::numerics::Rng;
use crate::refine::{class_aggregate, DomainTexts, PipelineDims, PipelineParams};
use crate::scan::{build_chunk_plan, scan_chunked, scan_sequential, ScanParams, ScanState};

/// Where a benchmark ran. Reports from different machines are not comparable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub cpu_model: String,
    pub logical_cpus: usize,
    pub os: String,
    pub arch: String,
}

pub fn machine_info() -> MachineInfo {
    let cpu_model = fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_owned())
        })
        .unwrap_or_else(|| "unknown".into());
    MachineInfo {
        cpu_model,
        logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
        os: std::env::consts::OS.into(),
        arch: std::env::consts::ARCH.into(),
    }
}

/// Per-call wall-clock statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    /// Median seconds per call.
    pub median_s: f64,
    /// Seconds per call of every kept repetition.
    pub samples: Vec<f64>,
    /// Calls folded into one timed repetition.
    pub inner_iters: usize,
    /// False when even `max_inner` calls stayed under the resolution floor.
    pub resolved: bool,
}

/// Repetition policy shared by the benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingOpts {
    pub reps: usize,
    pub warmup: usize,
    /// A repetition shorter than this is considered below timer resolution.
    pub min_sample_s: f64,
    pub max_inner: usize,
}

impl Default for TimingOpts {
    fn default() -> Self {
        Self {
            reps: 5,
            warmup: 2,
            min_sample_s: 2e-3,
            max_inner: 1 << 16,
        }
    }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Median time of `f` on a monotonic clock after discarding warmup runs.
/// Calls are batched until one repetition lasts `min_sample_s`.
pub fn time_median(opts: &TimingOpts, mut f: impl FnMut()) -> Result<Timing> {
    if opts.reps < 5 {
        return Err(arg_err!(
            "at least 5 repetitions are required, got {}",
            opts.reps
        ));
    }
    for _ in 0..opts.warmup {
        f();
    }
    let mut inner = 1;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            f();
        }
        if t.elapsed().as_secs_f64() >= opts.min_sample_s || inner >= opts.max_inner {
            break;
        }
        inner = (inner * 2).min(opts.max_inner);
    }
    let mut samples = Vec::with_capacity(opts.reps);
    for _ in 0..opts.reps {
        let t = Instant::now();
        for _ in 0..inner {
            f();
        }
        samples.push(t.elapsed().as_secs_f64() / inner as f64);
    }
    let resolved = samples
        .iter()
        .all(|&s| s * inner as f64 >= opts.min_sample_s * 0.5);
    Ok(Timing {
        median_s: median(&samples),
        samples,
        inner_iters: inner,
        resolved,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Measurement {
    pub method: String,
    pub size: usize,
    pub threads: usize,
    pub median_s: f64,
    pub inner_iters: usize,
    pub reps: usize,
    /// Tokens per second, where meaningful.
    pub throughput: Option<f64>,
    pub resolved: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeriesSummary {
    pub method: String,
    /// Log-log slope of time against size; absent when inconclusive.
    pub slope: Option<f64>,
    pub inconclusive: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub kind: String,
    pub machine: MachineInfo,
    pub measurements: Vec<Measurement>,
    pub summaries: Vec<SeriesSummary>,
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    kind: &'a str,
    method: &'a str,
    size: usize,
    threads: usize,
    median_s: f64,
    inner_iters: usize,
    reps: usize,
    throughput: Option<f64>,
    resolved: bool,
    cpu_model: &'a str,
}

impl BenchReport {
    pub fn summary(&self, method: &str) -> Option<&SeriesSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(path, json)?;
        Ok(())
    }

    /// One row per measurement.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for m in &self.measurements {
            w.serialize(CsvRow {
                kind: &self.kind,
                method: &m.method,
                size: m.size,
                threads: m.threads,
                median_s: m.median_s,
                inner_iters: m.inner_iters,
                reps: m.reps,
                throughput: m.throughput,
                resolved: m.resolved,
                cpu_model: &self.machine.cpu_model,
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 3 {
        return Err(arg_err!(
            "need >= 3 sizes for a slope fit, got {}",
            sizes.len()
        ));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes[0] == 0 {
        return Err(arg_err!(
            "sizes must be positive and strictly increasing: {sizes:?}"
        ));
    }
    Ok(())
}

/// Times `setup(size)` for every size and fits the log-log slope.
pub fn scaling_series(
    method: &str,
    sizes: &[usize],
    opts: &TimingOpts,
    threads: usize,
    mut setup: impl FnMut(usize) -> Result<Box<dyn FnMut()>>,
) -> Result<(Vec<Measurement>, SeriesSummary)> {
    check_sizes(sizes)?;
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut f = setup(n)?;
        let t = time_median(opts, &mut *f)?;
        log::info!(
            "{method} size {n}: {:.3e} s/call ({} inner)",
            t.median_s,
            t.inner_iters
        );
        out.push(Measurement {
            method: method.into(),
            size: n,
            threads,
            median_s: t.median_s,
            inner_iters: t.inner_iters,
            reps: opts.reps,
            throughput: None,
            resolved: t.resolved,
        });
    }
    let inconclusive = out.iter().any(|m| !m.resolved);
    let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let ys: Vec<f64> = out.iter().map(|m| m.median_s).collect();
    let summary = SeriesSummary {
        method: method.into(),
        slope: (!inconclusive).then(|| fit_slope(&xs, &ys)),
        inconclusive,
    };
    Ok((out, summary))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Argument(format!("cannot build thread pool: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabBenchConfig {
    pub sizes: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub timing: TimingOpts,
    pub threads: usize,
    pub seed: u64,
}

impl Default for VocabBenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![32, 64, 128, 256],
            height: 16,
            width: 16,
            embed_dim: 32,
            timing: TimingOpts::default(),
            threads: 1,
            seed: 0,
        }
    }
}

pub const CLASS_SCAN: &str = "class_aggregate";
pub const CLASS_ATTENTION: &str = "class_attention";

/// Runtime of the class-axis scan and of dense class attention as the
/// vocabulary grows, on f32 volumes.
pub fn bench_vocab_scaling(cfg: &VocabBenchConfig) -> Result<BenchReport> {
    check_sizes(&cfg.sizes)?;
    let (hw, df) = (cfg.height * cfg.width, cfg.embed_dim);
    let (h, w) = (cfg.height, cfg.width);
    let rng = Rng::new(cfg.seed);
    let volume = |nc: usize| -> Result<CorrelationVolume<f32>> {
        let v = rng
            .split(nc as u64)
            .uniform_tensor(&[hw, nc, df], -1.0, 1.0);
        CorrelationVolume::new(h, w, v)
    };
    let pool = pool(cfg.threads)?;
    let mut measurements = Vec::new();
    let mut summaries = Vec::new();

    let (m, s) = pool.install(|| {
        scaling_series(CLASS_SCAN, &cfg.sizes, &cfg.timing, cfg.threads, |nc| {
            let e = volume(nc)?;
            let dims = PipelineDims::new(df, df, nc);
            let p = PipelineParams::<f32>::init(dims, &rng.split(1 << 32))?;
            let dt = DomainTexts::new(rng.split(2 << 32).uniform_tensor(&[2, df], -1.0, 1.0))?;
            Ok(Box::new(move || {
                black_box(class_aggregate(&e, &dt, &p).expect("consistent shapes"));
            }))
        })
    })?;
    measurements.extend(m);
    summaries.push(s);

    let (m, s) = pool.install(|| {
        scaling_series(
            CLASS_ATTENTION,
            &cfg.sizes,
            &cfg.timing,
            cfg.threads,
            |nc| {
                let e = volume(nc)?;
                let p = AttnParams::<f32>::init(df, 1, &mut rng.split(3 << 32));
                Ok(Box::new(move || {
                    black_box(class_attention(&e, &p).expect("consistent shapes"));
                }))
            },
        )
    })?;
    measurements.extend(m);
    summaries.push(s);

    Ok(BenchReport {
        kind: "vocab_scaling".into(),
        machine: machine_info(),
        measurements,
        summaries,
        notes: vec![format!(
            "grid {h}x{w}, d_f={df}, threads={}, median of {} reps after {} warmup",
            cfg.threads, cfg.timing.reps, cfg.timing.warmup
        )],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkBenchConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub embed_dim: usize,
    pub chunk_lens: Vec<usize>,
    pub eta_cross: f64,
    pub timing: TimingOpts,
    /// Threads of the class-parallel run.
    pub threads: usize,
    pub seed: u64,
}

impl Default for ChunkBenchConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 8,
            embed_dim: 32,
            chunk_lens: vec![2, 4, 8, 16, 32],
            eta_cross: 1.0,
            timing: TimingOpts::default(),
            threads: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: 0,
        }
    }
}

/// Chunked-scan throughput per chunk length, with one thread and with the
/// classes spread over `threads`; also records whether both runs agree
/// bit for bit.
pub fn bench_chunk_speed(cfg: &ChunkBenchConfig) -> Result<BenchReport> {
    let (h, w, nc, df) = (cfg.height, cfg.width, cfg.classes, cfg.embed_dim);
    if cfg.chunk_lens.is_empty() || cfg.threads == 0 {
        return Err(arg_err!("need at least one chunk length and one thread"));
    }
    if let Some(l) = cfg.chunk_lens.iter().find(|&&l| l == 0 || w % l != 0) {
        return Err(arg_err!("chunk length {l} does not divide width {w}"));
    }
    let rng = Rng::new(cfg.seed);
    let p = ScanParams::<f32>::init(df, 4.min(df), &mut rng.split(0))?;
    let slices: Vec<Vec<f32>> = (0..nc)
        .map(|j| rng.split(1 + j as u64).uniform_vec(h * w * df, -1.0, 1.0))
        .collect();
    let tokens = (h * w * nc) as f64;
    let single = pool(1)?;
    let multi = pool(cfg.threads)?;
    let mut measurements = Vec::new();
    let mut notes = Vec::new();

    let sequential = single.install(|| {
        time_median(&cfg.timing, || {
            for s in &slices {
                black_box(scan_sequential(s, &ScanState::zeros(df), &p, true).expect("valid"));
            }
        })
    })?;
    measurements.push(Measurement {
        method: "sequential".into(),
        size: h * w,
        threads: 1,
        median_s: sequential.median_s,
        inner_iters: sequential.inner_iters,
        reps: cfg.timing.reps,
        throughput: Some(tokens / sequential.median_s),
        resolved: sequential.resolved,
    });

    for &l in &cfg.chunk_lens {
        let plan = build_chunk_plan(h, w, l, cfg.eta_cross, true)?;
        let run = || -> Vec<Vec<f32>> {
            slices
                .par_iter()
                .map(|s| scan_chunked(s, &plan, &p).expect("valid"))
                .collect()
        };
        let identical = single.install(run) == multi.install(run);
        notes.push(format!(
            "L={l}: multi-threaded output identical to single-threaded: {identical}"
        ));
        if !identical {
            return Err(Error::Contract(format!(
                "class-parallel scan differs from single-threaded at L={l}"
            )));
        }
        for (threads, pool) in [(1, &single), (cfg.threads, &multi)] {
            let t = pool.install(|| time_median(&cfg.timing, || drop(black_box(run()))))?;
            measurements.push(Measurement {
                method: format!("chunked_{threads}t"),
                size: l,
                threads,
                median_s: t.median_s,
                inner_iters: t.inner_iters,
                reps: cfg.timing.reps,
                throughput: Some(tokens / t.median_s),
                resolved: t.resolved,
            });
        }
    }
    Ok(BenchReport {
        kind: "chunk_speed".into(),
        machine: machine_info(),
        measurements,
        summaries: Vec::new(),
        notes,
    })
}
