//! Central finite-difference checks of the analytic gradients.
//!
//! Finite differences are always taken in f64 on the forward pass only.
//! Analytic gradients may be computed in f32 or f64; for f32 the parameters
//! are first rounded to f32 so both sides see the same point.

use serde::Serialize;

use crate::numerics::{DType, Rng, Scalar};
use crate::optim::ParamSet;
use crate::refine::{self, PipelineConfig, PipelineParams};
use crate::scan::{
    build_chunk_plan, scan_backward, scan_chunked, scan_chunked_backward, scan_sequential,
    ScanParams, ScanState,
};
use crate::synth::tiny_problem;

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so entries whose true gradient is
/// ~0 are judged by their absolute error.
pub const REL_FLOOR: f64 = 1e-4;
pub const SCAN_TOLERANCE: f64 = 1e-5;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;
pub const F32_TOLERANCE: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst entry seen by a suite.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub suite: String,
    pub dtype: DType,
    pub draws: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_entry: String,
    pub threshold: f64,
}

impl GradCheck {
    fn new(suite: &str, dtype: DType, threshold: f64) -> Self {
        Self {
            suite: suite.to_owned(),
            dtype,
            draws: 0,
            checked: 0,
            max_rel_err: 0.0,
            worst_entry: String::new(),
            threshold,
        }
    }

    fn record(&mut self, name: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err > self.max_rel_err || !err.is_finite() {
            self.max_rel_err = err;
            self.worst_entry = format!(
                "{} (analytic {analytic:.6e}, numeric {numeric:.6e})",
                name()
            );
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

/// Knobs for the check suites.
#[derive(Clone, Copy, Debug, Default)]
pub struct CheckOptions {
    /// Negates one analytic gradient tensor; the suite must then fail.
    pub inject_sign_flip: bool,
}

fn central_diff(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Compares every entry of `analytic` with a central difference of `loss`
/// around `params`.
pub fn compare_params<P: ParamSet<f64> + Clone>(
    report: &mut GradCheck,
    prefix: &str,
    params: &P,
    analytic: &P,
    loss: impl Fn(&P) -> f64,
) {
    let names: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let grads = analytic.tensors();
    for (ti, (name, len)) in names.iter().enumerate() {
        for i in 0..*len {
            let numeric = central_diff(
                |v| {
                    let mut q = params.clone();
                    q.tensors_mut()[ti].1.data_mut()[i] = v;
                    loss(&q)
                },
                params.tensors()[ti].1.data()[i],
            );
            report.record(
                || format!("{prefix}{name}[{i}]"),
                grads[ti].1.data()[i],
                numeric,
            );
        }
    }
}

/// Compares gradients w.r.t. a plain buffer.
pub fn compare_slice(
    report: &mut GradCheck,
    name: &str,
    x: &[f64],
    analytic: &[f64],
    loss: impl Fn(&[f64]) -> f64,
) {
    for i in 0..x.len() {
        let numeric = central_diff(
            |v| {
                let mut q = x.to_vec();
                q[i] = v;
                loss(&q)
            },
            x[i],
        );
        report.record(|| format!("{name}[{i}]"), analytic[i], numeric);
    }
}

fn to_f64(v: &[impl Scalar]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossless()).collect()
}

fn round_trip<T: Scalar>(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| T::lit(x).to_f64_lossless()).collect()
}

/// Scan parameters with every field randomized away from the defaults.
pub fn random_scan_params(embed_dim: usize, heads: usize, rng: &mut Rng) -> ScanParams<f64> {
    let mut p = ScanParams::init(embed_dim, heads, rng).expect("valid heads");
    p.b_a = rng.uniform_tensor(&[embed_dim], -1.0, 2.0);
    p.b_b = rng.uniform_tensor(&[embed_dim], -1.0, 1.0);
    p.mix_w = rng.uniform_tensor(&[heads], -1.5, 1.5);
    let gammas: Vec<f64> = (0..heads).map(|_| rng.uniform(0.2, 0.95)).collect();
    p.set_gamma_prior(&gammas).expect("prior in range");
    p
}

fn flip<P: ParamSet<T>, T: Scalar>(grads: &mut P) {
    if let Some((_, t)) = grads.tensors_mut().into_iter().next() {
        t.data_mut().iter_mut().for_each(|v| *v = -*v);
    }
}

/// Sequential-scan suite: `draws` random sequences of length 6, every
/// parameter, input token and initial-state entry. Alternates the decay
/// prior on and off.
pub fn scan_suite<T: Scalar>(seed: u64, draws: usize, opts: CheckOptions) -> GradCheck {
    let threshold = if T::DTYPE == DType::F32 {
        F32_TOLERANCE
    } else {
        SCAN_TOLERANCE
    };
    let mut report = GradCheck::new("scan_sequential", T::DTYPE, threshold);
    let root = Rng::new(seed);
    for draw in 0..draws {
        let mut rng = root.split(draw as u64);
        let d = [4, 6, 8][draw % 3];
        let heads = 2;
        let len = 6;
        let use_prior = draw % 2 == 0;
        let p = random_scan_params(d, heads, &mut rng)
            .cast::<T>()
            .cast::<f64>();
        let xs = round_trip::<T>(&rng.uniform_vec(len * d, -1.5, 1.5));
        let h0 = round_trip::<T>(&rng.uniform_vec(d, -1.0, 1.0));
        let d_ys = round_trip::<T>(&rng.uniform_vec(len * d, -1.0, 1.0));
        let d_h = round_trip::<T>(&rng.uniform_vec(d, -1.0, 1.0));

        let cast = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let mut g = scan_backward(
            &cast(&xs),
            &ScanState { h: cast(&h0) },
            &p.cast::<T>(),
            use_prior,
            &cast(&d_ys),
            &cast(&d_h),
        )
        .expect("consistent shapes");
        if opts.inject_sign_flip {
            flip(&mut g.params);
        }

        let loss = |p: &ScanParams<f64>, xs: &[f64], h0: &[f64]| {
            let out = scan_sequential(xs, &ScanState { h: h0.to_vec() }, p, use_prior)
                .expect("consistent shapes");
            out.ys.iter().zip(&d_ys).map(|(a, b)| a * b).sum::<f64>()
                + out
                    .h_end
                    .h
                    .iter()
                    .zip(&d_h)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        };
        compare_params(&mut report, "", &p, &g.params.cast(), |q| loss(q, &xs, &h0));
        compare_slice(&mut report, "x", &xs, &to_f64(&g.d_input), |x| {
            loss(&p, x, &h0)
        });
        compare_slice(&mut report, "h0", &h0, &to_f64(&g.d_h0), |h| {
            loss(&p, &xs, h)
        });
        report.draws += 1;
    }
    report
}

/// Chunked-scan suite over small grids with random `eta_cross`, snake on
/// and off; also checks the gradient w.r.t. `eta_cross`.
pub fn chunked_suite<T: Scalar>(seed: u64, draws: usize, opts: CheckOptions) -> GradCheck {
    let threshold = if T::DTYPE == DType::F32 {
        F32_TOLERANCE
    } else {
        SCAN_TOLERANCE
    };
    let mut report = GradCheck::new("scan_chunked", T::DTYPE, threshold);
    let root = Rng::new(seed ^ 0x5eed);
    for draw in 0..draws {
        let mut rng = root.split(draw as u64);
        let (h, w, l) = [(2, 4, 2), (3, 3, 3), (2, 6, 2)][draw % 3];
        let d = 4;
        let snake = draw % 2 == 1;
        let eta = T::lit(rng.uniform(0.3, 1.2)).to_f64_lossless();
        let plan = build_chunk_plan(h, w, l, eta, snake).expect("valid plan");
        let p = random_scan_params(d, 2, &mut rng).cast::<T>().cast::<f64>();
        let xs = round_trip::<T>(&rng.uniform_vec(h * w * d, -1.5, 1.5));
        let d_ys = round_trip::<T>(&rng.uniform_vec(h * w * d, -1.0, 1.0));

        let cast = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let mut g = scan_chunked_backward(&cast(&xs), &plan, &p.cast::<T>(), &cast(&d_ys))
            .expect("consistent shapes");
        if opts.inject_sign_flip {
            flip(&mut g.params);
        }
        let loss = |p: &ScanParams<f64>, xs: &[f64], plan: &crate::scan::ChunkPlan| {
            let ys = scan_chunked(xs, plan, p).expect("consistent shapes");
            ys.iter().zip(&d_ys).map(|(a, b)| a * b).sum::<f64>()
        };
        compare_params(&mut report, "", &p, &g.params.cast(), |q| {
            loss(q, &xs, &plan)
        });
        compare_slice(&mut report, "x", &xs, &to_f64(&g.d_input), |x| {
            loss(&p, x, &plan)
        });
        let numeric = central_diff(|e| loss(&p, &xs, &plan.with_eta_cross(e)), eta);
        report.record(
            || "eta_cross".into(),
            g.d_eta_cross.to_f64_lossless(),
            numeric,
        );
        report.draws += 1;
    }
    report
}

/// Full refinement pipeline suite on tiny random configurations; checks
/// every pipeline parameter through the cross-entropy loss.
pub fn pipeline_suite<T: Scalar>(seed: u64, draws: usize, opts: CheckOptions) -> GradCheck {
    let threshold = if T::DTYPE == DType::F32 {
        F32_TOLERANCE
    } else {
        PIPELINE_TOLERANCE
    };
    let mut report = GradCheck::new("pipeline", T::DTYPE, threshold);
    for draw in 0..draws {
        let draw_seed = seed.wrapping_add(1000 * draw as u64);
        let snake = draw % 2 == 0;
        let problem = tiny_problem(draw_seed, snake);
        let params = problem.params.cast::<T>().cast::<f64>();
        let fv = problem.fv.cast::<T>().cast::<f64>();
        let ft = problem.ft.cast::<T>().cast::<f64>();
        let dt = problem.dt.cast::<T>().cast::<f64>();
        let cfg: PipelineConfig = problem.cfg.clone();

        let (_, mut grads) = refine::forward_backward(
            &fv.cast::<T>(),
            &ft.cast::<T>(),
            &dt.cast::<T>(),
            &params.cast::<T>(),
            &cfg,
            &problem.labels,
        )
        .expect("consistent shapes");
        if opts.inject_sign_flip {
            flip(&mut grads);
        }
        let loss = |q: &PipelineParams<f64>| {
            refine::loss_only(&fv, &ft, &dt, q, &cfg, &problem.labels).expect("consistent shapes")
        };
        compare_params(&mut report, "", &params, &grads.cast(), loss);
        report.draws += 1;
    }
    report
}
