//! Synthetic domain-shift workloads, the denoising trainer, and the
//! benchmark harness.
//!
//! A sample paints class blobs on a token grid and gives every token the
//! text prototype of its class plus bounded jitter. The corrupted features
//! add isotropic Gaussian noise and rectangles pushed toward a wrong class,
//! mimicking long-range false activations.

mod bench;
mod train;

pub use bench::{
    bench_chunk_speed, bench_vocab_scaling, fit_slope, machine_info, scaling_series, time_median,
    BenchReport, ChunkBenchConfig, MachineInfo, Measurement, SeriesSummary, Timing, TimingOpts,
    VocabBenchConfig, CLASS_ATTENTION, CLASS_SCAN,
};
pub use train::{pixel_accuracy, train_denoise, TrainConfig, TrainingReport};

use serde::{Deserialize, Serialize};

use crate::correlation::{initial_correlation, CorrelationMap, FeatureGrid, TextEmbeddings};
use crate::error::{arg_err, Result};
use crate::numerics::{Rng, Tensor};
use crate::refine::{Chunking, DomainTexts, PipelineConfig, PipelineDims, PipelineParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Feature dimension `d`.
    pub feature_dim: usize,
    /// Blob seeds painted per class.
    pub blob_count: usize,
    /// Norm bound of the clean per-token jitter. Below 0.5 the clean
    /// argmax is exact when classes are orthonormal.
    pub jitter: f64,
    /// Expected norm of the additive Gaussian noise.
    pub noise_sigma: f64,
    pub spurious_patches: usize,
    /// Weight of the wrong-class prototype added inside a patch.
    pub spurious_gain: f64,
    pub domain_texts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            num_classes: 8,
            feature_dim: 16,
            blob_count: 2,
            jitter: 0.1,
            noise_sigma: 0.8,
            spurious_patches: 4,
            spurious_gain: 1.0,
            domain_texts: 2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.height,
            self.width,
            self.num_classes,
            self.feature_dim,
            self.blob_count,
            self.domain_texts,
        ];
        if sizes.contains(&0) {
            return Err(arg_err!("synthetic sizes must be positive: {self:?}"));
        }
        let nonneg = [self.jitter, self.noise_sigma, self.spurious_gain];
        if nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(arg_err!("jitter, noise and gain must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn without_corruption(&self) -> Self {
        Self {
            noise_sigma: 0.0,
            spurious_patches: 0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    /// Corrupted visual features.
    pub fv: FeatureGrid<f64>,
    pub clean_fv: FeatureGrid<f64>,
    pub ft: TextEmbeddings<f64>,
    pub dt: DomainTexts<f64>,
    pub labels: Vec<usize>,
    pub clean_corr: CorrelationMap<f64>,
}

/// Unit prototypes; orthonormal when `n <= d` (Gram-Schmidt on Gaussian
/// draws), otherwise independent random unit vectors.
fn prototypes(n: usize, d: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    while out.len() < n {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        if out.len() < d {
            for u in &out {
                let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Nearest-seed labelling with `blob_count` seeds per class.
fn paint_blobs(cfg: &SynthConfig, rng: &mut Rng) -> Vec<usize> {
    let seeds: Vec<(f64, f64, usize)> = (0..cfg.num_classes)
        .flat_map(|c| (0..cfg.blob_count).map(move |_| c))
        .map(|c| {
            let y = rng.uniform(0.0, cfg.height as f64);
            let x = rng.uniform(0.0, cfg.width as f64);
            (y, x, c)
        })
        .collect();
    (0..cfg.height * cfg.width)
        .map(|pos| {
            let y = (pos / cfg.width) as f64 + 0.5;
            let x = (pos % cfg.width) as f64 + 0.5;
            let mut best = (f64::INFINITY, 0);
            for &(sy, sx, c) in &seeds {
                let d2 = (sy - y).powi(2) + (sx - x).powi(2);
                if d2 < best.0 {
                    best = (d2, c);
                }
            }
            best.1
        })
        .collect()
}

/// Draws one sample. Every random quantity comes from its own stream of
/// `rng`, so turning corruption off leaves labels and clean features intact.
pub fn generate(cfg: &SynthConfig, rng: &Rng) -> Result<SynthSample> {
    cfg.validate()?;
    let (h, w, d) = (cfg.height, cfg.width, cfg.feature_dim);
    let protos = prototypes(cfg.num_classes, d, &mut rng.split(0));
    let labels = paint_blobs(cfg, &mut rng.split(1));

    let mut jitter_rng = rng.split(2);
    let bound = cfg.jitter / (d as f64).sqrt();
    let clean: Vec<f64> = labels
        .iter()
        .flat_map(|&l| {
            protos[l]
                .iter()
                .map(|&p| p + jitter_rng.uniform(-bound, bound))
                .collect::<Vec<_>>()
        })
        .collect();

    let mut noisy = clean.clone();
    let mut noise_rng = rng.split(3);
    let std = cfg.noise_sigma / (d as f64).sqrt();
    if std > 0.0 {
        noisy
            .iter_mut()
            .for_each(|v| *v += std * noise_rng.normal());
    }
    let mut patch_rng = rng.split(4);
    for _ in 0..cfg.spurious_patches {
        let ph = 1 + patch_rng.below((h / 3).max(1));
        let pw = 1 + patch_rng.below((w / 3).max(1));
        let top = patch_rng.below(h - ph + 1);
        let left = patch_rng.below(w - pw + 1);
        let anchor = labels[(top + ph / 2) * w + left + pw / 2];
        let wrong = if cfg.num_classes > 1 {
            (anchor + 1 + patch_rng.below(cfg.num_classes - 1)) % cfg.num_classes
        } else {
            anchor
        };
        for r in top..top + ph {
            for c in left..left + pw {
                let f = &mut noisy[(r * w + c) * d..(r * w + c + 1) * d];
                f.iter_mut()
                    .zip(&protos[wrong])
                    .for_each(|(v, p)| *v += cfg.spurious_gain * p);
            }
        }
    }

    let mut dom_rng = rng.split(5);
    let dom: Vec<f64> = (0..cfg.domain_texts * d)
        .map(|_| dom_rng.normal() / (d as f64).sqrt())
        .collect();

    let ft = TextEmbeddings::unnamed(Tensor::new(&[cfg.num_classes, d], protos.concat())?)?;
    let clean_fv = FeatureGrid::new(h, w, Tensor::new(&[h * w, d], clean)?)?;
    let fv = FeatureGrid::new(h, w, Tensor::new(&[h * w, d], noisy)?)?;
    let clean_corr = initial_correlation(&clean_fv, &ft)?;
    Ok(SynthSample {
        fv,
        clean_fv,
        ft,
        dt: DomainTexts::new(Tensor::new(&[cfg.domain_texts, d], dom)?)?,
        labels,
        clean_corr,
    })
}

/// A small fully-specified problem: random non-default parameters, inputs
/// and labels. Used by gradient checks and golden tests.
#[derive(Clone, Debug)]
pub struct TinyProblem {
    pub params: PipelineParams<f64>,
    pub fv: FeatureGrid<f64>,
    pub ft: TextEmbeddings<f64>,
    pub dt: DomainTexts<f64>,
    pub cfg: PipelineConfig,
    pub labels: Vec<usize>,
}

/// `4 × 4` grid, `d = 8`, `d_f = 6`, three classes, two heads, two domain
/// texts, chunk length 2, two blocks.
pub fn tiny_problem(seed: u64, snake: bool) -> TinyProblem {
    let rng = Rng::new(seed);
    let (h, w, d, df, nc) = (4, 4, 8, 6, 3);
    let dims = PipelineDims::new(d, df, nc).with_heads(2);
    let mut params = PipelineParams::init(dims, &rng.split(10)).expect("valid tiny dims");
    let mut r = rng.split(11);
    // Move every parameter off its structured default.
    for scan in [&mut params.spatial_scan, &mut params.class_scan] {
        scan.b_a = r.uniform_tensor(&[df], -0.5, 1.5);
        scan.b_b = r.uniform_tensor(&[df], -0.5, 0.5);
        scan.mix_w = r.uniform_tensor(&[2], -1.0, 1.0);
        let g = [r.uniform(0.3, 0.9), r.uniform(0.3, 0.9)];
        scan.set_gamma_prior(&g).expect("prior in range");
    }
    params.modulation.img_proj = r.uniform_tensor(&[2 * df, d], -0.3, 0.3);
    params.modulation.txt_proj = r.uniform_tensor(&[2 * df, d], -0.3, 0.3);
    params.decoder_b = r.uniform_tensor(&[1], -0.5, 0.5);

    let mut x = rng.split(12);
    let fv = FeatureGrid::new(h, w, x.normal_tensor(&[h * w, d], 1.0)).expect("valid grid");
    let ft = TextEmbeddings::unnamed(x.normal_tensor(&[nc, d], 1.0)).expect("valid text");
    let dt = DomainTexts::new(x.normal_tensor(&[2, d], 0.5)).expect("valid domains");
    let mut labels: Vec<usize> = (0..h * w).map(|_| x.below(nc)).collect();
    labels[5] = crate::infer::IGNORE_LABEL;
    TinyProblem {
        params,
        fv,
        ft,
        dt,
        cfg: PipelineConfig {
            blocks: 2,
            chunking: Chunking::Len(2),
            eta_cross: 0.7,
            snake,
        },
        labels,
    }
}
