use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{generate, SynthConfig, SynthSample};
use crate::correlation::initial_correlation;
use crate::error::{arg_err, Result};
use crate::infer::{argmax_rows, IGNORE_LABEL};
use crate::numerics::{DType, Rng, Scalar};
use crate::optim::{add_into, AdamW, AdamWConfig, ParamSet};
use crate::refine::{forward, forward_backward, PipelineConfig, PipelineDims, PipelineParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub embed_dim: usize,
    #[serde(rename = "K")]
    pub heads: usize,
    pub steps: usize,
    /// Training samples, generated once and used as a full batch every step.
    pub batch: usize,
    /// Held-out samples for the accuracy figures.
    pub eval_samples: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            pipeline: PipelineConfig::default(),
            embed_dim: 16,
            heads: 4,
            steps: 500,
            batch: 4,
            eval_samples: 4,
            optimizer: AdamWConfig::default(),
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingReport {
    pub config: TrainConfig,
    pub dtype: DType,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    pub step_ms: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Argmax of the corrupted initial correlation map, held-out samples.
    pub raw_accuracy: f64,
    /// Argmax of the refined logits before training, held-out samples.
    pub refined_accuracy_initial: f64,
    /// Argmax of the refined logits after training, held-out samples.
    pub refined_accuracy: f64,
    pub train_raw_accuracy: f64,
    pub train_refined_accuracy: f64,
    /// Largest absolute change of any parameter entry.
    pub max_param_delta: f64,
    /// Step whose loss was not finite; training stops there.
    pub diverged_at: Option<usize>,
    pub wall_s: f64,
}

impl TrainingReport {
    pub fn failed(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Mean of `losses[range]`.
    pub fn mean_loss(&self, from: usize, to: usize) -> f64 {
        let s = &self.losses[from..to.min(self.losses.len())];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

/// Fraction of non-ignored pixels whose prediction matches the label.
pub fn pixel_accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let scored: Vec<(usize, usize)> = pred
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != IGNORE_LABEL)
        .map(|(&p, &l)| (p, l))
        .collect();
    scored.iter().filter(|(p, l)| p == l).count() as f64 / scored.len().max(1) as f64
}

struct Cast<T> {
    fv: crate::correlation::FeatureGrid<T>,
    ft: crate::correlation::TextEmbeddings<T>,
    dt: crate::refine::DomainTexts<T>,
    labels: Vec<usize>,
}

fn cast<T: Scalar>(s: &SynthSample) -> Cast<T> {
    Cast {
        fv: s.fv.cast(),
        ft: s.ft.cast(),
        dt: s.dt.cast(),
        labels: s.labels.clone(),
    }
}

fn raw_accuracy<T: Scalar>(samples: &[Cast<T>]) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        acc += pixel_accuracy(&initial_correlation(&s.fv, &s.ft)?.argmax(), &s.labels);
    }
    Ok(acc / samples.len() as f64)
}

fn refined_accuracy<T: Scalar>(
    samples: &[Cast<T>],
    p: &PipelineParams<T>,
    cfg: &PipelineConfig,
) -> Result<f64> {
    let mut acc = 0.0;
    for s in samples {
        let logits = forward(&s.fv, &s.ft, &s.dt, p, cfg)?;
        acc += pixel_accuracy(&argmax_rows(logits.data(), s.ft.num_classes()), &s.labels);
    }
    Ok(acc / samples.len() as f64)
}

/// Trains the pipeline to recover clean labels from corrupted features with
/// AdamW on a fixed, seeded batch.
pub fn train_denoise<T: Scalar>(cfg: &TrainConfig) -> Result<TrainingReport> {
    if cfg.steps == 0 || cfg.batch == 0 || cfg.eval_samples == 0 {
        return Err(arg_err!("steps, batch and eval_samples must be at least 1"));
    }
    let started = Instant::now();
    let rng = Rng::new(cfg.seed);
    let dims = PipelineDims::new(cfg.synth.feature_dim, cfg.embed_dim, cfg.synth.num_classes)
        .with_heads(cfg.heads);
    let mut params = PipelineParams::<T>::init(dims, &rng.split(0))?;
    let start_params = params.clone();
    let draw = |stream: u64, n: usize| -> Result<Vec<Cast<T>>> {
        let base = rng.split(stream);
        (0..n)
            .map(|i| generate(&cfg.synth, &base.split(i as u64)).map(|s| cast(&s)))
            .collect()
    };
    let train = draw(1, cfg.batch)?;
    let eval = draw(2, cfg.eval_samples)?;
    let refined_accuracy_initial = refined_accuracy(&eval, &params, &cfg.pipeline)?;

    let mut opt = AdamW::new(cfg.optimizer, &params);
    let inv_batch = T::one() / T::lit(cfg.batch as f64);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut step_ms = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let mut total = params.zeros_like();
        let mut loss = 0.0;
        for s in &train {
            let (l, g) = forward_backward(&s.fv, &s.ft, &s.dt, &params, &cfg.pipeline, &s.labels)?;
            loss += l.to_f64_lossless();
            add_into(&mut total, &g);
        }
        loss /= cfg.batch as f64;
        losses.push(loss);
        if !loss.is_finite() {
            log::warn!("loss became non-finite at step {step}");
            diverged_at = Some(step);
            break;
        }
        for (_, t) in total.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= inv_batch);
        }
        opt.step(&mut params, &total)?;
        step_ms.push(t0.elapsed().as_secs_f64() * 1e3);
        if step % 50 == 0 {
            log::info!("step {step}: loss {loss:.5}");
        }
    }

    // A diverged run has nothing meaningful to evaluate.
    let ok = diverged_at.is_none();
    Ok(TrainingReport {
        config: cfg.clone(),
        dtype: T::DTYPE,
        initial_loss: losses[0],
        final_loss: *losses.last().expect("at least one step"),
        raw_accuracy: raw_accuracy(&eval)?,
        refined_accuracy_initial,
        refined_accuracy: if ok {
            refined_accuracy(&eval, &params, &cfg.pipeline)?
        } else {
            f64::NAN
        },
        train_raw_accuracy: raw_accuracy(&train)?,
        train_refined_accuracy: if ok {
            refined_accuracy(&train, &params, &cfg.pipeline)?
        } else {
            f64::NAN
        },
        max_param_delta: params.max_abs_delta(&start_params).to_f64_lossless(),
        losses,
        step_ms,
        diverged_at,
        wall_s: started.elapsed().as_secs_f64(),
    })
}
