//! The refinement pipeline.
//!
//! ```text
//! C      = cos(F_v, F_t)                         HW × N_C
//! E      = lift(C, P)                            HW × N_C × d_f
//! repeat `blocks` times:
//!   Ê[i,j] = E[i,j] ⊙ (1 + γ_i) + β_i            (γ_i, β_i) = img_proj · F_v[i]
//!   E[:,j] = scan_chunked(Ê[:,j])                per class, shared parameters
//! Ĉ[i,j] = E[i,j] ⊙ (1 + γ̄) + β̄                (γ̄, β̄) = mean_d txt_proj · t_d
//! E[i,:] = scan_sequential(Ĉ[i,:])               per position, over classes
//! logits[i,j] = w · E[i,j] + b
//! ```
//!
//! Per-class and per-position work runs on the rayon pool. Every reduction
//! is done in a fixed order, so results do not depend on the thread count.

mod backward;
mod params;


pub use backward::{cross_entropy, forward_backward, loss_only};
pub use params::{
    load_pipeline, save_pipeline, Chunking, DomainTexts, ModulationParams, PipelineConfig,
    PipelineDims, PipelineFile, PipelineParams, PIPELINE_SIDECAR,
};

use rayon::prelude::*;

use crate::correlation::{
    initial_correlation, lift, CorrelationMap, CorrelationVolume, FeatureGrid, TextEmbeddings,
};
use crate::error::{dim_err, Result};
use crate::numerics::{dot, matvec, Scalar, Tensor};
use crate::scan::{
    scan_chunked, scan_chunked_taped, scan_sequential, scan_sequential_taped, ChunkPlan,
    ChunkedTape, ScanParams, ScanState, ScanTape,
};

/// `(γ, β)` pairs for every visual token, `HW × 2·d_f`.
fn image_film<T: Scalar>(fv: &FeatureGrid<T>, mp: &ModulationParams<T>) -> Vec<T> {
    let two_df = 2 * mp.embed_dim();
    let mut film = vec![T::zero(); fv.positions() * two_df];
    for (pos, out) in film.chunks_exact_mut(two_df).enumerate() {
        matvec(mp.img_proj.data(), fv.feature(pos), out);
    }
    film
}

/// Averaged `(γ̄, β̄)` over the domain texts.
fn text_film<T: Scalar>(dt: &DomainTexts<T>, mp: &ModulationParams<T>) -> Vec<T> {
    let two_df = 2 * mp.embed_dim();
    let mut sum = vec![T::zero(); two_df];
    let mut pair = vec![T::zero(); two_df];
    for d in 0..dt.count() {
        matvec(mp.txt_proj.data(), dt.values().row(d), &mut pair);
        for (s, &v) in sum.iter_mut().zip(&pair) {
            *s += v;
        }
    }
    let n = T::lit(dt.count() as f64);
    sum.iter_mut().for_each(|s| *s = *s / n);
    sum
}

/// `x ⊙ (1 + γ) + β` with `film = [γ; β]`.
#[inline]
fn apply_film<T: Scalar>(x: &[T], film: &[T], out: &mut [T]) {
    let (gamma, beta) = film.split_at(x.len());
    for (((o, &xv), &g), &b) in out.iter_mut().zip(x).zip(gamma).zip(beta) {
        *o = xv * (T::one() + g) + b;
    }
}

/// Applies a per-position FiLM table (`HW × 2·d_f`) to a volume.
fn modulate_positions<T: Scalar>(e: &CorrelationVolume<T>, film: &[T]) -> CorrelationVolume<T> {
    let df = e.embed_dim();
    let nc = e.num_classes();
    let mut out = vec![T::zero(); e.data().len()];
    for (pos, block) in out.chunks_exact_mut(nc * df).enumerate() {
        let f = &film[pos * 2 * df..(pos + 1) * 2 * df];
        for (j, o) in block.chunks_exact_mut(df).enumerate() {
            apply_film(e.at(pos, j), f, o);
        }
    }
    volume_like(e, out)
}

fn volume_like<T: Scalar>(e: &CorrelationVolume<T>, data: Vec<T>) -> CorrelationVolume<T> {
    CorrelationVolume {
        height: e.height,
        width: e.width,
        values: Tensor::from_parts(e.values.dims().to_vec(), data),
    }
}

fn check_modulation<T: Scalar>(e: &CorrelationVolume<T>, mp: &ModulationParams<T>) -> Result<()> {
    if e.embed_dim() != mp.embed_dim() {
        return Err(dim_err!(
            "volume d_f={} but modulation produces {} channels",
            e.embed_dim(),
            mp.embed_dim()
        ));
    }
    Ok(())
}

/// Image-conditioned modulation: every class at position `i` gets the same
/// `(γ_i, β_i)`, projected from `F_v[i]`.
pub fn modulate_image<T: Scalar>(
    e: &CorrelationVolume<T>,
    fv: &FeatureGrid<T>,
    mp: &ModulationParams<T>,
) -> Result<CorrelationVolume<T>> {
    check_modulation(e, mp)?;
    if (fv.height(), fv.width()) != (e.height, e.width) {
        return Err(dim_err!(
            "feature grid {}x{} vs volume {}x{}",
            fv.height(),
            fv.width(),
            e.height,
            e.width
        ));
    }
    if fv.dim() != mp.feature_dim() {
        return Err(dim_err!(
            "visual features have d={}, modulation expects {}",
            fv.dim(),
            mp.feature_dim()
        ));
    }
    Ok(modulate_positions(e, &image_film(fv, mp)))
}

/// Text-conditioned modulation with `(γ, β)` averaged over the domain texts.
pub fn modulate_text<T: Scalar>(
    c: &CorrelationVolume<T>,
    dt: &DomainTexts<T>,
    mp: &ModulationParams<T>,
) -> Result<CorrelationVolume<T>> {
    check_modulation(c, mp)?;
    if dt.dim() != mp.feature_dim() {
        return Err(dim_err!(
            "domain texts have d={}, modulation expects {}",
            dt.dim(),
            mp.feature_dim()
        ));
    }
    let film = text_film(dt, mp);
    let out = c
        .data()
        .chunks_exact(c.embed_dim())
        .flat_map(|x| {
            let mut o = vec![T::zero(); x.len()];
            apply_film(x, &film, &mut o);
            o
        })
        .collect();
    Ok(volume_like(c, out))
}

fn check_plan<T: Scalar>(e: &CorrelationVolume<T>, plan: &ChunkPlan) -> Result<()> {
    if (plan.height(), plan.width()) != (e.height, e.width) {
        return Err(dim_err!(
            "chunk plan is for {}x{}, volume is {}x{}",
            plan.height(),
            plan.width(),
            e.height,
            e.width
        ));
    }
    Ok(())
}

/// Scans every class slice of `e` with the shared spatial parameters and
/// reassembles the volume. Returns the per-class tapes when `taped`.
fn scan_classes<T: Scalar>(
    e: &CorrelationVolume<T>,
    p: &ScanParams<T>,
    plan: &ChunkPlan,
    taped: bool,
) -> Result<(CorrelationVolume<T>, Vec<ChunkedTape<T>>)> {
    let nc = e.num_classes();
    let df = e.embed_dim();
    let per_class: Vec<(Vec<T>, Option<ChunkedTape<T>>)> = (0..nc)
        .into_par_iter()
        .map(|j| {
            let seq = e.class_slice(j);
            if taped {
                scan_chunked_taped(&seq, plan, p).map(|(ys, t)| (ys, Some(t)))
            } else {
                scan_chunked(&seq, plan, p).map(|ys| (ys, None))
            }
        })
        .collect::<Result<_>>()?;
    let mut out = vec![T::zero(); e.data().len()];
    let mut tapes = Vec::new();
    for (j, (ys, tape)) in per_class.into_iter().enumerate() {
        for (pos, y) in ys.chunks_exact(df).enumerate() {
            let off = (pos * nc + j) * df;
            out[off..off + df].copy_from_slice(y);
        }
        tapes.extend(tape);
    }
    Ok((volume_like(e, out), tapes))
}

/// `blocks` rounds of image modulation followed by per-class chunked scans.
pub fn spatial_aggregate<T: Scalar>(
    e: &CorrelationVolume<T>,
    fv: &FeatureGrid<T>,
    params: &PipelineParams<T>,
    plan: &ChunkPlan,
    blocks: usize,
) -> Result<CorrelationVolume<T>> {
    check_plan(e, plan)?;
    let mut cur = e.clone();
    for _ in 0..blocks {
        let m = modulate_image(&cur, fv, &params.modulation)?;
        cur = scan_classes(&m, &params.spatial_scan, plan, false)?.0;
    }
    Ok(cur)
}

/// Sequential scan over the class axis at every position, from a zero state
/// and without the decay prior.
fn scan_positions<T: Scalar>(
    c: &CorrelationVolume<T>,
    p: &ScanParams<T>,
    taped: bool,
) -> Result<(CorrelationVolume<T>, Vec<ScanTape<T>>)> {
    let df = c.embed_dim();
    let block = c.num_classes() * df;
    let h0 = ScanState::zeros(df);
    let per_pos: Vec<(Vec<T>, Option<ScanTape<T>>)> = c
        .data()
        .par_chunks_exact(block)
        .map(|seq| {
            if taped {
                scan_sequential_taped(seq, &h0, p, false).map(|(o, t)| (o.ys, Some(t)))
            } else {
                scan_sequential(seq, &h0, p, false).map(|o| (o.ys, None))
            }
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(c.data().len());
    let mut tapes = Vec::new();
    for (ys, tape) in per_pos {
        out.extend_from_slice(&ys);
        tapes.extend(tape);
    }
    Ok((volume_like(c, out), tapes))
}

/// Text modulation followed by a class-axis scan at every position.
pub fn class_aggregate<T: Scalar>(
    ctilde: &CorrelationVolume<T>,
    dt: &DomainTexts<T>,
    params: &PipelineParams<T>,
) -> Result<CorrelationVolume<T>> {
    let m = modulate_text(ctilde, dt, &params.modulation)?;
    Ok(scan_positions(&m, &params.class_scan, false)?.0)
}

/// `logits[i, j] = w · E[i, j, :] + b`, shape `HW × N_C`.
pub fn decode<T: Scalar>(
    ecls: &CorrelationVolume<T>,
    params: &PipelineParams<T>,
) -> Result<Tensor<T>> {
    let df = ecls.embed_dim();
    if params.decoder_w.len() != df {
        return Err(dim_err!(
            "decoder expects d_f={}, volume has {df}",
            params.decoder_w.len()
        ));
    }
    let w = params.decoder_w.data();
    let b = params.decoder_b.data()[0];
    let logits = ecls
        .data()
        .chunks_exact(df)
        .map(|e| dot(w, e) + b)
        .collect();
    Ok(Tensor::from_parts(
        vec![ecls.positions(), ecls.num_classes()],
        logits,
    ))
}

/// Every stage of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub plan: ChunkPlan,
    pub initial: CorrelationMap<T>,
    pub spatial: CorrelationVolume<T>,
    pub class: CorrelationVolume<T>,
    /// `HW × N_C`.
    pub logits: Tensor<T>,
}

/// What the reverse pass needs from a forward pass.
pub(crate) struct Tape<T> {
    pub trace: ForwardTrace<T>,
    pub image_film: Vec<T>,
    /// Volume entering each spatial block, before modulation.
    pub block_inputs: Vec<CorrelationVolume<T>>,
    /// `[block][class]`.
    pub spatial_tapes: Vec<Vec<ChunkedTape<T>>>,
    pub text_film: Vec<T>,
    pub class_tapes: Vec<ScanTape<T>>,
}

fn check_inputs<T: Scalar>(
    fv: &FeatureGrid<T>,
    ft: &TextEmbeddings<T>,
    dt: &DomainTexts<T>,
    params: &PipelineParams<T>,
) -> Result<()> {
    params.check(fv.dim(), ft.num_classes())?;
    if dt.dim() != fv.dim() {
        return Err(dim_err!(
            "domain texts have d={}, visual features d={}",
            dt.dim(),
            fv.dim()
        ));
    }
    Ok(())
}

pub(crate) fn run<T: Scalar>(
    fv: &FeatureGrid<T>,
    ft: &TextEmbeddings<T>,
    dt: &DomainTexts<T>,
    params: &PipelineParams<T>,
    cfg: &PipelineConfig,
    taped: bool,
) -> Result<Tape<T>> {
    check_inputs(fv, ft, dt, params)?;
    let plan = cfg.plan(fv.height(), fv.width())?;
    let initial = initial_correlation(fv, ft)?;
    let mut cur = lift(&initial, &params.lift)?;

    let film = image_film(fv, &params.modulation);
    let mut block_inputs = Vec::new();
    let mut spatial_tapes = Vec::new();
    for _ in 0..cfg.blocks {
        let m = modulate_positions(&cur, &film);
        let (next, tapes) = scan_classes(&m, &params.spatial_scan, &plan, taped)?;
        if taped {
            block_inputs.push(cur);
            spatial_tapes.push(tapes);
        }
        cur = next;
    }
    let spatial = cur;

    let modulated = modulate_text(&spatial, dt, &params.modulation)?;
    let (class, class_tapes) = scan_positions(&modulated, &params.class_scan, taped)?;
    let logits = decode(&class, params)?;
    Ok(Tape {
        trace: ForwardTrace {
            plan,
            initial,
            spatial,
            class,
            logits,
        },
        image_film: film,
        block_inputs,
        spatial_tapes,
        text_film: text_film(dt, &params.modulation),
        class_tapes,
    })
}

/// Per-pixel logits, `HW × N_C`.
pub fn forward<T: Scalar>(
    fv: &FeatureGrid<T>,
    ft: &TextEmbeddings<T>,
    dt: &DomainTexts<T>,
    params: &PipelineParams<T>,
    cfg: &PipelineConfig,
) -> Result<Tensor<T>> {
    Ok(run(fv, ft, dt, params, cfg, false)?.trace.logits)
}

/// Forward pass keeping every intermediate stage.
pub fn forward_trace<T: Scalar>(
    fv: &FeatureGrid<T>,
    ft: &TextEmbeddings<T>,
    dt: &DomainTexts<T>,
    params: &PipelineParams<T>,
    cfg: &PipelineConfig,
) -> Result<ForwardTrace<T>> {
    Ok(run(fv, ft, dt, params, cfg, false)?.trace)
}
