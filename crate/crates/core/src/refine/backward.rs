use rayon::prelude::*;

use super::{run, DomainTexts, PipelineConfig, PipelineParams, Tape};
use crate::correlation::{lift_backward, FeatureGrid, TextEmbeddings};
use crate::error::{arg_err, dim_err, Result};
use crate::infer::IGNORE_LABEL;
use crate::numerics::{outer_acc, Scalar, Tensor};
use crate::optim::add_into;
use crate::scan::{backward_from_tape, chunked_backward_from_tape, ScanParams};

/// Positions handled per work item of the class-scan reverse pass. Fixed so
/// the gradient summation order does not depend on the thread count.
const POSITION_GROUP: usize = 32;

/// Mean softmax cross-entropy over pixels whose label is not
/// [`IGNORE_LABEL`], and its gradient w.r.t. the `HW × N_C` logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Vec<T>)> {
    let (hw, nc) = logits.shape2()?;
    if labels.len() != hw {
        return Err(dim_err!("{} labels for {hw} logit rows", labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= nc && l != IGNORE_LABEL) {
        return Err(arg_err!(
            "label {bad} outside 0..{nc} and not the ignore value"
        ));
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return Err(arg_err!("every pixel carries the ignore label"));
    }
    let inv_n = T::one() / T::lit(valid as f64);
    let mut loss = T::zero();
    let mut grad = vec![T::zero(); hw * nc];
    for ((row, g), &y) in logits
        .data()
        .chunks_exact(nc)
        .zip(grad.chunks_exact_mut(nc))
        .zip(labels)
    {
        if y == IGNORE_LABEL {
            continue;
        }
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (gv, &v) in g.iter_mut().zip(row) {
            *gv = (v - m).exp();
            z += *gv;
        }
        loss += z.ln() + m - row[y];
        for gv in g.iter_mut() {
            *gv = *gv / z * inv_n;
        }
        g[y] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Loss of one forward pass.
pub fn loss_only<T: Scalar>(
    fv: &FeatureGrid<T>,
    ft: &TextEmbeddings<T>,
    dt: &DomainTexts<T>,
    params: &PipelineParams<T>,
    cfg: &PipelineConfig,
    labels: &[usize],
) -> Result<T> {
    let tape = run(fv, ft, dt, params, cfg, false)?;
    Ok(cross_entropy(&tape.trace.logits, labels)?.0)
}

/// Loss and exact gradients w.r.t. every pipeline parameter.
pub fn forward_backward<T: Scalar>(
    fv: &FeatureGrid<T>,
    ft: &TextEmbeddings<T>,
    dt: &DomainTexts<T>,
    params: &PipelineParams<T>,
    cfg: &PipelineConfig,
    labels: &[usize],
) -> Result<(T, PipelineParams<T>)> {
    let tape = run(fv, ft, dt, params, cfg, true)?;
    let (loss, d_logits) = cross_entropy(&tape.trace.logits, labels)?;
    Ok((loss, backward(&tape, fv, dt, params, &d_logits)))
}

fn backward<T: Scalar>(
    tape: &Tape<T>,
    fv: &FeatureGrid<T>,
    dt: &DomainTexts<T>,
    p: &PipelineParams<T>,
    d_logits: &[T],
) -> PipelineParams<T> {
    let trace = &tape.trace;
    let df = p.embed_dim();
    let nc = p.num_classes();
    let hw = trace.initial.positions();
    let mut grads = p.zeros_like();

    // Decoder.
    let w = p.decoder_w.data();
    let mut d_vol = vec![T::zero(); hw * nc * df];
    for ((&g, e), de) in d_logits
        .iter()
        .zip(trace.class.data().chunks_exact(df))
        .zip(d_vol.chunks_exact_mut(df))
    {
        for k in 0..df {
            grads.decoder_w.data_mut()[k] += g * e[k];
            de[k] = g * w[k];
        }
        grads.decoder_b.data_mut()[0] += g;
    }

    // Class-axis scans, one tape per position.
    let block = nc * df;
    let zero_end = vec![T::zero(); df];
    let groups: Vec<(ScanParams<T>, Vec<T>)> = tape
        .class_tapes
        .par_chunks(POSITION_GROUP)
        .zip(d_vol.par_chunks(POSITION_GROUP * block))
        .map(|(tapes, d_ys)| {
            let mut g = p.class_scan.zeros_like();
            let mut d_in = Vec::with_capacity(d_ys.len());
            for (t, dy) in tapes.iter().zip(d_ys.chunks_exact(block)) {
                d_in.extend(backward_from_tape(t, &p.class_scan, dy, &zero_end, &mut g).0);
            }
            (g, d_in)
        })
        .collect();
    let mut d_mod = Vec::with_capacity(d_vol.len());
    for (g, d_in) in groups {
        add_into(&mut grads.class_scan, &g);
        d_mod.extend(d_in);
    }

    // Text modulation: Ĉ = C̃ ⊙ (1 + γ̄) + β̄.
    let (gamma, _) = tape.text_film.split_at(df);
    let mut d_film = vec![T::zero(); 2 * df];
    for ((dc, c), d_prev) in d_mod
        .chunks_exact(df)
        .zip(trace.spatial.data().chunks_exact(df))
        .zip(d_vol.chunks_exact_mut(df))
    {
        for k in 0..df {
            d_film[k] += dc[k] * c[k];
            d_film[df + k] += dc[k];
            d_prev[k] = dc[k] * (T::one() + gamma[k]);
        }
    }
    let t_mean = mean_rows(dt.values());
    outer_acc(grads.modulation.txt_proj.data_mut(), &d_film, &t_mean);

    // Spatial blocks in reverse.
    for (input, tapes) in tape.block_inputs.iter().zip(&tape.spatial_tapes).rev() {
        let per_class: Vec<(ScanParams<T>, Vec<T>)> = tapes
            .par_iter()
            .enumerate()
            .map(|(j, t)| {
                let mut g = p.spatial_scan.zeros_like();
                let d_ys = class_slice(&d_vol, j, nc, df);
                let (d_in, _) =
                    chunked_backward_from_tape(t, &trace.plan, &p.spatial_scan, &d_ys, &mut g);
                (g, d_in)
            })
            .collect();
        let mut d_hat = vec![T::zero(); d_vol.len()];
        for (j, (g, d_in)) in per_class.into_iter().enumerate() {
            add_into(&mut grads.spatial_scan, &g);
            for (pos, d) in d_in.chunks_exact(df).enumerate() {
                let off = (pos * nc + j) * df;
                d_hat[off..off + df].copy_from_slice(d);
            }
        }

        // Image modulation: Ê[i,j] = E[i,j] ⊙ (1 + γ_i) + β_i.
        for pos in 0..hw {
            let film = &tape.image_film[pos * 2 * df..(pos + 1) * 2 * df];
            let mut d_pair = vec![T::zero(); 2 * df];
            for j in 0..nc {
                let off = (pos * nc + j) * df;
                let e = input.at(pos, j);
                for k in 0..df {
                    let g = d_hat[off + k];
                    d_pair[k] += g * e[k];
                    d_pair[df + k] += g;
                    d_vol[off + k] = g * (T::one() + film[k]);
                }
            }
            outer_acc(
                grads.modulation.img_proj.data_mut(),
                &d_pair,
                fv.feature(pos),
            );
        }
    }

    let d_proj = lift_backward(&trace.initial, &d_vol, df);
    grads.lift.proj.data_mut().copy_from_slice(&d_proj);
    grads
}

fn class_slice<T: Scalar>(vol: &[T], j: usize, nc: usize, df: usize) -> Vec<T> {
    vol.chunks_exact(nc * df)
        .flat_map(|block| block[j * df..(j + 1) * df].iter().copied())
        .collect()
}

fn mean_rows<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let (n, d) = (t.dims()[0], t.dims()[1]);
    let mut m = vec![T::zero(); d];
    for r in 0..n {
        for (mv, &v) in m.iter_mut().zip(t.row(r)) {
            *mv += v;
        }
    }
    let n = T::lit(n as f64);
    m.iter_mut().for_each(|v| *v = *v / n);
    m
}
