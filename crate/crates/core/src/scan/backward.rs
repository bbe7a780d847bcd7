use super::{
    gather, scan_chunked_taped, scan_sequential_taped, scatter, ChunkPlan, ChunkedTape, DecayMix,
    ScanParams, ScanState, ScanTape,
};
use crate::error::{dim_err, Result};
use crate::numerics::{dot, matvec_t_acc, outer_acc, Scalar};

/// Reverse-mode gradients of a scalar loss through a scan.
///
/// `params` mirrors [`ScanParams`] field by field. `d_input` is laid out like
/// the forward input sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TapeGradients<T> {
    pub params: ScanParams<T>,
    pub d_input: Vec<T>,
    pub d_h0: Vec<T>,
    pub d_eta_cross: T,
}

/// Accumulates parameter gradients of one taped scan into `grads` and returns
/// `(d_input, d_h0)`.
///
/// `d_ys` is the loss gradient w.r.t. every output, `d_h_end` w.r.t. the
/// final state.
pub(crate) fn backward_from_tape<T: Scalar>(
    tape: &ScanTape<T>,
    p: &ScanParams<T>,
    d_ys: &[T],
    d_h_end: &[T],
    grads: &mut ScanParams<T>,
) -> (Vec<T>, Vec<T>) {
    let d = tape.embed_dim;
    let n = tape.len();
    debug_assert_eq!(d_ys.len(), n * d);
    let mix = tape.use_prior.then(|| DecayMix::new(p));

    let mut d_input = vec![T::zero(); n * d];
    let mut dh = d_h_end.to_vec();
    let mut da = vec![T::zero(); d];
    let mut dza = vec![T::zero(); d];
    let mut dzb = vec![T::zero(); d];
    let mut d_mix = vec![T::zero(); d];
    let mut d_gamma = vec![T::zero(); d];

    for t in (0..n).rev() {
        let span = t * d..(t + 1) * d;
        let x = &tape.xs[span.clone()];
        let a = &tape.a[span.clone()];
        let b = &tape.b[span.clone()];
        let a_eff = &tape.a_eff[span.clone()];
        let h_prev = &tape.hs[t * d..(t + 1) * d];
        let h = &tape.hs[(t + 1) * d..(t + 2) * d];
        let gy = &d_ys[span.clone()];
        let dx = &mut d_input[span];

        // y_t = W_out h_t + U_out x_t
        outer_acc(grads.w_out.data_mut(), gy, h);
        outer_acc(grads.u_out.data_mut(), gy, x);
        matvec_t_acc(p.u_out.data(), gy, dx);
        matvec_t_acc(p.w_out.data(), gy, &mut dh);

        // h_t = Ã_t ⊙ h_{t−1} + B_t ⊙ x_t
        for c in 0..d {
            let d_aeff = dh[c] * h_prev[c];
            let d_b = dh[c] * x[c];
            dx[c] += dh[c] * b[c];
            da[c] = match &mix {
                Some(m) => {
                    d_mix[c] += d_aeff * (a[c] - m.gamma[c]);
                    d_gamma[c] += d_aeff * (T::one() - m.mix[c]);
                    d_aeff * m.mix[c]
                }
                None => d_aeff,
            };
            dza[c] = da[c] * a[c] * (T::one() - a[c]);
            dzb[c] = d_b * b[c] * (T::one() - b[c]);
            dh[c] *= a_eff[c];
        }

        // A_t = σ(W_a x + b_a), B_t = σ(W_b x + b_b)
        outer_acc(grads.w_a.data_mut(), &dza, x);
        outer_acc(grads.w_b.data_mut(), &dzb, x);
        for c in 0..d {
            grads.b_a.data_mut()[c] += dza[c];
            grads.b_b.data_mut()[c] += dzb[c];
        }
        matvec_t_acc(p.w_a.data(), &dza, dx);
        matvec_t_acc(p.w_b.data(), &dzb, dx);
    }

    if let Some(m) = &mix {
        // Chain through σ for the per-head mix logit and prior logit.
        for c in 0..d {
            let k = p.head_of(c);
            let s = m.mix[c];
            let g = m.gamma[c];
            grads.mix_w.data_mut()[k] += d_mix[c] * s * (T::one() - s);
            grads.gamma_prior_logits.data_mut()[k] += d_gamma[c] * g * (T::one() - g);
        }
    }
    (d_input, dh)
}

/// Exact gradients of `⟨d_ys, ys⟩ + ⟨d_h_end, h_end⟩` for a sequential scan.
pub fn scan_backward<T: Scalar>(
    xs: &[T],
    h0: &ScanState<T>,
    p: &ScanParams<T>,
    use_prior: bool,
    d_ys: &[T],
    d_h_end: &[T],
) -> Result<TapeGradients<T>> {
    if d_ys.len() != xs.len() {
        return Err(dim_err!(
            "upstream output gradient has {} scalars, sequence has {}",
            d_ys.len(),
            xs.len()
        ));
    }
    if d_h_end.len() != p.embed_dim() {
        return Err(dim_err!(
            "upstream state gradient has {} channels",
            d_h_end.len()
        ));
    }
    let (_, tape) = scan_sequential_taped(xs, h0, p, use_prior)?;
    let mut params = p.zeros_like();
    let (d_input, d_h0) = backward_from_tape(&tape, p, d_ys, d_h_end, &mut params);
    Ok(TapeGradients {
        params,
        d_input,
        d_h0,
        d_eta_cross: T::zero(),
    })
}

/// Accumulates gradients of a chunked scan into `grads`; returns
/// `(d_input in grid order, d_eta_cross)`.
pub(crate) fn chunked_backward_from_tape<T: Scalar>(
    tape: &ChunkedTape<T>,
    plan: &ChunkPlan,
    p: &ScanParams<T>,
    d_ys: &[T],
    grads: &mut ScanParams<T>,
) -> (Vec<T>, T) {
    let d = p.embed_dim();
    let eta = T::lit(plan.eta_cross());
    let mut d_input = vec![T::zero(); d_ys.len()];
    let mut carry = vec![T::zero(); d];
    let mut d_eta = T::zero();
    for (k, (chunk, ct)) in plan.chunks().iter().zip(&tape.chunks).enumerate().rev() {
        let gy = gather(d_ys, &chunk.tokens, d);
        let (dx, d_init) = backward_from_tape(ct, p, &gy, &carry, grads);
        scatter(&dx, &chunk.tokens, d, &mut d_input);
        if k == 0 {
            break;
        }
        if chunk.starts_row {
            // init_k = eta · end_{k−1}
            let prev = &tape.chunks[k - 1];
            let prev_end = &prev.hs[prev.hs.len() - d..];
            d_eta += dot(&d_init, prev_end);
            carry = d_init.iter().map(|&g| g * eta).collect();
        } else {
            carry = d_init;
        }
    }
    (d_input, d_eta)
}

/// Exact gradients of `⟨d_ys, scan_chunked(xs)⟩`.
pub fn scan_chunked_backward<T: Scalar>(
    xs: &[T],
    plan: &ChunkPlan,
    p: &ScanParams<T>,
    d_ys: &[T],
) -> Result<TapeGradients<T>> {
    if d_ys.len() != xs.len() {
        return Err(dim_err!(
            "upstream gradient has {} scalars, sequence has {}",
            d_ys.len(),
            xs.len()
        ));
    }
    let (_, tape) = scan_chunked_taped(xs, plan, p)?;
    let mut params = p.zeros_like();
    let (d_input, d_eta_cross) = chunked_backward_from_tape(&tape, plan, p, d_ys, &mut params);
    Ok(TapeGradients {
        params,
        d_input,
        d_h0: vec![T::zero(); p.embed_dim()],
        d_eta_cross,
    })
}
