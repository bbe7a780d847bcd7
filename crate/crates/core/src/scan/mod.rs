//! Selective state-space scans with a learnable geometric decay prior.
//!
//! A scan walks a sequence of `d_f`-wide tokens and keeps a diagonal state:
//!
//! ```text
//! A_t   = σ(W_a x_t + b_a)            B_t = σ(W_b x_t + b_b)
//! Ã_t   = σ(w_k) A_t + (1 − σ(w_k)) γ_k          (channel c in head k)
//! h_t   = Ã_t ⊙ h_{t−1} + B_t ⊙ x_t
//! y_t   = W_out h_t + U_out x_t
//! ```
//!
//! Sequences are flat slices of `len * d_f` scalars. The chunked variant
//! walks an `H × W` grid chunk by chunk (optionally in snake order), passing
//! the end state of each chunk to the next and scaling it by `eta_cross`
//! whenever the walk enters a new row.

mod backward;
mod params;
mod plan;

pub use backward::{scan_backward, scan_chunked_backward, TapeGradients};
pub use params::{
    load_scan, save_scan, ScanConfig, ScanParams, DEFAULT_GAMMA, DEFAULT_HEADS, INIT_DECAY_BIAS,
    SIDECAR,
};
pub use plan::{build_chunk_plan, chunk_len_for_total, chunk_len_per_row, Chunk, ChunkPlan};

pub(crate) use backward::{backward_from_tape, chunked_backward_from_tape};

use crate::error::{arg_err, dim_err, Result};
use crate::numerics::{matvec, sigmoid, Scalar};

/// Hidden state of a scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<T> {
    pub h: Vec<T>,
}

impl<T: Scalar> ScanState<T> {
    pub fn zeros(embed_dim: usize) -> Self {
        Self {
            h: vec![T::zero(); embed_dim],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanOutput<T> {
    pub ys: Vec<T>,
    pub h_end: ScanState<T>,
}

/// Decay and input gates for one token.
pub fn gates<T: Scalar>(x: &[T], p: &ScanParams<T>) -> (Vec<T>, Vec<T>) {
    let d = p.embed_dim();
    let mut a = vec![T::zero(); d];
    let mut b = vec![T::zero(); d];
    gates_into(x, p, &mut a, &mut b);
    (a, b)
}

#[inline]
fn gates_into<T: Scalar>(x: &[T], p: &ScanParams<T>, a: &mut [T], b: &mut [T]) {
    matvec(p.w_a.data(), x, a);
    for (v, &bias) in a.iter_mut().zip(p.b_a.data()) {
        *v = sigmoid(*v + bias);
    }
    matvec(p.w_b.data(), x, b);
    for (v, &bias) in b.iter_mut().zip(p.b_b.data()) {
        *v = sigmoid(*v + bias);
    }
}

/// Per-channel mixing weight `σ(w_k)` and prior `γ_k`.
#[derive(Clone, Debug)]
pub(crate) struct DecayMix<T> {
    pub mix: Vec<T>,
    pub gamma: Vec<T>,
}

impl<T: Scalar> DecayMix<T> {
    pub fn new(p: &ScanParams<T>) -> Self {
        let d = p.embed_dim();
        let gamma_head = p.gamma_prior();
        let mix = (0..d)
            .map(|c| sigmoid(p.mix_w.data()[p.head_of(c)]))
            .collect();
        let gamma = (0..d).map(|c| gamma_head[p.head_of(c)]).collect();
        Self { mix, gamma }
    }

    #[inline]
    fn apply(&self, a: &[T], out: &mut [T]) {
        for (((o, &av), &s), &g) in out.iter_mut().zip(a).zip(&self.mix).zip(&self.gamma) {
            *o = s * av + (T::one() - s) * g;
        }
    }
}

/// Blends the data-driven decay gate with the per-head prior.
pub fn effective_decay<T: Scalar>(a: &[T], p: &ScanParams<T>) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    DecayMix::new(p).apply(a, &mut out);
    out
}

/// Forward quantities a reverse pass over one sequential scan needs.
#[derive(Clone, Debug)]
pub struct ScanTape<T> {
    pub(crate) embed_dim: usize,
    pub(crate) use_prior: bool,
    pub(crate) xs: Vec<T>,
    pub(crate) a: Vec<T>,
    pub(crate) b: Vec<T>,
    pub(crate) a_eff: Vec<T>,
    /// `h_0 … h_T`, `(T + 1) * d_f` entries.
    pub(crate) hs: Vec<T>,
}

impl<T> ScanTape<T> {
    pub fn len(&self) -> usize {
        self.xs.len() / self.embed_dim
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }
}

fn check_seq<T: Scalar>(xs: &[T], h0: &ScanState<T>, p: &ScanParams<T>) -> Result<usize> {
    let d = p.embed_dim();
    if !xs.len().is_multiple_of(d) {
        return Err(dim_err!(
            "sequence buffer of {} scalars is not a multiple of d_f = {d}",
            xs.len()
        ));
    }
    if h0.h.len() != d {
        return Err(dim_err!(
            "initial state has {} channels, d_f = {d}",
            h0.h.len()
        ));
    }
    Ok(xs.len() / d)
}

/// Runs the recurrence left to right from `h0`.
///
/// With `use_prior = false` the raw decay gate is used (no geometric prior).
pub fn scan_sequential<T: Scalar>(
    xs: &[T],
    h0: &ScanState<T>,
    p: &ScanParams<T>,
    use_prior: bool,
) -> Result<ScanOutput<T>> {
    check_seq(xs, h0, p)?;
    let mix = use_prior.then(|| DecayMix::new(p));
    Ok(run_scan(xs, h0, p, mix.as_ref(), None))
}

/// Like [`scan_sequential`], additionally recording a tape for the reverse pass.
pub fn scan_sequential_taped<T: Scalar>(
    xs: &[T],
    h0: &ScanState<T>,
    p: &ScanParams<T>,
    use_prior: bool,
) -> Result<(ScanOutput<T>, ScanTape<T>)> {
    let n = check_seq(xs, h0, p)?;
    let d = p.embed_dim();
    let mix = use_prior.then(|| DecayMix::new(p));
    let mut tape = ScanTape {
        embed_dim: d,
        use_prior,
        xs: xs.to_vec(),
        a: Vec::with_capacity(n * d),
        b: Vec::with_capacity(n * d),
        a_eff: Vec::with_capacity(n * d),
        hs: Vec::with_capacity((n + 1) * d),
    };
    let out = run_scan(xs, h0, p, mix.as_ref(), Some(&mut tape));
    Ok((out, tape))
}

fn run_scan<T: Scalar>(
    xs: &[T],
    h0: &ScanState<T>,
    p: &ScanParams<T>,
    mix: Option<&DecayMix<T>>,
    mut tape: Option<&mut ScanTape<T>>,
) -> ScanOutput<T> {
    let d = p.embed_dim();
    let mut h = h0.h.clone();
    let mut a = vec![T::zero(); d];
    let mut b = vec![T::zero(); d];
    let mut a_eff = vec![T::zero(); d];
    let mut tmp = vec![T::zero(); d];
    let mut ys = vec![T::zero(); xs.len()];
    if let Some(t) = tape.as_deref_mut() {
        t.hs.extend_from_slice(&h);
    }
    for (x, y) in xs.chunks_exact(d).zip(ys.chunks_exact_mut(d)) {
        gates_into(x, p, &mut a, &mut b);
        match mix {
            Some(m) => m.apply(&a, &mut a_eff),
            None => a_eff.copy_from_slice(&a),
        }
        for c in 0..d {
            h[c] = a_eff[c] * h[c] + b[c] * x[c];
        }
        matvec(p.w_out.data(), &h, y);
        matvec(p.u_out.data(), x, &mut tmp);
        for (yv, &tv) in y.iter_mut().zip(&tmp) {
            *yv += tv;
        }
        if let Some(t) = tape.as_deref_mut() {
            t.a.extend_from_slice(&a);
            t.b.extend_from_slice(&b);
            t.a_eff.extend_from_slice(&a_eff);
            t.hs.extend_from_slice(&h);
        }
    }
    debug_assert!(ys.iter().all(|v| v.is_finite()), "non-finite scan output");
    ScanOutput {
        ys,
        h_end: ScanState { h },
    }
}

/// Tapes of every chunk of a chunked scan, in traversal order.
#[derive(Clone, Debug)]
pub struct ChunkedTape<T> {
    pub(crate) chunks: Vec<ScanTape<T>>,
}

fn check_grid<T: Scalar>(xs: &[T], plan: &ChunkPlan, p: &ScanParams<T>) -> Result<()> {
    let want = plan.positions() * p.embed_dim();
    if xs.len() != want {
        return Err(dim_err!(
            "grid sequence has {} scalars, plan {}x{} with d_f={} needs {want}",
            xs.len(),
            plan.height(),
            plan.width(),
            p.embed_dim()
        ));
    }
    Ok(())
}

fn gather<T: Scalar>(xs: &[T], tokens: &[usize], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        out.extend_from_slice(&xs[t * d..(t + 1) * d]);
    }
    out
}

fn scatter<T: Scalar>(src: &[T], tokens: &[usize], d: usize, dst: &mut [T]) {
    for (chunk, &t) in src.chunks_exact(d).zip(tokens) {
        dst[t * d..(t + 1) * d].copy_from_slice(chunk);
    }
}

/// Chunk-wise scan over a grid-ordered sequence; outputs are in grid order.
///
/// The first chunk starts from the zero state. Each later chunk starts from
/// the previous chunk's end state, scaled by `eta_cross` when it opens a row.
/// The decay prior is always active.
pub fn scan_chunked<T: Scalar>(xs: &[T], plan: &ChunkPlan, p: &ScanParams<T>) -> Result<Vec<T>> {
    check_grid(xs, plan, p)?;
    Ok(run_chunked(xs, plan, p, None))
}

pub fn scan_chunked_taped<T: Scalar>(
    xs: &[T],
    plan: &ChunkPlan,
    p: &ScanParams<T>,
) -> Result<(Vec<T>, ChunkedTape<T>)> {
    check_grid(xs, plan, p)?;
    let mut tape = ChunkedTape {
        chunks: Vec::with_capacity(plan.chunks().len()),
    };
    let ys = run_chunked(xs, plan, p, Some(&mut tape));
    Ok((ys, tape))
}

fn run_chunked<T: Scalar>(
    xs: &[T],
    plan: &ChunkPlan,
    p: &ScanParams<T>,
    mut tape: Option<&mut ChunkedTape<T>>,
) -> Vec<T> {
    let d = p.embed_dim();
    let mix = DecayMix::new(p);
    let eta = T::lit(plan.eta_cross());
    let mut ys = vec![T::zero(); xs.len()];
    let mut state = ScanState::zeros(d);
    for (k, chunk) in plan.chunks().iter().enumerate() {
        if k > 0 && chunk.starts_row {
            state.h.iter_mut().for_each(|v| *v *= eta);
        }
        let seq = gather(xs, &chunk.tokens, d);
        let out = match tape.as_deref_mut() {
            Some(t) => {
                let mut ct = ScanTape {
                    embed_dim: d,
                    use_prior: true,
                    xs: seq.clone(),
                    a: Vec::with_capacity(seq.len()),
                    b: Vec::with_capacity(seq.len()),
                    a_eff: Vec::with_capacity(seq.len()),
                    hs: Vec::with_capacity(seq.len() + d),
                };
                let out = run_scan(&seq, &state, p, Some(&mix), Some(&mut ct));
                t.chunks.push(ct);
                out
            }
            None => run_scan(&seq, &state, p, Some(&mix), None),
        };
        scatter(&out.ys, &chunk.tokens, d, &mut ys);
        state = out.h_end;
    }
    ys
}

/// Diagonal of `∂h_t / ∂h_{t−d}`: the running product of the effective
/// decay over tokens `t−d+1 ..= t` (1-based positions).
pub fn influence<T: Scalar>(xs: &[T], p: &ScanParams<T>, t: usize, d: usize) -> Result<Vec<T>> {
    let df = p.embed_dim();
    if !xs.len().is_multiple_of(df) {
        return Err(dim_err!("sequence is not a multiple of d_f = {df}"));
    }
    let n = xs.len() / df;
    if t > n || d == 0 || d >= t {
        return Err(arg_err!(
            "influence needs 1 <= d <= t-1 and t <= {n}, got t={t}, d={d}"
        ));
    }
    let mix = DecayMix::new(p);
    let mut prod = vec![T::one(); df];
    let mut a = vec![T::zero(); df];
    let mut b = vec![T::zero(); df];
    let mut a_eff = vec![T::zero(); df];
    for x in xs[(t - d) * df..t * df].chunks_exact(df) {
        gates_into(x, p, &mut a, &mut b);
        mix.apply(&a, &mut a_eff);
        for (pv, &av) in prod.iter_mut().zip(&a_eff) {
            *pv *= av;
        }
    }
    Ok(prod)
}

#[cfg(test)]
mod tests;
