//! Attention-based aggregation used as the comparison arm: windowed spatial
//! cross-attention applied per class, and full attention across classes at
//! every position. Single head, scores scaled by `1/√d_f`.

use rayon::prelude::*;

use crate::correlation::CorrelationVolume;
use crate::error::{dim_err, Result};
use crate::numerics::{dot, matvec, Bundle, Rng, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    pub spatial_wq: Tensor<T>,
    pub spatial_wk: Tensor<T>,
    pub spatial_wv: Tensor<T>,
    pub class_wq: Tensor<T>,
    pub class_wk: Tensor<T>,
    pub class_wv: Tensor<T>,
    /// Radius `r` of the `(2r+1)²` spatial window.
    pub window: usize,
}

const NAMES: [&str; 6] = [
    "spatial_wq",
    "spatial_wk",
    "spatial_wv",
    "class_wq",
    "class_wk",
    "class_wv",
];

impl<T: Scalar> AttnParams<T> {
    /// Entries uniform in `±1/√d_f`.
    pub fn init(embed_dim: usize, window: usize, rng: &mut Rng) -> Self {
        let b = 1.0 / (embed_dim as f64).sqrt();
        let dims = [embed_dim, embed_dim];
        let mut m = || rng.uniform_tensor(&dims, -b, b);
        Self {
            spatial_wq: m(),
            spatial_wk: m(),
            spatial_wv: m(),
            class_wq: m(),
            class_wk: m(),
            class_wv: m(),
            window,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.spatial_wq.dims()[0]
    }

    fn matrices(&self) -> [&Tensor<T>; 6] {
        [
            &self.spatial_wq,
            &self.spatial_wk,
            &self.spatial_wv,
            &self.class_wq,
            &self.class_wk,
            &self.class_wv,
        ]
    }

    fn check(&self, e: &CorrelationVolume<T>) -> Result<()> {
        let df = e.embed_dim();
        if let Some(m) = self.matrices().iter().find(|m| m.dims() != [df, df]) {
            return Err(dim_err!(
                "attention matrix {:?} does not match d_f={df}",
                m.dims()
            ));
        }
        Ok(())
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        for (n, t) in NAMES.iter().zip(self.matrices()) {
            b.insert(n, t);
        }
        b.set_meta("window", self.window);
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        Ok(Self {
            spatial_wq: b.tensor(NAMES[0])?,
            spatial_wk: b.tensor(NAMES[1])?,
            spatial_wv: b.tensor(NAMES[2])?,
            class_wq: b.tensor(NAMES[3])?,
            class_wk: b.tensor(NAMES[4])?,
            class_wv: b.tensor(NAMES[5])?,
            window: b.meta_usize("window")?,
        })
    }
}

/// Softmax of `q · k_n / √d` over the given keys.
pub fn attention_weights<T: Scalar>(q: &[T], keys: &[&[T]]) -> Vec<T> {
    let scale = T::one() / T::lit(q.len() as f64).sqrt();
    let mut w: Vec<T> = keys.iter().map(|k| dot(q, k) * scale).collect();
    softmax(&mut w);
    w
}

/// Numerically stable softmax over `w`, in place.
pub fn softmax<T: Scalar>(w: &mut [T]) {
    let m = w.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in w.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    w.iter_mut().for_each(|v| *v = *v / z);
}

/// Applies `w` to every `d`-wide token of `xs`.
fn project<T: Scalar>(w: &Tensor<T>, xs: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); xs.len()];
    for (x, o) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        matvec(w.data(), x, o);
    }
    out
}

/// Positions in the square window of radius `r` around `pos`, clipped to
/// the grid, in row-major order.
pub fn window_positions(height: usize, width: usize, pos: usize, r: usize) -> Vec<usize> {
    let (row, col) = (pos / width, pos % width);
    let rows = row.saturating_sub(r)..(row + r + 1).min(height);
    rows.flat_map(|y| {
        let cols = col.saturating_sub(r)..(col + r + 1).min(width);
        cols.map(move |x| y * width + x)
    })
    .collect()
}

/// Spatial attention weights of class `class` at query `pos`, paired with
/// the key positions.
pub fn spatial_attention_weights<T: Scalar>(
    e: &CorrelationVolume<T>,
    p: &AttnParams<T>,
    class: usize,
    pos: usize,
) -> Result<Vec<(usize, T)>> {
    p.check(e)?;
    let df = e.embed_dim();
    let seq = e.class_slice(class);
    let keys = project(&p.spatial_wk, &seq, df);
    let mut q = vec![T::zero(); df];
    matvec(p.spatial_wq.data(), e.at(pos, class), &mut q);
    let nbrs = window_positions(e.height, e.width, pos, p.window);
    let refs: Vec<&[T]> = nbrs.iter().map(|&n| &keys[n * df..(n + 1) * df]).collect();
    Ok(nbrs.into_iter().zip(attention_weights(&q, &refs)).collect())
}

/// Windowed cross-attention over the grid, independently per class with
/// shared weights.
pub fn spatial_attention<T: Scalar>(
    e: &CorrelationVolume<T>,
    p: &AttnParams<T>,
) -> Result<CorrelationVolume<T>> {
    p.check(e)?;
    let (nc, df, hw) = (e.num_classes(), e.embed_dim(), e.positions());
    let per_class: Vec<Vec<T>> = (0..nc)
        .into_par_iter()
        .map(|j| {
            let seq = e.class_slice(j);
            let q = project(&p.spatial_wq, &seq, df);
            let k = project(&p.spatial_wk, &seq, df);
            let v = project(&p.spatial_wv, &seq, df);
            let mut out = vec![T::zero(); hw * df];
            for i in 0..hw {
                let nbrs = window_positions(e.height, e.width, i, p.window);
                let refs: Vec<&[T]> = nbrs.iter().map(|&n| &k[n * df..(n + 1) * df]).collect();
                let w = attention_weights(&q[i * df..(i + 1) * df], &refs);
                let o = &mut out[i * df..(i + 1) * df];
                for (&n, &wn) in nbrs.iter().zip(&w) {
                    for (ov, &vv) in o.iter_mut().zip(&v[n * df..(n + 1) * df]) {
                        *ov += wn * vv;
                    }
                }
            }
            out
        })
        .collect();
    let mut data = vec![T::zero(); hw * nc * df];
    for (j, out) in per_class.iter().enumerate() {
        for i in 0..hw {
            let off = (i * nc + j) * df;
            data[off..off + df].copy_from_slice(&out[i * df..(i + 1) * df]);
        }
    }
    CorrelationVolume::new(e.height, e.width, Tensor::new(e.values.dims(), data)?)
}

/// `N_C × N_C` class attention weights at `pos`; row `a` holds the weights
/// of query class `a`.
pub fn class_attention_weights<T: Scalar>(
    e: &CorrelationVolume<T>,
    p: &AttnParams<T>,
    pos: usize,
) -> Result<Tensor<T>> {
    p.check(e)?;
    let (nc, df) = (e.num_classes(), e.embed_dim());
    let block = &e.data()[pos * nc * df..(pos + 1) * nc * df];
    let q = project(&p.class_wq, block, df);
    let k = project(&p.class_wk, block, df);
    let refs: Vec<&[T]> = k.chunks_exact(df).collect();
    let w = q
        .chunks_exact(df)
        .flat_map(|qa| attention_weights(qa, &refs))
        .collect();
    Tensor::new(&[nc, nc], w)
}

/// Full attention among the `N_C` class tokens at every position.
pub fn class_attention<T: Scalar>(
    e: &CorrelationVolume<T>,
    p: &AttnParams<T>,
) -> Result<CorrelationVolume<T>> {
    p.check(e)?;
    let (nc, df) = (e.num_classes(), e.embed_dim());
    let scale = T::one() / T::lit(df as f64).sqrt();
    let mut data = vec![T::zero(); e.data().len()];
    data.par_chunks_exact_mut(nc * df)
        .zip(e.data().par_chunks_exact(nc * df))
        .for_each(|(out, block)| {
            let q = project(&p.class_wq, block, df);
            let k = project(&p.class_wk, block, df);
            let v = project(&p.class_wv, block, df);
            let mut w = vec![T::zero(); nc];
            for (qa, oa) in q.chunks_exact(df).zip(out.chunks_exact_mut(df)) {
                for (wb, kb) in w.iter_mut().zip(k.chunks_exact(df)) {
                    *wb = dot(qa, kb) * scale;
                }
                softmax(&mut w);
                for (&wb, vb) in w.iter().zip(v.chunks_exact(df)) {
                    for (o, &vv) in oa.iter_mut().zip(vb) {
                        *o += wb * vv;
                    }
                }
            }
        });
    CorrelationVolume::new(e.height, e.width, Tensor::new(e.values.dims(), data)?)
}
