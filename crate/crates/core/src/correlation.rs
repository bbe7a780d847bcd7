//! Cosine correlation between visual tokens and class text embeddings, and
//! its lift into per-(position, class) embedding vectors.

use std::collections::HashSet;

use crate::error::{dim_err, Error, Result};
use crate::numerics::{l2_normalize_rows, matmul, Bundle, Rng, Scalar, Tensor};

/// Floor used when normalizing feature rows.
pub const NORM_EPS: f64 = 1e-8;

/// Default correlation embedding width.
pub const DEFAULT_EMBED_DIM: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid<T> {
    height: usize,
    width: usize,
    values: Tensor<T>,
}

impl<T: Scalar> FeatureGrid<T> {
    /// `values` is `HW × d` in row-major grid order.
    pub fn new(height: usize, width: usize, values: Tensor<T>) -> Result<Self> {
        let (rows, _) = values.shape2()?;
        if rows != height * width {
            return Err(dim_err!(
                "feature grid has {rows} rows, expected {height}x{width}"
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn feature(&self, pos: usize) -> &[T] {
        self.values.row(pos)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureGrid<U> {
        FeatureGrid {
            height: self.height,
            width: self.width,
            values: self.values.cast(),
        }
    }

    /// Sub-grid `rows × cols` starting at token `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, rows: usize, cols: usize) -> Result<Self> {
        if top + rows > self.height || left + cols > self.width || rows == 0 || cols == 0 {
            return Err(dim_err!(
                "crop {rows}x{cols}@({top},{left}) outside {}x{} grid",
                self.height,
                self.width
            ));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(rows * cols * d);
        for r in top..top + rows {
            for c in left..left + cols {
                data.extend_from_slice(self.feature(r * self.width + c));
            }
        }
        Self::new(rows, cols, Tensor::new(&[rows * cols, d], data)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings<T> {
    values: Tensor<T>,
    class_names: Vec<String>,
}

impl<T: Scalar> TextEmbeddings<T> {
    pub fn new(values: Tensor<T>, class_names: Vec<String>) -> Result<Self> {
        let (n, _) = values.shape2()?;
        if class_names.len() != n {
            return Err(dim_err!(
                "{} class names for {n} text embeddings",
                class_names.len()
            ));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = class_names.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Argument(format!("duplicate class name `{dup}`")));
        }
        Ok(Self {
            values,
            class_names,
        })
    }

    /// Embeddings with generated names `class_0`, `class_1`, ...
    pub fn unnamed(values: Tensor<T>) -> Result<Self> {
        let n = values.shape2()?.0;
        Self::new(values, (0..n).map(|i| format!("class_{i}")).collect())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn cast<U: Scalar>(&self) -> TextEmbeddings<U> {
        TextEmbeddings {
            values: self.values.cast(),
            class_names: self.class_names.clone(),
        }
    }

    /// Reorders classes so that new class `j` is old class `order[j]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.num_classes();
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(Error::Argument(format!(
                "{order:?} is not a permutation of 0..{n}"
            )));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        for &o in order {
            data.extend_from_slice(self.values.row(o));
        }
        Self::new(
            Tensor::new(&[n, d], data)?,
            order.iter().map(|&o| self.class_names[o].clone()).collect(),
        )
    }
}

/// `HW × N_C` map of cosine similarities.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Tensor<T>,
}

impl<T: Scalar> CorrelationMap<T> {
    pub fn num_classes(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Per-position argmax, ties to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        crate::infer::argmax_rows(self.values.data(), self.num_classes())
    }
}

/// `HW × N_C × d_f` volume of correlation embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationVolume<T> {
    pub height: usize,
    pub width: usize,
    pub values: Tensor<T>,
}

impl<T: Scalar> CorrelationVolume<T> {
    pub fn new(height: usize, width: usize, values: Tensor<T>) -> Result<Self> {
        match values.dims() {
            [hw, _, _] if *hw == height * width => Ok(Self {
                height,
                width,
                values,
            }),
            dims => Err(dim_err!(
                "volume dims {dims:?} do not match a {height}x{width} grid"
            )),
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn num_classes(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.values.dims()[2]
    }

    pub fn data(&self) -> &[T] {
        self.values.data()
    }

    /// Embedding of class `class` at position `pos`.
    pub fn at(&self, pos: usize, class: usize) -> &[T] {
        let df = self.embed_dim();
        let off = (pos * self.num_classes() + class) * df;
        &self.values.data()[off..off + df]
    }

    /// Copies class `class` out as a `HW × d_f` sequence in grid order.
    pub fn class_slice(&self, class: usize) -> Vec<T> {
        let df = self.embed_dim();
        let mut out = Vec::with_capacity(self.positions() * df);
        for pos in 0..self.positions() {
            out.extend_from_slice(self.at(pos, class));
        }
        out
    }
}

/// Learnable `d_f × N_C` projection; column `j` is the embedding direction
/// of class `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftParams<T> {
    pub proj: Tensor<T>,
}

impl<T: Scalar> LiftParams<T> {
    /// Entries uniform in `±1/√d_f`.
    pub fn init(embed_dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (embed_dim as f64).sqrt();
        Self {
            proj: rng.uniform_tensor(&[embed_dim, num_classes], -bound, bound),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.proj.dims()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.proj.dims()[1]
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        b.insert("proj", &self.proj);
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let proj = b.tensor("proj")?;
        proj.shape2()?;
        Ok(Self { proj })
    }
}

pub fn initial_correlation<T: Scalar>(
    fv: &FeatureGrid<T>,
    ft: &TextEmbeddings<T>,
) -> Result<CorrelationMap<T>> {
    if fv.dim() != ft.dim() {
        return Err(dim_err!(
            "visual feature dim {} != text embedding dim {}",
            fv.dim(),
            ft.dim()
        ));
    }
    let eps = T::lit(NORM_EPS);
    let v = l2_normalize_rows(fv.values(), eps)?;
    let t = l2_normalize_rows(ft.values(), eps)?;
    let values = matmul(&v, &t.transpose()?)?;
    Ok(CorrelationMap {
        height: fv.height(),
        width: fv.width(),
        values,
    })
}

/// `E[i, j, k] = C[i, j] · P[k, j]`.
pub fn lift<T: Scalar>(c: &CorrelationMap<T>, p: &LiftParams<T>) -> Result<CorrelationVolume<T>> {
    let nc = c.num_classes();
    if p.num_classes() != nc {
        return Err(dim_err!(
            "lift projection has {} columns, correlation map has {nc} classes",
            p.num_classes()
        ));
    }
    let df = p.embed_dim();
    let hw = c.positions();
    let proj = p.proj.data();
    let mut out = Vec::with_capacity(hw * nc * df);
    for &cij in c.values.data() {
        // `out` grows in (i, j) order, so the class index is recoverable here.
        let j = (out.len() / df) % nc;
        out.extend((0..df).map(|k| cij * proj[k * nc + j]));
    }
    CorrelationVolume::new(c.height, c.width, Tensor::from_parts(vec![hw, nc, df], out))
}

/// Gradient of a scalar loss w.r.t. the lift projection given its gradient
/// w.r.t. the lifted volume.
pub(crate) fn lift_backward<T: Scalar>(c: &CorrelationMap<T>, grad: &[T], df: usize) -> Vec<T> {
    let nc = c.num_classes();
    let mut dproj = vec![T::zero(); df * nc];
    for (ij, &cij) in c.values.data().iter().enumerate() {
        let j = ij % nc;
        let g = &grad[ij * df..(ij + 1) * df];
        for (k, &gv) in g.iter().enumerate() {
            dproj[k * nc + j] += gv * cij;
        }
    }
    dproj
}

/// Entry names of a feature bundle.
pub const VISUAL_FEATURES: &str = "visual_features";
pub const TEXT_EMBEDDINGS: &str = "text_embeddings";
pub const CLASS_NAMES: &str = "class_names";
pub const DOMAIN_TEXTS: &str = "domain_text_embeddings";

/// Precomputed encoder outputs for one image. The grid extents and class
/// names travel as manifest metadata (`height`, `width`, `class_names`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    pub visual: FeatureGrid<T>,
    pub text: TextEmbeddings<T>,
    /// `D × d`, absent when the bundle carries no domain prompts.
    pub domain_texts: Option<Tensor<T>>,
}

impl<T: Scalar> FeatureBundle<T> {
    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let height = b.meta_usize("height")?;
        let width = b.meta_usize("width")?;
        let names: Vec<String> = serde_json::from_value(b.meta_value(CLASS_NAMES)?.clone())
            .map_err(|e| Error::Format(format!("`{CLASS_NAMES}` is not a string array: {e}")))?;
        let visual = FeatureGrid::new(height, width, b.tensor(VISUAL_FEATURES)?)
            .map_err(|e| dim_err!("`{VISUAL_FEATURES}`: {e}"))?;
        let text = TextEmbeddings::new(b.tensor(TEXT_EMBEDDINGS)?, names)
            .map_err(|e| dim_err!("`{TEXT_EMBEDDINGS}`: {e}"))?;
        if visual.dim() != text.dim() {
            return Err(dim_err!(
                "`{VISUAL_FEATURES}` has d={} but `{TEXT_EMBEDDINGS}` has d={}",
                visual.dim(),
                text.dim()
            ));
        }
        let domain_texts = match b.tensor_opt::<T>(DOMAIN_TEXTS) {
            Some(t) if t.shape2().ok().map(|(_, d)| d) != Some(visual.dim()) => {
                return Err(dim_err!(
                    "`{DOMAIN_TEXTS}` {:?} does not match d={}",
                    t.dims(),
                    visual.dim()
                ))
            }
            other => other,
        };
        Ok(Self {
            visual,
            text,
            domain_texts,
        })
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        b.insert(VISUAL_FEATURES, self.visual.values());
        b.insert(TEXT_EMBEDDINGS, self.text.values());
        if let Some(d) = &self.domain_texts {
            b.insert(DOMAIN_TEXTS, d);
        }
        b.set_meta("height", self.visual.height());
        b.set_meta("width", self.visual.width());
        b.set_meta(CLASS_NAMES, serde_json::json!(self.text.class_names()));
        b
    }
}
