use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlation::LiftParams;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::{Bundle, Rng, Scalar, Tensor};
use crate::optim::{prefixed, ParamSet};
use crate::scan::{
    build_chunk_plan, chunk_len_for_total, chunk_len_per_row, ChunkPlan, ScanParams, DEFAULT_HEADS,
};

/// Linear maps from a feature vector to a `[γ; β]` pair of `2·d_f` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationParams<T> {
    pub img_proj: Tensor<T>,
    pub txt_proj: Tensor<T>,
}

impl<T: Scalar> ModulationParams<T> {
    /// Entries uniform in `±0.1/√d`, a mild start close to the identity.
    pub fn init(embed_dim: usize, feature_dim: usize, rng: &mut Rng) -> Self {
        let bound = 0.1 / (feature_dim as f64).sqrt();
        let dims = [2 * embed_dim, feature_dim];
        Self {
            img_proj: rng.uniform_tensor(&dims, -bound, bound),
            txt_proj: rng.uniform_tensor(&dims, -bound, bound),
        }
    }

    /// Identity modulation (`γ = β = 0`).
    pub fn zeros(embed_dim: usize, feature_dim: usize) -> Result<Self> {
        let dims = [2 * embed_dim, feature_dim];
        Ok(Self {
            img_proj: Tensor::zeros(&dims)?,
            txt_proj: Tensor::zeros(&dims)?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.img_proj.dims()[0] / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.img_proj.dims()[1]
    }

    pub fn cast<U: Scalar>(&self) -> ModulationParams<U> {
        ModulationParams {
            img_proj: self.img_proj.cast(),
            txt_proj: self.txt_proj.cast(),
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.img_proj.dims();
        if d.len() != 2 || !d[0].is_multiple_of(2) || self.txt_proj.dims() != d {
            return Err(dim_err!(
                "modulation projections {:?} and {:?} must both be 2·d_f x d",
                d,
                self.txt_proj.dims()
            ));
        }
        Ok(())
    }
}

impl<T: Scalar> ParamSet<T> for ModulationParams<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("img_proj".into(), &self.img_proj),
            ("txt_proj".into(), &self.txt_proj),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("img_proj".into(), &mut self.img_proj),
            ("txt_proj".into(), &mut self.txt_proj),
        ]
    }
}

/// Precomputed domain-prompt embeddings, `D × d` with `D ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainTexts<T> {
    values: Tensor<T>,
}

impl<T: Scalar> DomainTexts<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        values.shape2()?;
        Ok(Self { values })
    }

    /// A single zero prompt, which makes text modulation the identity.
    pub fn neutral(dim: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[1, dim])?)
    }

    pub fn count(&self) -> usize {
        self.values.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.dims()[1]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn cast<U: Scalar>(&self) -> DomainTexts<U> {
        DomainTexts {
            values: self.values.cast(),
        }
    }
}

/// Sizes that fix every parameter shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineDims {
    /// Feature dimension `d` of visual, text and domain embeddings.
    pub feature_dim: usize,
    /// Correlation embedding width `d_f`.
    pub embed_dim: usize,
    pub num_classes: usize,
    #[serde(rename = "K")]
    pub heads: usize,
}

impl PipelineDims {
    pub fn new(feature_dim: usize, embed_dim: usize, num_classes: usize) -> Self {
        Self {
            feature_dim,
            embed_dim,
            num_classes,
            heads: DEFAULT_HEADS,
        }
    }

    pub fn with_heads(self, heads: usize) -> Self {
        Self { heads, ..self }
    }
}

/// Every learnable tensor of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineParams<T> {
    pub lift: LiftParams<T>,
    pub modulation: ModulationParams<T>,
    pub spatial_scan: ScanParams<T>,
    pub class_scan: ScanParams<T>,
    /// `1 × d_f`.
    pub decoder_w: Tensor<T>,
    /// `[1]`.
    pub decoder_b: Tensor<T>,
}

impl<T: Scalar> PipelineParams<T> {
    /// Each part draws from its own stream of `rng`.
    pub fn init(dims: PipelineDims, rng: &Rng) -> Result<Self> {
        let df = dims.embed_dim;
        let bound = 1.0 / (df as f64).sqrt();
        let p = Self {
            lift: LiftParams::init(df, dims.num_classes, &mut rng.split(1)),
            modulation: ModulationParams::init(df, dims.feature_dim, &mut rng.split(2)),
            spatial_scan: ScanParams::init(df, dims.heads, &mut rng.split(3))?,
            class_scan: ScanParams::init(df, dims.heads, &mut rng.split(4))?,
            decoder_w: rng.split(5).uniform_tensor(&[1, df], -bound, bound),
            decoder_b: Tensor::zeros(&[1])?,
        };
        p.check(dims.feature_dim, dims.num_classes)?;
        Ok(p)
    }

    /// Settings under which the pipeline reduces to `logits = C`: all-ones
    /// lift, zero modulation, pass-through scans, decoder reading channel 0.
    pub fn identity(dims: PipelineDims) -> Result<Self> {
        let df = dims.embed_dim;
        let mut w = vec![T::zero(); df];
        w[0] = T::one();
        Ok(Self {
            lift: LiftParams {
                proj: Tensor::ones(&[df, dims.num_classes])?,
            },
            modulation: ModulationParams::zeros(df, dims.feature_dim)?,
            spatial_scan: ScanParams::pass_through(df, dims.heads)?,
            class_scan: ScanParams::pass_through(df, dims.heads)?,
            decoder_w: Tensor::new(&[1, df], w)?,
            decoder_b: Tensor::zeros(&[1])?,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.lift.embed_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.lift.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.modulation.feature_dim()
    }

    pub fn dims(&self) -> PipelineDims {
        PipelineDims {
            feature_dim: self.feature_dim(),
            embed_dim: self.embed_dim(),
            num_classes: self.num_classes(),
            heads: self.spatial_scan.heads(),
        }
    }

    /// Checks internal consistency and agreement with the input sizes.
    pub fn check(&self, feature_dim: usize, num_classes: usize) -> Result<()> {
        self.modulation.validate()?;
        self.spatial_scan.validate()?;
        self.class_scan.validate()?;
        let df = self.embed_dim();
        let widths = [
            ("mod", self.modulation.embed_dim()),
            ("spatial_scan", self.spatial_scan.embed_dim()),
            ("class_scan", self.class_scan.embed_dim()),
            ("decoder_w", self.decoder_w.len()),
        ];
        if let Some((name, w)) = widths.iter().find(|(_, w)| *w != df) {
            return Err(dim_err!("{name} has d_f={w}, lift has d_f={df}"));
        }
        if self.decoder_b.len() != 1 {
            return Err(dim_err!("decoder_b must hold one scalar"));
        }
        if self.num_classes() != num_classes {
            return Err(dim_err!(
                "lift projection covers {} classes, input has {num_classes}",
                self.num_classes()
            ));
        }
        if self.feature_dim() != feature_dim {
            return Err(dim_err!(
                "modulation expects d={}, features have d={feature_dim}",
                self.feature_dim()
            ));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
        z
    }

    pub fn cast<U: Scalar>(&self) -> PipelineParams<U> {
        PipelineParams {
            lift: LiftParams {
                proj: self.lift.proj.cast(),
            },
            modulation: self.modulation.cast(),
            spatial_scan: self.spatial_scan.cast(),
            class_scan: self.class_scan.cast(),
            decoder_w: self.decoder_w.cast(),
            decoder_b: self.decoder_b.cast(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for PipelineParams<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![("lift.proj".to_string(), &self.lift.proj)];
        v.extend(prefixed("mod", self.modulation.tensors()));
        v.extend(prefixed("spatial_scan", self.spatial_scan.tensors()));
        v.extend(prefixed("class_scan", self.class_scan.tensors()));
        v.push(("decoder_w".into(), &self.decoder_w));
        v.push(("decoder_b".into(), &self.decoder_b));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = vec![("lift.proj".to_string(), &mut self.lift.proj)];
        v.extend(prefixed("mod", self.modulation.tensors_mut()));
        v.extend(prefixed("spatial_scan", self.spatial_scan.tensors_mut()));
        v.extend(prefixed("class_scan", self.class_scan.tensors_mut()));
        v.push(("decoder_w".into(), &mut self.decoder_w));
        v.push(("decoder_b".into(), &mut self.decoder_b));
        v
    }
}

/// How the chunk length of the spatial scan is chosen for a grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chunking {
    /// Fixed chunk length `L`.
    Len(usize),
    /// `n` chunks over the whole grid: `L = HW / n`.
    Total(usize),
    /// `n` chunks in every row: `L = W / n`.
    PerRow(usize),
}

impl Chunking {
    /// Requested chunk length before clamping to a divisor of the width.
    pub fn resolve(&self, height: usize, width: usize) -> Result<usize> {
        match *self {
            Chunking::Len(l) if l > 0 => Ok(l),
            Chunking::Len(_) => Err(arg_err!("chunk length must be at least 1")),
            Chunking::Total(n) => chunk_len_for_total(height, width, n),
            Chunking::PerRow(n) => chunk_len_per_row(width, n),
        }
    }
}

/// Non-learnable pipeline settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub blocks: usize,
    pub chunking: Chunking,
    pub eta_cross: f64,
    pub snake: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            chunking: Chunking::Total(16),
            eta_cross: 1.0,
            snake: true,
        }
    }
}

impl PipelineConfig {
    pub fn plan(&self, height: usize, width: usize) -> Result<ChunkPlan> {
        if self.blocks == 0 {
            return Err(arg_err!("at least one spatial block is required"));
        }
        let l = self.chunking.resolve(height, width)?;
        build_chunk_plan(height, width, l, self.eta_cross, self.snake)
    }
}

/// JSON sidecar of a saved pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineFile {
    #[serde(flatten)]
    pub dims: PipelineDims,
    #[serde(flatten)]
    pub config: PipelineConfig,
    pub seed: u64,
}

pub const PIPELINE_SIDECAR: &str = "pipeline.json";

const PARTS: [&str; 4] = ["lift", "mod", "spatial_scan", "class_scan"];

/// Writes one sub-bundle per part plus a `decoder` bundle and the sidecar.
pub fn save_pipeline<T: Scalar>(
    dir: impl AsRef<Path>,
    p: &PipelineParams<T>,
    config: &PipelineConfig,
    seed: u64,
) -> Result<()> {
    let dir = dir.as_ref();
    let mut modulation = Bundle::new();
    for (n, t) in p.modulation.tensors() {
        modulation.insert(&n, t);
    }
    let bundles = [
        p.lift.to_bundle(),
        modulation,
        p.spatial_scan.to_bundle(),
        p.class_scan.to_bundle(),
    ];
    for (name, b) in PARTS.iter().zip(bundles) {
        b.write(dir.join(name))?;
    }
    let mut decoder = Bundle::new();
    decoder.insert("w", &p.decoder_w);
    decoder.insert("b", &p.decoder_b);
    decoder.write(dir.join("decoder"))?;
    let file = PipelineFile {
        dims: p.dims(),
        config: config.clone(),
        seed,
    };
    let mut json = serde_json::to_vec_pretty(&file)?;
    json.push(b'\n');
    fs::write(dir.join(PIPELINE_SIDECAR), json)?;
    Ok(())
}

pub fn load_pipeline<T: Scalar>(
    dir: impl AsRef<Path>,
) -> Result<(PipelineParams<T>, PipelineFile)> {
    let dir = dir.as_ref();
    let side = dir.join(PIPELINE_SIDECAR);
    let raw = fs::read(&side).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    let file: PipelineFile = serde_json::from_slice(&raw)?;
    let modulation = Bundle::read(dir.join("mod"))?;
    let decoder = Bundle::read(dir.join("decoder"))?;
    let p = PipelineParams {
        lift: LiftParams::from_bundle(&Bundle::read(dir.join("lift"))?)?,
        modulation: ModulationParams {
            img_proj: modulation.tensor("img_proj")?,
            txt_proj: modulation.tensor("txt_proj")?,
        },
        spatial_scan: ScanParams::from_bundle(&Bundle::read(dir.join("spatial_scan"))?)?,
        class_scan: ScanParams::from_bundle(&Bundle::read(dir.join("class_scan"))?)?,
        decoder_w: decoder.tensor("w")?,
        decoder_b: decoder.tensor("b")?,
    };
    p.check(file.dims.feature_dim, file.dims.num_classes)?;
    if p.dims() != file.dims {
        return Err(dim_err!(
            "{} declares {:?}, tensors have {:?}",
            side.display(),
            file.dims,
            p.dims()
        ));
    }
    Ok((p, file))
}
