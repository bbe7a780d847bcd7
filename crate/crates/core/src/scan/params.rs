use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::{sigmoid, Bundle, Rng, Scalar, Tensor};
use crate::optim::ParamSet;

pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_GAMMA: f64 = 0.8;
/// Initial decay-gate bias; positive values start the scan in a remembering regime.
pub const INIT_DECAY_BIAS: f64 = 1.0;

/// Learnable quantities of one selective scan.
///
/// The decay prior is stored as logits so optimizer steps keep it inside
/// `(0, 1)`. Channel `c` belongs to head `c * heads / d_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanParams<T> {
    pub w_a: Tensor<T>,
    pub b_a: Tensor<T>,
    pub w_b: Tensor<T>,
    pub b_b: Tensor<T>,
    pub w_out: Tensor<T>,
    pub u_out: Tensor<T>,
    pub gamma_prior_logits: Tensor<T>,
    pub mix_w: Tensor<T>,
}

pub(crate) const ENTRY_NAMES: [&str; 8] = [
    "w_a",
    "b_a",
    "w_b",
    "b_b",
    "w_out",
    "u_out",
    "gamma_prior_logits",
    "mix_w",
];

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl<T: Scalar> ScanParams<T> {
    /// Gate and output maps uniform in `±1/√d_f`, decay bias `+1`, input bias
    /// `0`, every head prior at `0.8` and an even data/prior mix.
    pub fn init(embed_dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        check_heads(embed_dim, heads)?;
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let mut mat = || rng.uniform_tensor::<T>(&[embed_dim, embed_dim], -bound, bound);
        let (w_a, w_b, w_out, u_out) = (mat(), mat(), mat(), mat());
        Ok(Self {
            w_a,
            b_a: Tensor::full(&[embed_dim], T::lit(INIT_DECAY_BIAS))?,
            w_b,
            b_b: Tensor::zeros(&[embed_dim])?,
            w_out,
            u_out,
            gamma_prior_logits: Tensor::full(&[heads], T::lit(logit(DEFAULT_GAMMA)))?,
            mix_w: Tensor::zeros(&[heads])?,
        })
    }

    /// Parameters under which every output equals its input: the decay gate
    /// is saturated shut, the input gate open, the prior switched off,
    /// `W_out = I` and `U_out = 0`.
    pub fn pass_through(embed_dim: usize, heads: usize) -> Result<Self> {
        check_heads(embed_dim, heads)?;
        Ok(Self {
            w_a: Tensor::zeros(&[embed_dim, embed_dim])?,
            b_a: Tensor::full(&[embed_dim], T::lit(-40.0))?,
            w_b: Tensor::zeros(&[embed_dim, embed_dim])?,
            b_b: Tensor::full(&[embed_dim], T::lit(40.0))?,
            w_out: Tensor::identity(embed_dim)?,
            u_out: Tensor::zeros(&[embed_dim, embed_dim])?,
            gamma_prior_logits: Tensor::full(&[heads], T::lit(logit(DEFAULT_GAMMA)))?,
            mix_w: Tensor::full(&[heads], T::lit(40.0))?,
        })
    }

    /// All-zero tensors with the same shapes, used as a gradient container.
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.dims()).expect("valid dims");
        Self {
            w_a: z(&self.w_a),
            b_a: z(&self.b_a),
            w_b: z(&self.w_b),
            b_b: z(&self.b_b),
            w_out: z(&self.w_out),
            u_out: z(&self.u_out),
            gamma_prior_logits: z(&self.gamma_prior_logits),
            mix_w: z(&self.mix_w),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.b_a.len()
    }

    pub fn heads(&self) -> usize {
        self.mix_w.len()
    }

    pub fn head_of(&self, channel: usize) -> usize {
        channel * self.heads() / self.embed_dim()
    }

    /// Per-head decay prior, each entry in `(0, 1)`.
    pub fn gamma_prior(&self) -> Vec<T> {
        self.gamma_prior_logits
            .data()
            .iter()
            .map(|&l| sigmoid(l))
            .collect()
    }

    pub fn set_gamma_prior(&mut self, gamma: &[f64]) -> Result<()> {
        if gamma.len() != self.heads() {
            return Err(dim_err!(
                "{} prior values for {} heads",
                gamma.len(),
                self.heads()
            ));
        }
        if let Some(g) = gamma.iter().find(|g| !(**g > 0.0 && **g < 1.0)) {
            return Err(arg_err!("decay prior {g} outside (0, 1)"));
        }
        self.gamma_prior_logits = Tensor::new(
            &[gamma.len()],
            gamma.iter().map(|&g| T::lit(logit(g))).collect(),
        )?;
        Ok(())
    }

    pub fn set_uniform_gamma(&mut self, gamma: f64) -> Result<()> {
        self.set_gamma_prior(&vec![gamma; self.heads()])
    }

    pub fn set_mix(&mut self, mix_logit: f64) {
        self.mix_w = Tensor::full(&[self.heads()], T::lit(mix_logit)).expect("heads > 0");
    }

    /// Verifies shapes and the head/width relation.
    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim();
        check_heads(d, self.heads())?;
        for (name, t) in self.tensors() {
            let want: &[usize] = match name.as_str() {
                "w_a" | "w_b" | "w_out" | "u_out" => &[d, d],
                "b_a" | "b_b" => &[d],
                _ => &[self.heads()],
            };
            if t.dims() != want {
                return Err(dim_err!(
                    "scan parameter `{name}` has dims {:?}, expected {want:?}",
                    t.dims()
                ));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ScanParams<U> {
        ScanParams {
            w_a: self.w_a.cast(),
            b_a: self.b_a.cast(),
            w_b: self.w_b.cast(),
            b_b: self.b_b.cast(),
            w_out: self.w_out.cast(),
            u_out: self.u_out.cast(),
            gamma_prior_logits: self.gamma_prior_logits.cast(),
            mix_w: self.mix_w.cast(),
        }
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        for (name, t) in self.tensors() {
            b.insert(&name, t);
        }
        b
    }

    pub fn from_bundle(b: &Bundle) -> Result<Self> {
        let get = |n: &str| b.tensor::<T>(n);
        let p = Self {
            w_a: get("w_a")?,
            b_a: get("b_a")?,
            w_b: get("w_b")?,
            b_b: get("b_b")?,
            w_out: get("w_out")?,
            u_out: get("u_out")?,
            gamma_prior_logits: get("gamma_prior_logits")?,
            mix_w: get("mix_w")?,
        };
        p.validate()?;
        Ok(p)
    }
}

impl<T: Scalar> ParamSet<T> for ScanParams<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let refs = [
            &self.w_a,
            &self.b_a,
            &self.w_b,
            &self.b_b,
            &self.w_out,
            &self.u_out,
            &self.gamma_prior_logits,
            &self.mix_w,
        ];
        ENTRY_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(refs)
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let refs = [
            &mut self.w_a,
            &mut self.b_a,
            &mut self.w_b,
            &mut self.b_b,
            &mut self.w_out,
            &mut self.u_out,
            &mut self.gamma_prior_logits,
            &mut self.mix_w,
        ];
        ENTRY_NAMES
            .iter()
            .map(|n| n.to_string())
            .zip(refs)
            .collect()
    }
}

fn check_heads(embed_dim: usize, heads: usize) -> Result<()> {
    if embed_dim == 0 || heads == 0 || !embed_dim.is_multiple_of(heads) {
        return Err(arg_err!(
            "head count {heads} must be positive and divide d_f = {embed_dim}"
        ));
    }
    Ok(())
}

/// JSON sidecar stored next to a scan parameter bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub d_f: usize,
    #[serde(rename = "K")]
    pub heads: usize,
    pub chunk_len: usize,
    pub eta_cross: f64,
    pub snake: bool,
}

pub const SIDECAR: &str = "scan.json";

pub fn save_scan<T: Scalar>(
    dir: impl AsRef<Path>,
    p: &ScanParams<T>,
    cfg: &ScanConfig,
) -> Result<()> {
    let dir = dir.as_ref();
    if cfg.d_f != p.embed_dim() || cfg.heads != p.heads() {
        return Err(dim_err!(
            "sidecar d_f={} K={} disagrees with parameters d_f={} K={}",
            cfg.d_f,
            cfg.heads,
            p.embed_dim(),
            p.heads()
        ));
    }
    p.to_bundle().write(dir)?;
    let mut json = serde_json::to_vec_pretty(cfg)?;
    json.push(b'\n');
    fs::write(dir.join(SIDECAR), json)?;
    Ok(())
}

pub fn load_scan<T: Scalar>(dir: impl AsRef<Path>) -> Result<(ScanParams<T>, ScanConfig)> {
    let dir = dir.as_ref();
    let p = ScanParams::from_bundle(&Bundle::read(dir)?)?;
    let raw = fs::read(dir.join(SIDECAR))
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(SIDECAR).display())))?;
    let cfg: ScanConfig = serde_json::from_slice(&raw)?;
    if cfg.d_f != p.embed_dim() || cfg.heads != p.heads() {
        return Err(dim_err!(
            "sidecar in {} disagrees with tensors",
            dir.display()
        ));
    }
    Ok((p, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_defaults() {
        let p = ScanParams::<f64>::init(8, 4, &mut Rng::new(0)).unwrap();
        p.validate().unwrap();
        for g in p.gamma_prior() {
            assert!((g - 0.8).abs() < 1e-12);
        }
        assert!(p.b_a.data().iter().all(|&v| v == 1.0));
        assert!(p.b_b.data().iter().all(|&v| v == 0.0));
        assert!(p.mix_w.data().iter().all(|&v| v == 0.0));
        let bound = 1.0 / 8f64.sqrt();
        assert!(p.w_a.data().iter().all(|v| v.abs() <= bound));
        assert_eq!(p.head_of(0), 0);
        assert_eq!(p.head_of(7), 3);
        assert_eq!(p.head_of(2), 1);
    }

    #[test]
    fn heads_must_divide() {
        assert!(ScanParams::<f64>::init(6, 4, &mut Rng::new(0)).is_err());
        assert!(ScanParams::<f64>::pass_through(6, 0).is_err());
    }

    #[test]
    fn gamma_prior_range_checked() {
        let mut p = ScanParams::<f64>::pass_through(4, 2).unwrap();
        assert!(p.set_gamma_prior(&[0.5, 1.0]).is_err());
        assert!(p.set_gamma_prior(&[0.0, 0.5]).is_err());
        p.set_gamma_prior(&[0.3, 0.9]).unwrap();
        let g = p.gamma_prior();
        assert!((g[0] - 0.3).abs() < 1e-12 && (g[1] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = ScanParams::<f64>::init(8, 2, &mut Rng::new(3)).unwrap();
        let cfg = ScanConfig {
            d_f: 8,
            heads: 2,
            chunk_len: 4,
            eta_cross: 0.5,
            snake: true,
        };
        save_scan(dir.path(), &p, &cfg).unwrap();
        for name in ENTRY_NAMES {
            assert!(dir.path().join(format!("{name}.s2ct")).exists());
        }
        let (back, cfg2) = load_scan::<f64>(dir.path()).unwrap();
        assert_eq!(back, p);
        assert_eq!(cfg2, cfg);
        let raw: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(SIDECAR)).unwrap()).unwrap();
        assert_eq!(raw["K"], 2);
    }
}
