//! Named parameter traversal and the AdamW optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numerics::{Scalar, Tensor};

/// A fixed, ordered collection of named learnable tensors.
///
/// Gradient containers implement the same trait with identical names and
/// shapes, which is what lets optimizers and gradient checks pair them up.
pub trait ParamSet<T: Scalar> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)>;

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Largest absolute entry difference against `other`, over all tensors.
    fn max_abs_delta(&self, other: &Self) -> T
    where
        Self: Sized,
    {
        self.tensors()
            .iter()
            .zip(other.tensors())
            .map(|((_, a), (_, b))| crate::numerics::max_abs_diff(a.data(), b.data()))
            .fold(T::zero(), T::max)
    }
}

/// Prefixes every name of a nested parameter set.
pub(crate) fn prefixed<R>(prefix: &str, items: Vec<(String, R)>) -> Vec<(String, R)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// `dst += src`, tensor by tensor.
pub(crate) fn add_into<T: Scalar, P: ParamSet<T>>(dst: &mut P, src: &P) {
    for ((_, d), (_, s)) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        crate::numerics::add_assign(d.data_mut(), s.data());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new<P: ParamSet<T>>(cfg: AdamWConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            cfg,
            step: 0,
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<P: ParamSet<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        self.step += 1;
        let c = &self.cfg;
        let lr = T::lit(c.lr);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let eps = T::lit(c.eps);
        let decay = T::one() - lr * T::lit(c.weight_decay);

        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if grads.len() != params.len() {
            return Err(dim_err!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            ));
        }
        for (idx, ((name, p), (_, g))) in params.iter_mut().zip(&grads).enumerate() {
            if p.dims() != g.dims() {
                return Err(dim_err!("gradient for `{name}` has dims {:?}", g.dims()));
            }
            let m = &mut self.first[idx];
            let v = &mut self.second[idx];
            for (((w, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad {
        x: Tensor<f64>,
    }

    impl ParamSet<f64> for Quad {
        fn tensors(&self) -> Vec<(String, &Tensor<f64>)> {
            vec![("x".into(), &self.x)]
        }
        fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<f64>)> {
            vec![("x".into(), &mut self.x)]
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Quad {
            x: Tensor::new(&[2], vec![1.0, -1.0]).unwrap(),
        };
        let g = Quad {
            x: Tensor::new(&[2], vec![3.0, -0.5]).unwrap(),
        };
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &g).unwrap();
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((p.x.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.x.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Quad {
            x: Tensor::new(&[3], vec![2.0, -3.0, 0.5]).unwrap(),
        };
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..2000 {
            let g = Quad { x: p.x.scale(2.0) };
            opt.step(&mut p, &g).unwrap();
        }
        assert!(p.x.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn zero_lr_is_frozen() {
        let mut p = Quad {
            x: Tensor::new(&[1], vec![0.7]).unwrap(),
        };
        let g = Quad {
            x: Tensor::new(&[1], vec![1.0]).unwrap(),
        };
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.0,
                ..Default::default()
            },
            &p,
        );
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.x.data(), &[0.7]);
    }
}
