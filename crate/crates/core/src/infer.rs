//! Prediction utilities: argmax labeling, bilinear upsampling of logits,
//! sliding-window inference with overlap averaging, and mIoU scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Label value excluded from scoring and training.
pub const IGNORE_LABEL: usize = 255;

/// Index of the largest entry of every `num_classes`-wide row. Ties go to the
/// lowest index.
pub fn argmax_rows<T: Scalar>(data: &[T], num_classes: usize) -> Vec<usize> {
    data.chunks_exact(num_classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Sliding-window geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileConfig {
    pub kernel: usize,
    pub overlap: f64,
    pub out_h: usize,
    pub out_w: usize,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            kernel: 448,
            overlap: 0.333,
            out_h: 448,
            out_w: 896,
        }
    }
}

impl TileConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(arg_err!("overlap {} outside [0, 1)", self.overlap));
        }
        if self.kernel == 0 || self.kernel > self.out_h.min(self.out_w) {
            return Err(arg_err!(
                "kernel {} must be in 1..={}",
                self.kernel,
                self.out_h.min(self.out_w)
            ));
        }
        Ok(())
    }

    /// Stride between window origins, rounded half up and at least 1.
    pub fn stride(&self) -> usize {
        stride(self.kernel, self.overlap)
    }

    /// `(top, left)` of every window in row-major order.
    pub fn windows(&self) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let rows = window_origins(self.out_h, self.kernel, self.overlap)?;
        let cols = window_origins(self.out_w, self.kernel, self.overlap)?;
        Ok(rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect())
    }
}

fn stride(kernel: usize, overlap: f64) -> usize {
    (((1.0 - overlap) * kernel as f64 + 0.5).floor() as usize).max(1)
}

/// Window origins along one axis. The last window is moved back to end
/// exactly at `extent` when it would overshoot.
pub fn window_origins(extent: usize, kernel: usize, overlap: f64) -> Result<Vec<usize>> {
    if kernel == 0 || kernel > extent {
        return Err(arg_err!("kernel {kernel} does not fit extent {extent}"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(arg_err!("overlap {overlap} outside [0, 1)"));
    }
    let step = stride(kernel, overlap);
    let last = extent - kernel;
    let mut origins = vec![0];
    let mut o = 0;
    while o < last {
        o = (o + step).min(last);
        origins.push(o);
    }
    Ok(origins)
}

/// Number of windows covering each pixel, row-major `out_h × out_w`.
pub fn coverage(cfg: &TileConfig) -> Result<Vec<u32>> {
    let mut count = vec![0u32; cfg.out_h * cfg.out_w];
    for (top, left) in cfg.windows()? {
        for r in top..top + cfg.kernel {
            for v in &mut count[r * cfg.out_w + left..r * cfg.out_w + left + cfg.kernel] {
                *v += 1;
            }
        }
    }
    Ok(count)
}

/// Per-pixel labels and the logits they were taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction<T> {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    /// `height × width × N_C`.
    pub logits: Tensor<T>,
}

impl<T: Scalar> SegPrediction<T> {
    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        let &[height, width, nc] = logits.dims() else {
            return Err(dim_err!(
                "expected h x w x N_C logits, got {:?}",
                logits.dims()
            ));
        };
        Ok(Self {
            height,
            width,
            labels: argmax_rows(logits.data(), nc),
            logits,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.logits.dims()[2]
    }

    /// Labels as an `height × width` tensor of class indices.
    pub fn label_tensor(&self) -> Tensor<T> {
        let data = self.labels.iter().map(|&l| T::lit(l as f64)).collect();
        Tensor::new(&[self.height, self.width], data).expect("labels are finite")
    }
}

/// Runs `window(top, left)` on every window and averages the overlapping
/// logits. Each call must return `kernel × kernel × N_C` logits.
///
/// Windows run in parallel; accumulation follows window order so the result
/// does not depend on scheduling.
pub fn tiled_infer<T, F>(
    cfg: &TileConfig,
    num_classes: usize,
    window: F,
) -> Result<SegPrediction<T>>
where
    T: Scalar,
    F: Fn(usize, usize) -> Result<Tensor<T>> + Sync,
{
    let windows = cfg.windows()?;
    let k = cfg.kernel;
    let nc = num_classes;
    let outputs: Vec<Result<Tensor<T>>> = windows
        .par_iter()
        .map(|&(top, left)| window(top, left))
        .collect();

    let (h, w) = (cfg.out_h, cfg.out_w);
    let mut sum = vec![T::zero(); h * w * nc];
    let mut count = vec![0u32; h * w];
    for (&(top, left), out) in windows.iter().zip(outputs) {
        let out = out?;
        if out.dims() != [k, k, nc] {
            return Err(Error::Contract(format!(
                "window at ({top}, {left}) returned {:?}, expected [{k}, {k}, {nc}]",
                out.dims()
            )));
        }
        for r in 0..k {
            for c in 0..k {
                let px = (top + r) * w + left + c;
                count[px] += 1;
                let src = &out.data()[(r * k + c) * nc..(r * k + c + 1) * nc];
                for (s, &v) in sum[px * nc..(px + 1) * nc].iter_mut().zip(src) {
                    *s += v;
                }
            }
        }
    }
    debug_assert!(count.iter().all(|&c| c >= 1), "uncovered pixel");
    for (px, &n) in count.iter().enumerate() {
        let n = T::lit(f64::from(n));
        for s in &mut sum[px * nc..(px + 1) * nc] {
            *s = *s / n;
        }
    }
    SegPrediction::from_logits(Tensor::new(&[h, w, nc], sum)?)
}

/// Bilinear resize of `h × w × N_C` logits with half-pixel centers
/// (align-corners false), clamping at the borders.
pub fn bilinear_upsample<T: Scalar>(
    logits: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let &[h, w, nc] = logits.dims() else {
        return Err(dim_err!(
            "expected h x w x N_C logits, got {:?}",
            logits.dims()
        ));
    };
    if out_h < h || out_w < w {
        return Err(arg_err!("cannot downscale {h}x{w} to {out_h}x{out_w}"));
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, T) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, T::lit(s - lo as f64))
    };
    let src = logits.data();
    let at = |r: usize, c: usize| &src[(r * w + c) * nc..(r * w + c + 1) * nc];
    let mut out = Vec::with_capacity(out_h * out_w * nc);
    for y in 0..out_h {
        let (r0, r1, fy) = axis(y, h, out_h);
        for x in 0..out_w {
            let (c0, c1, fx) = axis(x, w, out_w);
            let (a, b, c, d) = (at(r0, c0), at(r0, c1), at(r1, c0), at(r1, c1));
            for j in 0..nc {
                let top = a[j] + fx * (b[j] - a[j]);
                let bot = c[j] + fx * (d[j] - c[j]);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Tensor::new(&[out_h, out_w, nc], out)
}

/// Per-class IoU and their mean.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    /// Mean IoU over classes present in the ground truth.
    pub mean: f64,
}

/// Mean IoU over classes present in `gt`, skipping pixels labelled `ignore`.
pub fn miou(pred: &[usize], gt: &[usize], num_classes: usize, ignore: usize) -> Result<MiouReport> {
    if pred.len() != gt.len() {
        return Err(dim_err!(
            "{} predictions for {} labels",
            pred.len(),
            gt.len()
        ));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fn_ = vec![0u64; num_classes];
    let mut scored = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if g == ignore {
            continue;
        }
        if g >= num_classes || p >= num_classes {
            return Err(arg_err!("label {} outside 0..{num_classes}", g.max(p)));
        }
        scored += 1;
        if p == g {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    if scored == 0 {
        return Err(arg_err!("no pixels left after ignore masking"));
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fn_[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = (0..num_classes)
        .filter(|&c| tp[c] + fn_[c] > 0)
        .map(|c| per_class[c].unwrap_or(0.0))
        .collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouReport { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn origins_examples() {
        assert_eq!(window_origins(448, 448, 0.333).unwrap(), vec![0]);
        assert_eq!(window_origins(896, 448, 0.333).unwrap(), vec![0, 299, 448]);
        assert_eq!(window_origins(10, 4, 0.5).unwrap(), vec![0, 2, 4, 6]);
        assert!(window_origins(3, 4, 0.5).is_err());
        assert!(window_origins(8, 4, 1.0).is_err());
    }

    #[test]
    fn stride_rounds_half_up() {
        assert_eq!(stride(4, 0.375), 3); // 2.5 -> 3
        assert_eq!(stride(448, 0.333), 299);
        assert_eq!(stride(2, 0.99), 1);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, 2.0, 2.0, 2.0], 3), vec![1, 0]);
    }

    fn constant_window(k: usize, nc: usize, v: f64) -> Tensor<f64> {
        Tensor::full(&[k, k, nc], v).unwrap()
    }

    #[test]
    fn single_window_is_exact() {
        let cfg = TileConfig {
            kernel: 4,
            overlap: 0.25,
            out_h: 4,
            out_w: 4,
        };
        let mut rng = Rng::new(3);
        let t: Tensor<f64> = rng.normal_tensor(&[4, 4, 3], 1.0);
        let out = tiled_infer(&cfg, 3, |_, _| Ok(t.clone())).unwrap();
        assert_eq!(out.logits, t);
    }

    #[test]
    fn constant_model_round_trips() {
        let cfg = TileConfig {
            kernel: 6,
            overlap: 0.333,
            out_h: 6,
            out_w: 12,
        };
        let out = tiled_infer(&cfg, 2, |_, _| Ok(constant_window(6, 2, 0.7))).unwrap();
        assert!(out.logits.data().iter().all(|&v| (v - 0.7).abs() <= 1e-12));
    }

    #[test]
    fn half_overlap_averages() {
        let cfg = TileConfig {
            kernel: 4,
            overlap: 0.5,
            out_h: 4,
            out_w: 6,
        };
        let out = tiled_infer(&cfg, 1, |_, left| {
            Ok(constant_window(4, 1, if left == 0 { 1.0 } else { 3.0 }))
        })
        .unwrap();
        let row: Vec<f64> = out.logits.data()[..6].to_vec();
        assert_eq!(row, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn wrong_window_shape_is_contract_error() {
        let cfg = TileConfig {
            kernel: 4,
            overlap: 0.5,
            out_h: 4,
            out_w: 4,
        };
        let err = tiled_infer(&cfg, 2, |_, _| Ok(constant_window(3, 2, 0.0))).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn miou_examples() {
        assert_eq!(miou(&[0, 1, 2], &[0, 1, 2], 3, 255).unwrap().mean, 1.0);
        assert_eq!(
            miou(&[1, 1], &[0, 0], 2, 255).unwrap().per_class[0],
            Some(0.0)
        );
        let r = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, 255).unwrap();
        assert!((r.per_class[0].unwrap() - 0.5).abs() <= 1e-15);
        assert!((r.per_class[1].unwrap() - 2.0 / 3.0).abs() <= 1e-15);
        assert!((r.mean - 7.0 / 12.0).abs() <= 1e-12);
    }

    #[test]
    fn miou_ignore_and_absent() {
        let r = miou(&[0, 2, 1], &[0, 255, 255], 3, 255).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None, None]);
        assert_eq!(r.mean, 1.0);
        assert!(miou(&[0], &[255], 2, 255).is_err());
        assert!(miou(&[0], &[0, 1], 2, 255).is_err());
    }

    #[test]
    fn upsample_reference_grid() {
        let t = Tensor::new(&[2, 2, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = bilinear_upsample(&t, 4, 4).unwrap();
        let want = [
            0.0, 0.25, 0.75, 1.0, 0.5, 0.75, 1.25, 1.5, 1.5, 1.75, 2.25, 2.5, 2.0, 2.25, 2.75, 3.0,
        ];
        assert_eq!(up.data(), &want);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let mut rng = Rng::new(5);
        let t: Tensor<f64> = rng.normal_tensor(&[3, 5, 2], 1.0);
        assert_eq!(bilinear_upsample(&t, 3, 5).unwrap(), t);
        let c = Tensor::full(&[2, 3, 2], -1.5).unwrap();
        let up = bilinear_upsample(&c, 7, 9).unwrap();
        assert!(up.data().iter().all(|&v| v == -1.5));
        assert!(bilinear_upsample(&t, 2, 5).is_err());
    }

    proptest! {
        #[test]
        fn windows_cover_every_pixel(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let out_h = 1 + rng.below(40);
            let out_w = 1 + rng.below(40);
            let kernel = 1 + rng.below(out_h.min(out_w));
            let cfg = TileConfig { kernel, overlap: rng.uniform(0.0, 0.95), out_h, out_w };
            let rows = window_origins(out_h, kernel, cfg.overlap).unwrap();
            prop_assert!(rows.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(coverage(&cfg).unwrap().iter().all(|&c| c >= 1));
        }

        #[test]
        fn tiling_is_linear(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let cfg = TileConfig { kernel: 4, overlap: 0.4, out_h: 7, out_w: 9 };
            let f = rng.normal_tensor(&[7, 9, 2], 1.0);
            let g = rng.normal_tensor(&[7, 9, 2], 1.0);
            let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
            let crop = |t: &Tensor<f64>, top: usize, left: usize| {
                let mut v = Vec::new();
                for r in top..top + 4 {
                    v.extend_from_slice(&t.data()[(r * 9 + left) * 2..(r * 9 + left + 4) * 2]);
                }
                Tensor::new(&[4, 4, 2], v)
            };
            let tf = tiled_infer(&cfg, 2, |t, l| crop(&f, t, l)).unwrap();
            let tg = tiled_infer(&cfg, 2, |t, l| crop(&g, t, l)).unwrap();
            let combo = f.scale(a).add(&g.scale(b)).unwrap();
            let tc = tiled_infer(&cfg, 2, |t, l| crop(&combo, t, l)).unwrap();
            let lin = tf.logits.scale(a).add(&tg.logits.scale(b)).unwrap();
            prop_assert!(tc.logits.max_abs_diff(&lin).unwrap() <= 1e-10);
        }

        #[test]
        fn miou_label_swap_symmetry(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let gt: Vec<usize> = (0..30).map(|_| rng.below(4)).collect();
            let pred: Vec<usize> = (0..30).map(|_| rng.below(4)).collect();
            let swap = |v: &[usize]| v.iter().map(|&l| match l { 0 => 2, 2 => 0, x => x }).collect::<Vec<_>>();
            let a = miou(&pred, &gt, 4, 255).unwrap();
            let b = miou(&swap(&pred), &swap(&gt), 4, 255).unwrap();
            prop_assert!((a.mean - b.mean).abs() <= 1e-15);
            prop_assert_eq!(a.per_class[0], b.per_class[2]);
        }
    }
}
