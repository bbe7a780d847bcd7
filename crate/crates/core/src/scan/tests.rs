// Scalar oracles index by position on purpose.
#![allow(clippy::needless_range_loop)]

use super::*;
use crate::gradcheck::random_scan_params;
use crate::numerics::{max_abs_diff, Rng, Tensor};
use crate::optim::ParamSet;
use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Step-by-step recurrence written with explicit index loops, independent of
/// the slice kernels.
fn scalar_oracle(
    xs: &[f64],
    h0: &[f64],
    p: &ScanParams<f64>,
    use_prior: bool,
) -> (Vec<f64>, Vec<f64>) {
    let d = p.embed_dim();
    let k_heads = p.heads();
    let n = xs.len() / d;
    let w = |m: &Tensor<f64>, r: usize, c: usize| m.data()[r * d + c];
    let mut h = h0.to_vec();
    let mut ys = vec![0.0; n * d];
    for t in 0..n {
        let x = &xs[t * d..(t + 1) * d];
        let mut a_eff = vec![0.0; d];
        let mut b = vec![0.0; d];
        for r in 0..d {
            let mut za = p.b_a.data()[r];
            let mut zb = p.b_b.data()[r];
            for c in 0..d {
                za += w(&p.w_a, r, c) * x[c];
                zb += w(&p.w_b, r, c) * x[c];
            }
            let a = sig(za);
            b[r] = sig(zb);
            a_eff[r] = if use_prior {
                let k = r * k_heads / d;
                let s = sig(p.mix_w.data()[k]);
                let g = sig(p.gamma_prior_logits.data()[k]);
                s * a + (1.0 - s) * g
            } else {
                a
            };
        }
        for r in 0..d {
            h[r] = a_eff[r] * h[r] + b[r] * x[r];
        }
        for r in 0..d {
            let mut y = 0.0;
            for c in 0..d {
                y += w(&p.w_out, r, c) * h[c] + w(&p.u_out, r, c) * x[c];
            }
            ys[t * d + r] = y;
        }
    }
    (ys, h)
}

fn zero_state(d: usize) -> ScanState<f64> {
    ScanState::zeros(d)
}

#[test]
fn gates_at_zero_are_half() {
    let mut p = ScanParams::<f64>::init(4, 2, &mut Rng::new(0)).unwrap();
    p.b_a = Tensor::zeros(&[4]).unwrap();
    let (a, b) = gates(&[0.0; 4], &p);
    assert!(a.iter().chain(&b).all(|&v| v == 0.5));
}

#[test]
fn gates_saturate() {
    let mut p = ScanParams::<f64>::init(4, 2, &mut Rng::new(0)).unwrap();
    p.b_a = Tensor::full(&[4], 20.0).unwrap();
    let (a, _) = gates(&[0.1, -0.2, 0.3, 0.0], &p);
    assert!(a.iter().all(|&v| (v - 1.0).abs() <= 1e-8));
}

#[test]
fn gates_match_formula() {
    let mut rng = Rng::new(9);
    let p = random_scan_params(5, 1, &mut rng);
    let x: Vec<f64> = rng.uniform_vec(5, -1.0, 1.0);
    let (a, b) = gates(&x, &p);
    for r in 0..5 {
        let za: f64 = p.b_a.data()[r] + (0..5).map(|c| p.w_a.data()[r * 5 + c] * x[c]).sum::<f64>();
        let zb: f64 = p.b_b.data()[r] + (0..5).map(|c| p.w_b.data()[r * 5 + c] * x[c]).sum::<f64>();
        assert!((a[r] - sig(za)).abs() <= 1e-14);
        assert!((b[r] - sig(zb)).abs() <= 1e-14);
    }
}

#[test]
fn effective_decay_examples() {
    let mut p = ScanParams::<f64>::init(4, 2, &mut Rng::new(0)).unwrap();
    let a = [0.6, 0.1, 0.9, 0.3];
    p.set_mix(20.0);
    let e = effective_decay(&a, &p);
    assert!(max_abs_diff(&e, &a) <= 1e-8);

    p.set_mix(-20.0);
    p.set_uniform_gamma(0.8).unwrap();
    let e = effective_decay(&a, &p);
    assert!(e.iter().all(|&v| (v - 0.8).abs() <= 1e-8));

    p.set_mix(0.0);
    let e = effective_decay(&[0.6; 4], &p);
    assert!(e.iter().all(|&v| (v - 0.7).abs() <= 1e-15));
}

#[test]
fn effective_decay_uses_head_prior() {
    let mut p = ScanParams::<f64>::init(4, 2, &mut Rng::new(0)).unwrap();
    p.set_mix(-30.0);
    p.set_gamma_prior(&[0.3, 0.9]).unwrap();
    let e = effective_decay(&[0.5; 4], &p);
    assert!((e[0] - 0.3).abs() < 1e-12 && (e[1] - 0.3).abs() < 1e-12);
    assert!((e[2] - 0.9).abs() < 1e-12 && (e[3] - 0.9).abs() < 1e-12);
}

#[test]
fn single_step() {
    let mut rng = Rng::new(1);
    let p = random_scan_params(4, 2, &mut rng);
    let x: Vec<f64> = rng.uniform_vec(4, -1.0, 1.0);
    let out = scan_sequential(&x, &zero_state(4), &p, true).unwrap();
    let (_, b) = gates(&x, &p);
    let h1: Vec<f64> = b.iter().zip(&x).map(|(b, x)| b * x).collect();
    assert!(max_abs_diff(&out.h_end.h, &h1) <= 1e-15);
    let mut y = vec![0.0; 4];
    for r in 0..4 {
        for c in 0..4 {
            y[r] += p.w_out.data()[r * 4 + c] * h1[c] + p.u_out.data()[r * 4 + c] * x[c];
        }
    }
    assert!(max_abs_diff(&out.ys, &y) <= 1e-14);
}

#[test]
fn saturated_forget_gate() {
    let mut rng = Rng::new(2);
    let mut p = random_scan_params(4, 2, &mut rng);
    p.b_a = Tensor::full(&[4], -20.0).unwrap();
    let xs: Vec<f64> = rng.uniform_vec(5 * 4, -0.5, 0.5);
    let (_, tape) = scan_sequential_taped(&xs, &zero_state(4), &p, false).unwrap();
    for t in 0..5 {
        for c in 0..4 {
            let want = tape.b[t * 4 + c] * xs[t * 4 + c];
            assert!((tape.hs[(t + 1) * 4 + c] - want).abs() <= 1e-7);
        }
    }
}

#[test]
fn sequential_matches_scalar_oracle() {
    for seed in 0..4 {
        let mut rng = Rng::new(100 + seed);
        let p = random_scan_params(6, 3, &mut rng);
        let xs: Vec<f64> = rng.uniform_vec(12 * 6, -1.0, 1.0);
        let h0: Vec<f64> = rng.uniform_vec(6, -1.0, 1.0);
        for use_prior in [true, false] {
            let out = scan_sequential(&xs, &ScanState { h: h0.clone() }, &p, use_prior).unwrap();
            let (ys, h) = scalar_oracle(&xs, &h0, &p, use_prior);
            assert!(max_abs_diff(&out.ys, &ys) <= 1e-13);
            assert!(max_abs_diff(&out.h_end.h, &h) <= 1e-13);
        }
    }
}

#[test]
fn empty_sequence_returns_initial_state() {
    let p = ScanParams::<f64>::init(4, 2, &mut Rng::new(0)).unwrap();
    let h0 = ScanState {
        h: vec![0.1, -0.0, 3.0, f64::MIN_POSITIVE],
    };
    let out = scan_sequential(&[], &h0, &p, true).unwrap();
    assert!(out.ys.is_empty());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&out.h_end.h), bits(&h0.h));
}

#[test]
fn sequence_shape_errors() {
    let p = ScanParams::<f64>::init(4, 2, &mut Rng::new(0)).unwrap();
    assert!(scan_sequential(&[0.0; 5], &zero_state(4), &p, true).is_err());
    assert!(scan_sequential(&[0.0; 4], &zero_state(3), &p, true).is_err());
    let plan = build_chunk_plan(2, 2, 2, 1.0, false).unwrap();
    assert!(scan_chunked(&[0.0; 12], &plan, &p).is_err());
    assert!(scan_backward(&[0.0; 8], &zero_state(4), &p, true, &[0.0; 4], &[0.0; 4]).is_err());
}

#[test]
fn one_row_chunked_equals_sequential() {
    let mut rng = Rng::new(3);
    let p = random_scan_params(4, 2, &mut rng);
    let xs: Vec<f64> = rng.uniform_vec(8 * 4, -1.0, 1.0);
    let plan = build_chunk_plan(1, 8, 8, 1.0, false).unwrap();
    let seq = scan_sequential(&xs, &zero_state(4), &p, true).unwrap();
    let ch = scan_chunked(&xs, &plan, &p).unwrap();
    assert!(max_abs_diff(&seq.ys, &ch) <= 1e-14);
}

#[test]
fn zero_handoff_severs_rows() {
    let mut rng = Rng::new(4);
    let p = random_scan_params(4, 2, &mut rng);
    let (h, w) = (3, 4);
    let xs: Vec<f64> = rng.uniform_vec(h * w * 4, -1.0, 1.0);
    for snake in [false, true] {
        let plan = build_chunk_plan(h, w, 2, 0.0, snake).unwrap();
        let base = scan_chunked(&xs, &plan, &p).unwrap();
        let mut perturbed = xs.clone();
        for v in &mut perturbed[..w * 4] {
            *v += 0.5;
        }
        let out = scan_chunked(&perturbed, &plan, &p).unwrap();
        // Rows 1.. are untouched by row 0's inputs.
        assert!(max_abs_diff(&base[w * 4..], &out[w * 4..]) < 1e-14);
        assert!(max_abs_diff(&base[..w * 4], &out[..w * 4]) > 1e-3);
    }
}

#[test]
fn handoff_scales_state_at_row_starts_only() {
    // With eta = 0 but several chunks per row, the handoff inside a row stays intact.
    let mut rng = Rng::new(5);
    let p = random_scan_params(4, 2, &mut rng);
    let xs: Vec<f64> = rng.uniform_vec(8 * 4, -1.0, 1.0);
    let plan = build_chunk_plan(1, 8, 2, 0.0, false).unwrap();
    let seq = scan_sequential(&xs, &zero_state(4), &p, true).unwrap();
    assert!(max_abs_diff(&seq.ys, &scan_chunked(&xs, &plan, &p).unwrap()) <= 1e-14);
}

#[test]
fn backward_zero_upstream() {
    let mut rng = Rng::new(6);
    let p = random_scan_params(4, 2, &mut rng);
    let xs: Vec<f64> = rng.uniform_vec(5 * 4, -1.0, 1.0);
    let g = scan_backward(&xs, &zero_state(4), &p, true, &[0.0; 20], &[0.0; 4]).unwrap();
    assert!(g
        .params
        .tensors()
        .iter()
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    assert!(g.d_input.iter().chain(&g.d_h0).all(|&v| v == 0.0));
}

#[test]
fn backward_single_step_closed_form() {
    // One token from h0: h = Ã ⊙ h0 + B ⊙ x, y = W_out h + U_out x.
    // Loss = ⟨g, y⟩. Then ∂/∂W_out = g hᵀ, ∂/∂U_out = g xᵀ, and with
    // u = W_outᵀ g: ∂/∂b_b[c] = u_c x_c B_c (1 − B_c),
    // ∂/∂b_a[c] = u_c h0_c σ(w) A_c (1 − A_c), ∂/∂h0 = u ⊙ Ã.
    let mut rng = Rng::new(7);
    let p = random_scan_params(4, 2, &mut rng);
    let x: Vec<f64> = rng.uniform_vec(4, -1.0, 1.0);
    let h0: Vec<f64> = rng.uniform_vec(4, -1.0, 1.0);
    let g: Vec<f64> = rng.uniform_vec(4, -1.0, 1.0);
    let grads = scan_backward(&x, &ScanState { h: h0.clone() }, &p, true, &g, &[0.0; 4]).unwrap();

    let (a, b) = gates(&x, &p);
    let a_eff = effective_decay(&a, &p);
    let h: Vec<f64> = (0..4).map(|c| a_eff[c] * h0[c] + b[c] * x[c]).collect();
    let u: Vec<f64> = (0..4)
        .map(|c| (0..4).map(|r| p.w_out.data()[r * 4 + c] * g[r]).sum())
        .collect();
    for r in 0..4 {
        for c in 0..4 {
            assert!((grads.params.w_out.data()[r * 4 + c] - g[r] * h[c]).abs() <= 1e-10);
            assert!((grads.params.u_out.data()[r * 4 + c] - g[r] * x[c]).abs() <= 1e-10);
        }
    }
    for c in 0..4 {
        let s = sig(p.mix_w.data()[p.head_of(c)]);
        assert!((grads.params.b_b.data()[c] - u[c] * x[c] * b[c] * (1.0 - b[c])).abs() <= 1e-10);
        assert!(
            (grads.params.b_a.data()[c] - u[c] * h0[c] * s * a[c] * (1.0 - a[c])).abs() <= 1e-10
        );
        assert!((grads.d_h0[c] - u[c] * a_eff[c]).abs() <= 1e-10);
    }
}

#[test]
fn influence_examples() {
    let mut rng = Rng::new(8);
    let mut p = random_scan_params(4, 2, &mut rng);
    let xs: Vec<f64> = rng.uniform_vec(6 * 4, -1.0, 1.0);

    let one = influence(&xs, &p, 4, 1).unwrap();
    let (a, _) = gates(&xs[3 * 4..4 * 4], &p);
    assert!(max_abs_diff(&one, &effective_decay(&a, &p)) <= 1e-15);

    p.set_mix(-20.0);
    p.set_uniform_gamma(0.8).unwrap();
    let three = influence(&xs, &p, 5, 3).unwrap();
    assert!(three.iter().all(|&v| (v - 0.512).abs() <= 1e-8));

    assert!(influence(&xs, &p, 3, 3).is_err());
    assert!(influence(&xs, &p, 7, 1).is_err());
    assert!(influence(&xs, &p, 3, 0).is_err());
}

#[test]
fn influence_matches_state_perturbation() {
    let mut rng = Rng::new(9);
    let p = random_scan_params(4, 2, &mut rng);
    let n = 7;
    let xs: Vec<f64> = rng.uniform_vec(n * 4, -1.0, 1.0);
    let (t, d) = (6, 3);
    let inf = influence(&xs, &p, t, d).unwrap();
    let base = scan_sequential(&xs[..(t - d) * 4], &zero_state(4), &p, true).unwrap();
    let tail = &xs[(t - d) * 4..t * 4];
    let eps = 1e-6;
    for c in 0..4 {
        let run = |delta: f64| {
            let mut h = base.h_end.clone();
            h.h[c] += delta;
            scan_sequential(tail, &h, &p, true).unwrap().h_end.h
        };
        let hp = run(eps);
        let hm = run(-eps);
        for r in 0..4 {
            let fd = (hp[r] - hm[r]) / (2.0 * eps);
            let want = if r == c { inf[c] } else { 0.0 };
            assert!(
                (fd - want).abs() <= 1e-7,
                "channel {c}->{r}: {fd} vs {want}"
            );
        }
    }
}

/// Snake traversal of a grid, built independently of `ChunkPlan`.
fn snake_order(h: usize, w: usize) -> Vec<usize> {
    let mut order = Vec::new();
    for r in 0..h {
        if r % 2 == 0 {
            order.extend((0..w).map(|c| r * w + c));
        } else {
            order.extend((0..w).rev().map(|c| r * w + c));
        }
    }
    order
}

proptest! {
    #[test]
    fn chunked_equals_row_major_sequential(seed in any::<u64>(), h in 1usize..6, w in 1usize..7, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let p = random_scan_params(d, 1, &mut rng);
        let xs: Vec<f64> = rng.uniform_vec(h * w * d, -1.0, 1.0);
        let l = 1 + rng.below(w);
        let plan = build_chunk_plan(h, w, l, 1.0, false).unwrap();
        let seq = scan_sequential(&xs, &zero_state(d), &p, true).unwrap();
        let ch = scan_chunked(&xs, &plan, &p).unwrap();
        prop_assert!(max_abs_diff(&seq.ys, &ch) <= 1e-12);
    }

    #[test]
    fn snake_equals_permuted_sequential(seed in any::<u64>(), h in 1usize..6, w in 1usize..7) {
        let d = 3;
        let mut rng = Rng::new(seed);
        let p = random_scan_params(d, 1, &mut rng);
        let xs: Vec<f64> = rng.uniform_vec(h * w * d, -1.0, 1.0);
        let plan = build_chunk_plan(h, w, 1 + rng.below(w), 1.0, true).unwrap();
        let order = snake_order(h, w);
        let permuted: Vec<f64> = order.iter().flat_map(|&t| xs[t * d..(t + 1) * d].to_vec()).collect();
        let seq = scan_sequential(&permuted, &zero_state(d), &p, true).unwrap();
        let mut unpermuted = vec![0.0; xs.len()];
        for (i, &t) in order.iter().enumerate() {
            unpermuted[t * d..(t + 1) * d].copy_from_slice(&seq.ys[i * d..(i + 1) * d]);
        }
        let ch = scan_chunked(&xs, &plan, &p).unwrap();
        prop_assert!(max_abs_diff(&unpermuted, &ch) <= 1e-12);
    }

    #[test]
    fn gates_stay_in_open_unit_interval(seed in any::<u64>(), scale in 0.1f64..5.0) {
        let mut rng = Rng::new(seed);
        let p = random_scan_params(6, 2, &mut rng);
        let x: Vec<f64> = rng.uniform_vec(6, -scale, scale);
        let (a, b) = gates(&x, &p);
        let e = effective_decay(&a, &p);
        prop_assert!(a.iter().chain(&b).chain(&e).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn prior_dominated_influence_is_geometric(seed in any::<u64>(), g in 0.05f64..0.95, t in 2usize..9) {
        let mut rng = Rng::new(seed);
        let mut p = random_scan_params(4, 2, &mut rng);
        p.set_mix(-20.0);
        p.set_uniform_gamma(g).unwrap();
        let xs: Vec<f64> = rng.uniform_vec(8 * 4, -1.0, 1.0);
        let mut prev = vec![1.0; 4];
        for d in 1..t {
            let inf = influence(&xs, &p, t, d).unwrap();
            // Each step leaks at most σ(−20) of the raw gate.
            let leak = d as f64 * sig(-20.0);
            prop_assert!(inf.iter().all(|&v| (v - g.powi(d as i32)).abs() <= leak));
            prop_assert!(inf.iter().zip(&prev).all(|(a, b)| a <= b));
            prev = inf;
        }
    }

    #[test]
    fn influence_is_monotone(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = random_scan_params(4, 2, &mut rng);
        let xs: Vec<f64> = rng.uniform_vec(10 * 4, -2.0, 2.0);
        let mut prev = vec![1.0; 4];
        for d in 1..10 {
            let inf = influence(&xs, &p, 10, d).unwrap();
            prop_assert!(inf.iter().zip(&prev).all(|(a, b)| a <= b));
            prev = inf;
        }
    }

    #[test]
    fn backward_matches_finite_differences(seed in 0u64..1000) {
        let r = crate::gradcheck::scan_suite::<f64>(seed, 1, Default::default());
        prop_assert!(r.passed(), "{:?}", r);
        prop_assert_eq!(r.draws, 1);
    }
}
