use super::*;
use crate::distill::testutil::{toy_config, toy_state, toy_triplet};
use crate::distill::{compute_advantages, student_logprobs, teacher_logprobs};
use crate::nn::{DType, ModelConfig, PosEncoding};

#[test]
fn quadratic_gradient_is_identity() {
    let x: Vec<f64> = (0..20).map(|i| (i as f64 - 7.5) * 0.37).collect();
    let g = finite_diff(&x, |y| Ok(0.5 * y.iter().map(|v| v * v).sum::<f64>()), 1e-4).unwrap();
    for (a, b) in g.iter().zip(&x) {
        assert!((a - b).abs() < 1e-8);
    }
}

#[test]
fn central_difference_error_is_second_order() {
    let x = [0.3, -1.1, 0.7];
    let f = |y: &[f64]| Ok(y[0].sin() * y[1].exp() + y[2].powi(4));
    let exact = [0.3f64.cos() * (-1.1f64).exp(), 0.3f64.sin() * (-1.1f64).exp(), 4.0 * 0.7f64.powi(3)];
    let err = |h: f64| {
        let g = finite_diff(&x, f, h).unwrap();
        g.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let ratio = err(1e-2) / err(5e-3);
    assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn nonfinite_objective_is_a_numeric_error() {
    let e = finite_diff(&[1.0], |y| Ok(if y[0] > 1.0 { f64::NAN } else { 0.0 }), 1e-3).unwrap_err();
    assert_eq!(e.kind(), "numeric");
}

#[test]
fn matches_backprop_on_a_small_model() {
    let cfg = ModelConfig {
        vocab_size: 4,
        n_layers: 1,
        d_model: 4,
        n_heads: 2,
        d_ff: 8,
        max_seq_len: 12,
        pos_encoding: PosEncoding::Rotary,
        dtype: DType::F64,
        rope_base: 10_000.0,
        init_std: 0.5,
    };
    let state = ModelState::<f64>::init(cfg, 5).unwrap();
    assert!((150..=250).contains(&state.num_params()));
    let (ctx, resp, w) = (vec![1u32, 3, 2], vec![2u32, 1, 0], vec![0.7, -1.3, 0.4]);
    let (_, g) = state.weighted_nll_grad(&ctx, &resp, &w).unwrap();
    let fd = finite_diff_grad(&state, |s| Ok(s.weighted_nll_grad(&ctx, &resp, &w)?.0), 1e-5).unwrap();
    for (a, b) in g.iter().zip(&fd) {
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-6);
        assert!(rel < 1e-4, "{a} vs {b}");
    }
}

#[test]
fn two_point_kl() {
    let q = [0.9f64.ln(), 0.1f64.ln()];
    let p = [0.5f64.ln(), 0.5f64.ln()];
    let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    assert!((kl_rows(&q, &p) - expect).abs() < 1e-15);
    assert!((kl_rows(&q, &p) - 0.3681).abs() < 1e-4);
}

#[test]
fn pointwise_kl_at_identical_prefixes() {
    let s = toy_state(4, 1);
    let (kl, g) = exact_pointwise_rkl_grad(&s, &[1, 2, 3], &[1, 2, 3], 1e-4).unwrap();
    assert_eq!(kl, 0.0);
    assert!(g.iter().all(|x| x.abs() < 1e-8));
}

#[test]
fn pointwise_kl_is_nonnegative() {
    for seed in 0..100 {
        let s = toy_state(5, seed);
        let q = s.next_token_logprobs(&[1, 2, 3, 4]).unwrap();
        let p = s.next_token_logprobs(&[3, 4]).unwrap();
        let kl = kl_rows(&q, &p);
        assert!(kl >= 0.0);
        assert_eq!(kl > 0.0, q != p);
    }
}

#[test]
fn estimator_vanishes_when_contexts_agree() {
    let s = toy_state(4, 2);
    let t = toy_triplet(&[1, 2, 3, 1], None, &[2]);
    let c = mc_estimator_check(&s, &t, &[], 10_000, 0).unwrap();
    assert_eq!(c.kl, 0.0);
    assert!(c.mc_mean.iter().all(|&m| m == 0.0));
    assert!(c.exact.iter().all(|x| x.abs() < 1e-8));
}

#[test]
fn estimator_is_unbiased_on_one_state() {
    let s = toy_state(4, 3);
    let t = toy_triplet(&[1, 2, 3, 1, 2, 3], Some((3, 5)), &[2]);
    let c = mc_estimator_check(&s, &t, &[1], 100_000, 1).unwrap();
    assert!(c.kl > 0.0);
    assert!(c.max_z <= 3.0, "max_z {}", c.max_z);
    assert!(c.max_degenerate_gap < 1e-8);
}

#[test]
fn stderr_shrinks_like_root_n() {
    let s = toy_state(4, 4);
    let t = toy_triplet(&[1, 2, 3, 1, 2, 3], Some((3, 5)), &[2]);
    let a = mc_estimator_check(&s, &t, &[], 10_000, 2).unwrap();
    let b = mc_estimator_check(&s, &t, &[], 1_000_000, 3).unwrap();
    let i = (0..a.mc_stderr.len())
        .max_by(|&i, &j| a.mc_stderr[i].total_cmp(&a.mc_stderr[j]))
        .unwrap();
    let ratio = a.mc_stderr[i] / b.mc_stderr[i];
    assert!((8.0..12.5).contains(&ratio), "ratio {ratio}");
}

#[test]
fn enumeration_counts_and_normalizes() {
    assert_eq!(response_count(8, 3), 1 + 7 + 49 * 8);
    assert_eq!(response_count(3, 1), 3);
    let s = toy_state(5, 5);
    let t = toy_triplet(&[1, 2, 3, 4], Some((1, 3)), &[2]);
    let all = enumerate_responses(&s, &s, &t, 3).unwrap();
    assert_eq!(all.len(), response_count(5, 3));
    let total: f64 = all.iter().map(|e| e.student_logp.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
    let total: f64 = all.iter().map(|e| e.teacher_logp.exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn enumeration_budget() {
    let s = ModelState::<f64>::init(toy_config(8, 24), 0).unwrap();
    let t = toy_triplet(&[1, 2], None, &[3]);
    assert_eq!(enumerate_sequence_rkl(&s, &s, &t, 5).unwrap_err().kind(), "config");
}

#[test]
fn sequence_kl_properties() {
    let s = toy_state(5, 6);
    let same = toy_triplet(&[1, 2, 3, 4], None, &[2]);
    assert_eq!(enumerate_sequence_rkl(&s, &s, &same, 3).unwrap(), 0.0);
    for seed in 0..10 {
        let s = toy_state(5, seed);
        let t = toy_triplet(&[1, 2, 3, 4, 1], Some((2, 4)), &[2]);
        assert!(enumerate_sequence_rkl(&s, &s, &t, 3).unwrap() >= 0.0);
    }
}

#[test]
fn sequence_kl_equals_expected_negative_advantage_sum() {
    let s = toy_state(5, 7);
    let t = toy_triplet(&[1, 2, 3, 4, 1], Some((2, 4)), &[2]);
    let kl = enumerate_sequence_rkl(&s, &s, &t, 3).unwrap();
    let mut expect = 0.0;
    for e in enumerate_responses(&s, &s, &t, 3).unwrap() {
        let sl = student_logprobs(&s, &t, &e.response).unwrap();
        let tl = teacher_logprobs(&s, &t, &e.response).unwrap();
        let adv = compute_advantages(&tl, &sl, None).unwrap();
        expect -= e.student_logp.exp() * adv.values.iter().sum::<f64>();
    }
    assert!((kl - expect).abs() < 1e-10);
}
