use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::{finite_diff_grad, mc_estimator_check};
use crate::error::Result;
use crate::nn::{DType, ModelConfig, ModelState, PosEncoding};
use crate::seed;
use crate::taskgen::{Fact, Triplet};

/// Relative error used by the gradient check; magnitudes below `1e-6`
/// are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn small_config(vocab: usize, n_layers: usize, pos: PosEncoding) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        n_layers,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 16,
        pos_encoding: pos,
        dtype: DType::F64,
        rope_base: 10_000.0,
        init_std: 0.5,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradDraw {
    pub draw: usize,
    pub vocab_size: usize,
    pub n_params: usize,
    pub worst_rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub draws: Vec<GradDraw>,
    pub worst_rel_err: f64,
    pub passed: bool,
}

/// Backprop versus central differences on `draws` random small models,
/// contexts, responses and loss weights.
pub fn grad_check_suite(root: u64, draws: usize) -> Result<GradCheckReport> {
    const TOL: f64 = 1e-4;
    const STEP: f64 = 1e-5;
    let mut out = Vec::with_capacity(draws);
    for i in 0..draws {
        let mut rng = seed::stream(root, "grad-check", &[i as u64]);
        let vocab = rng.random_range(3..=8);
        let layers = 1 + i % 2;
        let pos = if i % 3 == 2 {
            PosEncoding::LearnedAbsolute
        } else {
            PosEncoding::Rotary
        };
        let state = ModelState::<f64>::init(small_config(vocab, layers, pos), rng.random())?;
        let ctx_len = rng.random_range(1..=6);
        let resp_len = rng.random_range(1..=4);
        let ctx: Vec<u32> = (0..ctx_len).map(|_| rng.random_range(0..vocab as u32)).collect();
        let resp: Vec<u32> = (0..resp_len).map(|_| rng.random_range(0..vocab as u32)).collect();
        let w: Vec<f64> = (0..resp_len).map(|_| rng.sample(StandardNormal)).collect();
        let (_, g) = state.weighted_nll_grad(&ctx, &resp, &w)?;
        let fd = finite_diff_grad(&state, |s| Ok(s.weighted_nll_grad(&ctx, &resp, &w)?.0), STEP)?;
        let worst = g.iter().zip(&fd).map(|(a, b)| rel_err(*a, *b)).fold(0.0, f64::max);
        out.push(GradDraw {
            draw: i,
            vocab_size: vocab,
            n_params: state.num_params(),
            worst_rel_err: worst,
        });
    }
    let worst = out.iter().map(|d| d.worst_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tolerance: TOL,
        step: STEP,
        draws: out,
        worst_rel_err: worst,
        passed: worst < TOL,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimatorState {
    pub state: usize,
    pub kl: f64,
    pub max_z: f64,
    pub max_degenerate_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimatorReport {
    pub n_samples: usize,
    pub z_limit: f64,
    pub states: Vec<EstimatorState>,
    pub max_z: f64,
    pub passed: bool,
}

/// A random triplet over tokens `1..vocab` whose short window is a strict sub-span.
fn random_triplet<R: Rng>(rng: &mut R, vocab: u32) -> Triplet {
    let len = rng.random_range(5..=8);
    let long: Vec<u32> = (0..len).map(|_| rng.random_range(1..vocab)).collect();
    let start = rng.random_range(0..len - 2);
    let end = rng.random_range(start + 2..=len.min(start + 4));
    Triplet {
        id: "estimator".into(),
        short_context: long[start..end].to_vec(),
        short_span: (start, end),
        evidence: Fact {
            key: vec![long[start]],
            value: vec![long[start + 1]],
            position: start,
        },
        gold_answer: vec![long[start + 1]],
        query: vec![rng.random_range(1..vocab)],
        long_context: long,
    }
}

/// Monte-Carlo mean of `−A ∇log π` against the enumerated reverse-KL
/// gradient on `states` random vocab-4 models.
pub fn estimator_suite(root: u64, states: usize, n_samples: usize) -> Result<EstimatorReport> {
    const Z: f64 = 3.0;
    let mut out = Vec::with_capacity(states);
    for i in 0..states {
        let mut rng = seed::stream(root, "estimator", &[i as u64]);
        let state = ModelState::<f64>::init(small_config(4, 1, PosEncoding::Rotary), rng.random())?;
        let t = random_triplet(&mut rng, 4);
        let prefix: Vec<u32> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(1..4)).collect();
        let c = mc_estimator_check(&state, &t, &prefix, n_samples, rng.random())?;
        out.push(EstimatorState {
            state: i,
            kl: c.kl,
            max_z: c.max_z,
            max_degenerate_gap: c.max_degenerate_gap,
        });
    }
    let max_z = out.iter().map(|s| s.max_z).fold(0.0, f64::max);
    let passed = max_z <= Z && out.iter().all(|s| s.max_degenerate_gap < 1e-8);
    Ok(EstimatorReport {
        n_samples,
        z_limit: Z,
        states: out,
        max_z,
        passed,
    })
}
