//! On-policy self-distillation.
//!
//! The student answers under the long context; the same parameters, shown
//! the short window, score those answers. The per-token log-ratio
//! `A_t = log π(y_t | C_S, Q, y_<t) − log π(y_t | C_L, Q, y_<t)` weights a
//! policy-gradient step on the long-context log-likelihood.

mod report;
mod sft;
mod train;

pub use report::{advantage_report, write_advantage_csv, AdvantageRow, Bucket, ADVANTAGE_CSV_HEADER};
pub use sft::{sft_step, sft_targets, train_sft, SftExample, SftStats, SFT_CSV_HEADER};
pub use train::{batch_schedule, train, train_step, StepStats, Teacher, STEP_CSV_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelState, Scalar};
use crate::taskgen::Triplet;

/// Log-probabilities are floored at ln(1e-12).
pub const PROB_FLOOR: f64 = -27.631_021_115_928_547;

/// Advantages with |A| at or below this many nats count as "near zero".
pub const NEAR_ZERO: f64 = 0.05;

pub fn floor_logp(lp: f64) -> f64 {
    lp.max(PROB_FLOOR)
}

fn default_rollouts() -> usize {
    1
}
fn default_temperature() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_rollouts")]
    pub rollouts_per_triplet: usize,
    pub batch_triplets: usize,
    pub max_new: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub lr: f64,
    #[serde(default)]
    pub advantage_clip: Option<f64>,
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.rollouts_per_triplet == 0 {
            return bad("rollouts_per_triplet must be >= 1");
        }
        if self.batch_triplets == 0 {
            return bad("batch_triplets must be >= 1");
        }
        if self.max_new == 0 {
            return bad("max_new must be >= 1");
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad("temperature must be > 0");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if let Some(c) = self.advantage_clip {
            if !(c.is_finite() && c > 0.0) {
                return bad("advantage_clip must be > 0 when set");
            }
        }
        Ok(())
    }
}

/// One sampled long-context response.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub triplet_id: String,
    pub response: Vec<u32>,
    /// Floored log π(y_t | C_L, Q, y_<t) at sampling time.
    pub student_logps: Vec<f64>,
    pub ended_with_eos: bool,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub teacher_logps: Vec<f64>,
}

/// Samples one rollout under the long context.
pub fn rollout<T: Scalar>(
    state: &ModelState<T>,
    triplet: &Triplet,
    max_new: usize,
    temperature: f64,
    seed: u64,
) -> Result<Rollout> {
    rollout_cached(state, triplet, max_new, temperature, seed, &mut crate::nn::RowCache::new())
}

/// As [`rollout`], sharing next-token rows across rollouts of one triplet
/// under one state.
pub fn rollout_cached<T: Scalar>(
    state: &ModelState<T>,
    triplet: &Triplet,
    max_new: usize,
    temperature: f64,
    seed: u64,
    cache: &mut crate::nn::RowCache,
) -> Result<Rollout> {
    let generation = state.sample_response_cached(
        &triplet.student_prompt(),
        crate::nn::SampleParams::sampled(max_new, temperature, seed),
        cache,
    )?;
    Ok(Rollout {
        triplet_id: triplet.id.clone(),
        student_logps: generation.logps.into_iter().map(floor_logp).collect(),
        response: generation.tokens,
        ended_with_eos: generation.ended_with_eos,
        seed,
    })
}

/// Floored log π(y_t | C_S, Q, y_<t) under `state`.
pub fn teacher_logprobs<T: Scalar>(state: &ModelState<T>, triplet: &Triplet, response: &[u32]) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Ok(Vec::new());
    }
    Ok(state
        .score_response(&triplet.teacher_prompt(), response)?
        .into_iter()
        .map(floor_logp)
        .collect())
}

/// Floored log π(y_t | C_L, Q, y_<t) under `state`.
pub fn student_logprobs<T: Scalar>(state: &ModelState<T>, triplet: &Triplet, response: &[u32]) -> Result<Vec<f64>> {
    if response.is_empty() {
        return Ok(Vec::new());
    }
    Ok(state
        .score_response(&triplet.student_prompt(), response)?
        .into_iter()
        .map(floor_logp)
        .collect())
}

/// `A_t = teacher_t − student_t`, optionally clamped to `[−clip, clip]`.
pub fn compute_advantages(teacher_logps: &[f64], student_logps: &[f64], clip: Option<f64>) -> Result<AdvantageVector> {
    if teacher_logps.len() != student_logps.len() {
        return Err(Error::Shape(format!(
            "{} teacher log-probs for {} student log-probs",
            teacher_logps.len(),
            student_logps.len()
        )));
    }
    let values = teacher_logps
        .iter()
        .zip(student_logps)
        .map(|(&t, &s)| {
            let a = t - s;
            match clip {
                Some(c) => a.clamp(-c, c),
                None => a,
            }
        })
        .collect();
    Ok(AdvantageVector {
        values,
        teacher_logps: teacher_logps.to_vec(),
    })
}

/// `L = −Σ_t A_t · log π(y_t | C_L, Q, y_<t)` with `A` held constant; the
/// student term is recomputed from `state`.
pub fn pg_loss_and_grad<T: Scalar>(
    state: &ModelState<T>,
    triplet: &Triplet,
    rollout: &Rollout,
    adv: &AdvantageVector,
) -> Result<(f64, Vec<T>)> {
    if adv.values.len() != rollout.response.len() {
        return Err(Error::Shape(format!(
            "{} advantages for a {}-token rollout",
            adv.values.len(),
            rollout.response.len()
        )));
    }
    let (loss, grad) = state.weighted_nll_grad(&triplet.student_prompt(), &rollout.response, &adv.values)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite policy-gradient loss {loss}")));
    }
    Ok((loss, grad))
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::nn::{DType, ModelConfig, ModelState, PosEncoding};
    use crate::taskgen::{Fact, Triplet};

    pub fn toy_config(vocab: usize, max_seq_len: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            max_seq_len,
            pos_encoding: PosEncoding::Rotary,
            dtype: DType::F64,
            rope_base: 10_000.0,
            init_std: 0.5,
        }
    }

    pub fn toy_state(vocab: usize, seed: u64) -> ModelState<f64> {
        ModelState::init(toy_config(vocab, 24), seed).unwrap()
    }

    /// A triplet over raw token ids; `short == None` makes C_S equal C_L.
    pub fn toy_triplet(long: &[u32], short: Option<(usize, usize)>, query: &[u32]) -> Triplet {
        let span = short.unwrap_or((0, long.len()));
        Triplet {
            id: format!("toy-{}", long.len()),
            long_context: long.to_vec(),
            short_span: span,
            short_context: long[span.0..span.1].to_vec(),
            query: query.to_vec(),
            gold_answer: vec![long[span.0]],
            evidence: Fact {
                key: vec![long[span.0]],
                value: vec![long[span.0]],
                position: span.0,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use crate::seed;
    use proptest::prelude::*;

    #[test]
    fn advantage_examples() {
        let a = compute_advantages(&[0.8f64.ln()], &[0.2f64.ln()], None).unwrap();
        assert!((a.values[0] - 4f64.ln()).abs() < 1e-12);
        assert!((a.values[0] - 1.3863).abs() < 1e-4);
        let a = compute_advantages(&[-0.7, -1.2], &[-0.7, -1.2], None).unwrap();
        assert_eq!(a.values, vec![0.0, 0.0]);
        let a = compute_advantages(&[-0.1, -2.3], &[-0.1, -0.5], None).unwrap();
        assert_eq!(a.values[0], 0.0);
        assert!((a.values[1] + 1.8).abs() < 1e-12);
        assert!(compute_advantages(&[0.0], &[], None).is_err());
        let a = compute_advantages(&[-0.1, -9.0], &[-5.0, -0.1], Some(1.0)).unwrap();
        assert_eq!(a.values, vec![1.0, -1.0]);
    }

    proptest! {
        #[test]
        fn lower_student_prob_raises_advantage(t in -20.0f64..0.0, s in -20.0f64..0.0, d in 1e-6f64..5.0) {
            let hi = compute_advantages(&[t], &[s], None).unwrap().values[0];
            let lo = compute_advantages(&[t], &[s - d], None).unwrap().values[0];
            prop_assert!(lo > hi);
        }
    }

    #[test]
    fn floor_applies() {
        assert_eq!(floor_logp(-100.0), PROB_FLOOR);
        assert_eq!(floor_logp(-1.0), -1.0);
        assert!((PROB_FLOOR - 1e-12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_contexts_score_identically() {
        let state = toy_state(5, 1);
        let t = toy_triplet(&[1, 2, 3, 4, 2], None, &[3]);
        let r = rollout(&state, &t, 3, 1.0, 7).unwrap();
        let teacher = teacher_logprobs(&state, &t, &r.response).unwrap();
        for (a, b) in teacher.iter().zip(&r.student_logps) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(teacher.iter().all(|&l| l >= PROB_FLOOR));
    }

    #[test]
    fn teacher_matches_gathered_rows() {
        let state = toy_state(3, 2);
        let t = toy_triplet(&[1, 2, 1, 1, 2, 2], Some((3, 5)), &[1]);
        let response = [2u32, 1, 0];
        let tl = teacher_logprobs(&state, &t, &response).unwrap();
        let mut seq = t.teacher_prompt();
        seq.extend_from_slice(&response[..2]);
        let rows = state.forward_logprobs(&seq).unwrap();
        let base = t.teacher_prompt().len() - 1;
        for (i, &y) in response.iter().enumerate() {
            assert!((tl[i] - rows[base + i][y as usize]).abs() < 1e-12);
        }
    }

    #[test]
    fn overlong_teacher_context_is_a_length_error() {
        let state = toy_state(4, 3);
        let long: Vec<u32> = (0..23).map(|i| 1 + i % 3).collect();
        let t = toy_triplet(&long, None, &[1]);
        let err = teacher_logprobs(&state, &t, &[1, 2]).unwrap_err();
        assert_eq!(err.kind(), "length");
    }

    #[test]
    fn pg_gradient_properties() {
        let state = toy_state(4, 4);
        let t = toy_triplet(&[1, 2, 3, 1, 2], Some((1, 3)), &[3]);
        let r = rollout(&state, &t, 3, 1.0, 11).unwrap();
        let zero = AdvantageVector {
            values: vec![0.0; r.response.len()],
            teacher_logps: vec![0.0; r.response.len()],
        };
        let (l0, g0) = pg_loss_and_grad(&state, &t, &r, &zero).unwrap();
        assert_eq!(l0, 0.0);
        assert!(g0.iter().all(|&g| g == 0.0));

        let tl = teacher_logprobs(&state, &t, &r.response).unwrap();
        let adv = compute_advantages(&tl, &r.student_logps, None).unwrap();
        let neg = AdvantageVector {
            values: adv.values.iter().map(|a| -a).collect(),
            teacher_logps: tl.clone(),
        };
        let (lp, gp) = pg_loss_and_grad(&state, &t, &r, &adv).unwrap();
        let (ln, gn) = pg_loss_and_grad(&state, &t, &r, &neg).unwrap();
        assert_eq!(lp, -ln);
        for (a, b) in gp.iter().zip(&gn) {
            assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn telescoping_sum() {
        let state = toy_state(5, 5);
        let t = toy_triplet(&[1, 2, 3, 4, 1, 2, 3], Some((2, 5)), &[4]);
        for s in 0..20 {
            let r = rollout(&state, &t, 3, 1.0, seed::derive(9, "rollout", &[s])).unwrap();
            let tl = teacher_logprobs(&state, &t, &r.response).unwrap();
            let adv = compute_advantages(&tl, &r.student_logps, None).unwrap();
            let sum: f64 = adv.values.iter().sum();
            let joint = tl.iter().sum::<f64>() - r.student_logps.iter().sum::<f64>();
            assert!((sum - joint).abs() < 1e-10);
        }
    }

    #[test]
    fn config_validation() {
        let ok = DistillConfig {
            rollouts_per_triplet: 1,
            batch_triplets: 2,
            max_new: 2,
            temperature: 1.0,
            lr: 1e-3,
            advantage_clip: None,
            steps: 1,
            seed: 0,
            checkpoint_every: 0,
        };
        ok.validate().unwrap();
        assert!(DistillConfig { temperature: 0.0, ..ok.clone() }.validate().is_err());
        assert!(DistillConfig { advantage_clip: Some(0.0), ..ok.clone() }.validate().is_err());
        assert!(DistillConfig { batch_triplets: 0, ..ok }.validate().is_err());
    }
}
