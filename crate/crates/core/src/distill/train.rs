use std::collections::HashMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{compute_advantages, pg_loss_and_grad, rollout_cached, teacher_logprobs, DistillConfig, NEAR_ZERO};
use crate::error::{Error, Result};
use crate::nn::{ModelState, RowCache, Scalar};
use crate::seed;
use crate::taskgen::Triplet;

pub const STEP_CSV_HEADER: &str = "step,loss,grad_norm,mean_advantage,mean_abs_advantage,mean_rkl_estimate,\
fraction_positive_adv,fraction_negative_adv,fraction_near_zero_adv,response_len,n_tokens";

/// Which parameters score rollouts under the short context.
#[derive(Clone, Copy, Debug)]
pub enum Teacher<'a, T: Scalar> {
    /// The parameters being trained, re-read every step.
    Current,
    /// A fixed snapshot. Only meant for convergence checks of the objective.
    Frozen(&'a ModelState<T>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    /// Mean over rollouts of `−Σ_t A_t log π(y_t)`.
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_advantage: f64,
    pub mean_abs_advantage: f64,
    /// `−mean(A_t)` over every response token in the batch.
    pub mean_rkl_estimate: f64,
    pub fraction_positive_adv: f64,
    pub fraction_negative_adv: f64,
    pub fraction_near_zero_adv: f64,
    /// Mean tokens per rollout.
    pub response_len: f64,
    pub n_tokens: usize,
}

impl StepStats {
    pub(crate) fn from_advantages(step: usize, loss: f64, grad_norm: f64, advantages: &[f64], n_rollouts: usize) -> Self {
        let n = advantages.len();
        let (mut pos, mut neg, mut sum, mut abs) = (0usize, 0usize, 0.0, 0.0);
        for &a in advantages {
            sum += a;
            abs += a.abs();
            if a > NEAR_ZERO {
                pos += 1;
            } else if a < -NEAR_ZERO {
                neg += 1;
            }
        }
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        let div = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        StepStats {
            step,
            loss,
            grad_norm,
            mean_advantage: mean,
            mean_abs_advantage: if n == 0 { 0.0 } else { abs / n as f64 },
            mean_rkl_estimate: -mean,
            fraction_positive_adv: div(pos),
            fraction_negative_adv: div(neg),
            fraction_near_zero_adv: if n == 0 { 1.0 } else { div(n - pos - neg) },
            response_len: if n_rollouts == 0 { 0.0 } else { n as f64 / n_rollouts as f64 },
            n_tokens: n,
        }
    }
}

pub(crate) fn l2_norm<T: Scalar>(g: &[T]) -> f64 {
    g.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
}

/// Sums per-item gradients in item order and divides by `count`.
pub(crate) fn mean_grad<T: Scalar>(parts: Vec<Vec<T>>, n_params: usize, count: usize) -> Vec<T> {
    let mut total = vec![T::zero(); n_params];
    for g in parts {
        for (t, x) in total.iter_mut().zip(g) {
            *t += x;
        }
    }
    let inv = T::of(1.0 / count as f64);
    for t in &mut total {
        *t *= inv;
    }
    total
}

struct TripletResult<T> {
    loss: f64,
    grad: Vec<T>,
    advantages: Vec<f64>,
}

fn triplet_contribution<T: Scalar>(
    state: &ModelState<T>,
    cfg: &DistillConfig,
    teacher: Teacher<'_, T>,
    triplet: &Triplet,
    index: usize,
) -> Result<TripletResult<T>> {
    let mut out = TripletResult {
        loss: 0.0,
        grad: vec![T::zero(); state.num_params()],
        advantages: Vec::new(),
    };
    // Scoring is a pure function of the response, so repeated responses
    // reuse the first result; the accumulated sums are unchanged.
    let mut rows = RowCache::new();
    let mut scored: HashMap<Vec<u32>, (f64, Vec<T>, Vec<f64>)> = HashMap::new();
    for r in 0..cfg.rollouts_per_triplet {
        let s = seed::derive(cfg.seed, "rollout", &[state.step, index as u64, r as u64]);
        let ro = rollout_cached(state, triplet, cfg.max_new, cfg.temperature, s, &mut rows)?;
        if ro.response.is_empty() {
            continue;
        }
        if !scored.contains_key(&ro.response) {
            let teacher_state = match teacher {
                Teacher::Current => state,
                Teacher::Frozen(t) => t,
            };
            let tl = teacher_logprobs(teacher_state, triplet, &ro.response)?;
            let adv = compute_advantages(&tl, &ro.student_logps, cfg.advantage_clip)?;
            let (loss, grad) = pg_loss_and_grad(state, triplet, &ro, &adv)?;
            scored.insert(ro.response.clone(), (loss, grad, adv.values));
        }
        let (loss, grad, adv) = &scored[&ro.response];
        out.loss += loss;
        for (o, &g) in out.grad.iter_mut().zip(grad) {
            *o += g;
        }
        out.advantages.extend_from_slice(adv);
    }
    Ok(out)
}

/// One iteration: roll out, score with the teacher, accumulate the
/// policy gradient in batch order, take one Adam step.
pub fn train_step<T: Scalar>(
    state: &mut ModelState<T>,
    cfg: &DistillConfig,
    batch: &[&Triplet],
    teacher: Teacher<'_, T>,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let step = state.step as usize;
    let frozen: &ModelState<T> = state;
    let results = batch
        .par_iter()
        .enumerate()
        .map(|(i, t)| triplet_contribution(frozen, cfg, teacher, t, i))
        .collect::<Result<Vec<_>>>()?;

    let n_rollouts = batch.len() * cfg.rollouts_per_triplet;
    let mut loss = 0.0;
    let mut advantages = Vec::new();
    let mut parts = Vec::with_capacity(results.len());
    for r in results {
        loss += r.loss;
        advantages.extend(r.advantages);
        parts.push(r.grad);
    }
    let grad = mean_grad(parts, state.num_params(), n_rollouts);
    let grad_norm = l2_norm(&grad);
    state.optimizer_step(&grad, cfg.lr)?;
    Ok(StepStats::from_advantages(
        step,
        loss / n_rollouts as f64,
        grad_norm,
        &advantages,
        n_rollouts,
    ))
}

/// Index batches for `steps` iterations over `n` items, reshuffling each
/// epoch. A batch may straddle two epochs.
pub fn batch_schedule(n: usize, batch: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut out = Vec::with_capacity(steps);
    let mut cursor = 0;
    for _ in 0..steps {
        let mut b = Vec::with_capacity(batch);
        while b.len() < batch {
            if cursor == order.len() {
                order = (0..n).collect();
                order.shuffle(&mut seed::stream(seed, "shuffle", &[epoch]));
                epoch += 1;
                cursor = 0;
            }
            b.push(order[cursor]);
            cursor += 1;
        }
        out.push(b);
    }
    out
}

/// Runs `cfg.steps` iterations over shuffled batches of `corpus`. `on_step`
/// sees the updated state after every step.
pub fn train<T: Scalar, F>(
    state: &mut ModelState<T>,
    cfg: &DistillConfig,
    corpus: &[Triplet],
    teacher: Teacher<'_, T>,
    mut on_step: F,
) -> Result<Vec<StepStats>>
where
    F: FnMut(&ModelState<T>, &StepStats) -> Result<()>,
{
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if corpus.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let mut log = Vec::with_capacity(cfg.steps);
    for (i, idx) in batch_schedule(corpus.len(), cfg.batch_triplets, cfg.steps, cfg.seed)
        .into_iter()
        .enumerate()
    {
        let batch: Vec<&Triplet> = idx.iter().map(|&j| &corpus[j]).collect();
        let stats = train_step(state, cfg, &batch, teacher).map_err(|e| Error::at_step(i, e))?;
        on_step(state, &stats).map_err(|e| Error::at_step(i, e))?;
        log.push(stats);
    }
    Ok(log)
}
