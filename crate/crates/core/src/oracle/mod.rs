//! Brute-force references: finite differences, enumerated reverse-KL and its
//! gradient, and Monte-Carlo checks of the advantage-weighted estimator.
//!
//! Everything here runs in f64 and uses only public scoring on `ModelState`.

mod suite;

pub use suite::{
    estimator_suite, grad_check_suite, rel_err, EstimatorReport, EstimatorState, GradCheckReport, GradDraw,
};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::{sample_index, ModelState, EOS};
use crate::seed;
use crate::taskgen::Triplet;

/// Upper bound on the number of responses an enumeration may visit.
pub const MAX_ENUMERATION: usize = 4096;

/// Central differences of `f` around `x`, one coordinate at a time.
pub fn finite_diff<F>(x: &[f64], f: F, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {step}")));
    }
    (0..x.len())
        .into_par_iter()
        .map(|i| {
            let mut y = x.to_vec();
            y[i] = x[i] + step;
            let up = f(&y)?;
            y[i] = x[i] - step;
            let down = f(&y)?;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::Numeric(format!("objective not finite around coordinate {i}")));
            }
            Ok((up - down) / (2.0 * step))
        })
        .collect()
}

/// Central-difference gradient of `objective` with respect to every parameter.
pub fn finite_diff_grad<F>(state: &ModelState<f64>, objective: F, step: f64) -> Result<Vec<f64>>
where
    F: Fn(&ModelState<f64>) -> Result<f64> + Sync,
{
    finite_diff(
        &state.params,
        |p| {
            let mut s = state.clone();
            s.params.copy_from_slice(p);
            objective(&s)
        },
        step,
    )
}

/// `KL(q ‖ p)` for two log-probability rows.
pub fn kl_rows(q_logp: &[f64], p_logp: &[f64]) -> f64 {
    q_logp
        .iter()
        .zip(p_logp)
        .map(|(&q, &p)| if q == f64::NEG_INFINITY { 0.0 } else { q.exp() * (q - p) })
        .sum()
}

/// `KL(π_θ(·|long_prefix) ‖ π_θ₀(·|short_prefix))` and its gradient in θ,
/// with the second distribution frozen at the current parameters.
/// The gradient is a Richardson-extrapolated central difference.
pub fn exact_pointwise_rkl_grad(
    state: &ModelState<f64>,
    long_prefix: &[u32],
    short_prefix: &[u32],
    step: f64,
) -> Result<(f64, Vec<f64>)> {
    let teacher = state.next_token_logprobs(short_prefix)?;
    let kl_at = |s: &ModelState<f64>| -> Result<f64> { Ok(kl_rows(&s.next_token_logprobs(long_prefix)?, &teacher)) };
    let kl = kl_at(state)?;
    let coarse = finite_diff_grad(state, kl_at, 2.0 * step)?;
    let fine = finite_diff_grad(state, kl_at, step)?;
    let grad = fine.iter().zip(&coarse).map(|(f, c)| (4.0 * f - c) / 3.0).collect();
    Ok((kl, grad))
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimatorCheck {
    pub n_samples: usize,
    pub mc_mean: Vec<f64>,
    pub mc_stderr: Vec<f64>,
    pub exact: Vec<f64>,
    pub kl: f64,
    /// Largest |mean − exact| / stderr over parameters with nonzero spread.
    pub max_z: f64,
    /// Largest |mean − exact| over parameters whose draws are all identical.
    pub max_degenerate_gap: f64,
}

/// Samples `y ~ π(·|C_L, Q, prefix)` `n_samples` times, averages the
/// per-draw estimate `−A(y) ∇log π(y|C_L, Q, prefix)` and compares it with
/// the enumerated reverse-KL gradient.
pub fn mc_estimator_check(
    state: &ModelState<f64>,
    triplet: &Triplet,
    prefix: &[u32],
    n_samples: usize,
    seed: u64,
) -> Result<EstimatorCheck> {
    if n_samples < 2 {
        return Err(Error::Config("need at least two samples".into()));
    }
    let long = [triplet.student_prompt().as_slice(), prefix].concat();
    let short = [triplet.teacher_prompt().as_slice(), prefix].concat();
    let q = state.next_token_logprobs(&long)?;
    let p = state.next_token_logprobs(&short)?;
    let v = q.len();

    // The estimate depends on the draw only through y, so each y's vector is
    // computed once and the draws are tallied.
    let per_token: Vec<Vec<f64>> = (0..v)
        .into_par_iter()
        .map(|y| {
            let a = p[y] - q[y];
            state.weighted_nll_grad(&long, &[y as u32], &[a]).map(|(_, g)| g)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; v];
    for i in 0..n_samples {
        let mut rng = seed::stream(seed, "mc", &[i as u64]);
        counts[sample_index(&q, 1.0, &mut rng)] += 1;
    }

    let n = n_samples as f64;
    let dim = state.num_params();
    let mut mean = vec![0.0; dim];
    for (y, g) in per_token.iter().enumerate() {
        let w = counts[y] as f64 / n;
        for (m, x) in mean.iter_mut().zip(g) {
            *m += w * x;
        }
    }
    let mut var = vec![0.0; dim];
    for (y, g) in per_token.iter().enumerate() {
        let c = counts[y] as f64;
        for ((s, x), m) in var.iter_mut().zip(g).zip(&mean) {
            *s += c * (x - m) * (x - m);
        }
    }
    let stderr: Vec<f64> = var.iter().map(|s| (s / (n - 1.0) / n).sqrt()).collect();

    let (kl, exact) = exact_pointwise_rkl_grad(state, &long, &short, 1e-4)?;
    let mut max_z: f64 = 0.0;
    let mut max_gap: f64 = 0.0;
    for i in 0..dim {
        let gap = (mean[i] - exact[i]).abs();
        if stderr[i] > 0.0 {
            max_z = max_z.max(gap / stderr[i]);
        } else {
            max_gap = max_gap.max(gap);
        }
    }
    Ok(EstimatorCheck {
        n_samples,
        mc_mean: mean,
        mc_stderr: stderr,
        exact,
        kl,
        max_z,
        max_degenerate_gap: max_gap,
    })
}

/// One complete response with its joint log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Enumerated {
    pub response: Vec<u32>,
    pub student_logp: f64,
    pub teacher_logp: f64,
}

/// Number of responses of at most `max_new` tokens that stop at EOS.
pub fn response_count(vocab: usize, max_new: usize) -> usize {
    let open = vocab.saturating_sub(1);
    let mut total = 0usize;
    let mut prefixes = 1usize;
    for k in 1..=max_new {
        if k == max_new {
            total = total.saturating_add(prefixes.saturating_mul(vocab));
        } else {
            total = total.saturating_add(prefixes);
            prefixes = prefixes.saturating_mul(open);
        }
    }
    total
}

/// Every response the sampler can produce within `max_new` tokens, scored by
/// `student` under the long prompt and by `teacher` under the short one.
pub fn enumerate_responses(
    student: &ModelState<f64>,
    teacher: &ModelState<f64>,
    triplet: &Triplet,
    max_new: usize,
) -> Result<Vec<Enumerated>> {
    let v = student.config.vocab_size;
    if teacher.config.vocab_size != v {
        return Err(Error::Config("student and teacher vocabularies differ".into()));
    }
    let count = response_count(v, max_new);
    if max_new == 0 || count > MAX_ENUMERATION {
        return Err(Error::Config(format!(
            "enumeration of {count} responses exceeds the budget of {MAX_ENUMERATION}"
        )));
    }
    let long = triplet.student_prompt();
    let short = triplet.teacher_prompt();
    let mut out = Vec::with_capacity(count);
    let mut stack = vec![(Vec::<u32>::new(), 0.0f64, 0.0f64)];
    while let Some((resp, sl, tl)) = stack.pop() {
        let q = student.next_token_logprobs(&[long.as_slice(), &resp].concat())?;
        let p = teacher.next_token_logprobs(&[short.as_slice(), &resp].concat())?;
        for y in (0..v as u32).rev() {
            let mut next = resp.clone();
            next.push(y);
            let (s2, t2) = (sl + q[y as usize], tl + p[y as usize]);
            if y == EOS || next.len() == max_new {
                out.push(Enumerated {
                    response: next,
                    student_logp: s2,
                    teacher_logp: t2,
                });
            } else {
                stack.push((next, s2, t2));
            }
        }
    }
    Ok(out)
}

/// Exact sequence-level `KL(π_student(y|C_L,Q) ‖ π_teacher(y|C_S,Q))` over
/// all responses of at most `max_new` tokens.
pub fn enumerate_sequence_rkl(
    student: &ModelState<f64>,
    teacher: &ModelState<f64>,
    triplet: &Triplet,
    max_new: usize,
) -> Result<f64> {
    Ok(enumerate_responses(student, teacher, triplet, max_new)?
        .iter()
        .map(|e| e.student_logp.exp() * (e.student_logp - e.teacher_logp))
        .sum())
}

#[cfg(test)]
mod tests;
