use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{l2_norm, mean_grad};
use crate::error::{Error, Result};
use crate::nn::{ModelState, SampleParams, Scalar};
use crate::taskgen::Triplet;

/// A fixed supervised target following a context. `weights[t]` scales the
/// loss on `target[t]`; zero-weight tokens are context in all but position.
#[derive(Clone, Debug, PartialEq)]
pub struct SftExample {
    pub context: Vec<u32>,
    pub target: Vec<u32>,
    pub weights: Vec<f64>,
}

impl SftExample {
    pub fn unit(context: Vec<u32>, target: Vec<u32>) -> Self {
        let weights = vec![1.0; target.len()];
        SftExample {
            context,
            target,
            weights,
        }
    }
}

pub const SFT_CSV_HEADER: &str = "step,loss,grad_norm,target_len,n_tokens";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftStats {
    pub step: usize,
    /// Mean per-example negative log-likelihood of the target.
    pub loss: f64,
    pub grad_norm: f64,
    /// Mean weighted target tokens per example.
    pub target_len: f64,
    pub n_tokens: usize,
}

/// Off-policy targets: the model's greedy answer under the short context,
/// paired with the long-context prompt.
pub fn sft_targets<T: Scalar>(state: &ModelState<T>, triplets: &[Triplet], max_new: usize) -> Result<Vec<SftExample>> {
    triplets
        .par_iter()
        .map(|t| {
            let g = state.sample_response(&t.teacher_prompt(), SampleParams::greedy(max_new))?;
            Ok(SftExample::unit(t.student_prompt(), g.tokens))
        })
        .collect()
}

/// Weighted NLL of every target, averaged over the batch, then one Adam step.
pub fn sft_step<T: Scalar>(state: &mut ModelState<T>, lr: f64, batch: &[SftExample]) -> Result<SftStats> {
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    if let Some(e) = batch.iter().find(|e| e.weights.len() != e.target.len()) {
        return Err(Error::Shape(format!(
            "{} weights for a {}-token target",
            e.weights.len(),
            e.target.len()
        )));
    }
    if batch.iter().any(|e| e.target.is_empty()) {
        return Err(Error::Data("supervised target is empty".into()));
    }
    let step = state.step as usize;
    let frozen: &ModelState<T> = state;
    let results = batch
        .par_iter()
        .map(|e| frozen.weighted_nll_grad(&e.context, &e.target, &e.weights))
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut parts = Vec::with_capacity(results.len());
    for (l, g) in results {
        loss += l;
        parts.push(g);
    }
    let grad = mean_grad(parts, state.num_params(), batch.len());
    let grad_norm = l2_norm(&grad);
    state.optimizer_step(&grad, lr)?;
    let n_tokens: usize = batch.iter().map(|e| e.weights.iter().filter(|&&w| w != 0.0).count()).sum();
    Ok(SftStats {
        step,
        loss: loss / batch.len() as f64,
        grad_norm,
        target_len: n_tokens as f64 / batch.len() as f64,
        n_tokens,
    })
}

/// `steps` supervised steps; `next_batch(i)` supplies the batch for step `i`
/// and `lr_at(i)` its learning rate.
pub fn train_sft<T, B, L, F>(
    state: &mut ModelState<T>,
    steps: usize,
    mut next_batch: B,
    lr_at: L,
    mut on_step: F,
) -> Result<Vec<SftStats>>
where
    T: Scalar,
    B: FnMut(usize) -> Result<Vec<SftExample>>,
    L: Fn(usize) -> f64,
    F: FnMut(&ModelState<T>, &SftStats) -> Result<()>,
{
    let mut log = Vec::with_capacity(steps);
    for i in 0..steps {
        let run = |state: &mut ModelState<T>, next_batch: &mut B| -> Result<SftStats> {
            let batch = next_batch(i)?;
            let stats = sft_step(state, lr_at(i), &batch)?;
            Ok(stats)
        };
        let stats = run(state, &mut next_batch).map_err(|e| Error::at_step(i, e))?;
        on_step(state, &stats).map_err(|e| Error::at_step(i, e))?;
        log.push(stats);
    }
    Ok(log)
}
