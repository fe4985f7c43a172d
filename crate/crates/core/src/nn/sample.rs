//! Ancestral and greedy decoding.

use std::collections::HashMap;

use rand::Rng;

use super::model::LogProbRow;
use super::params::ModelState;
use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::seed;

/// Token id reserved for end-of-sequence in every vocabulary.
pub const EOS: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleParams {
    pub max_new: usize,
    /// Sampling temperature; ignored when `greedy` is set.
    pub temperature: f64,
    pub greedy: bool,
    pub seed: u64,
}

impl SampleParams {
    pub fn greedy(max_new: usize) -> Self {
        SampleParams {
            max_new,
            temperature: 1.0,
            greedy: true,
            seed: 0,
        }
    }

    pub fn sampled(max_new: usize, temperature: f64, seed: u64) -> Self {
        SampleParams {
            max_new,
            temperature,
            greedy: false,
            seed,
        }
    }
}

/// Tokens produced after a context, with their untempered log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub logps: Vec<f64>,
    pub ended_with_eos: bool,
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Draws an index from `exp(row / temperature)` using one uniform variate.
pub fn sample_index<R: Rng>(row: &[f64], temperature: f64, rng: &mut R) -> usize {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = row.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // rounding left a sliver of mass past the end
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Next-token rows already computed after one fixed context, keyed by the
/// tokens generated so far.
pub type RowCache = HashMap<Vec<u32>, LogProbRow>;

impl<T: Scalar> ModelState<T> {
    /// Decodes up to `max_new` tokens after `context`, stopping after EOS.
    pub fn sample_response(&self, context: &[u32], params: SampleParams) -> Result<Generation> {
        self.sample_response_cached(context, params, &mut RowCache::new())
    }

    /// As [`Self::sample_response`], reusing rows from `cache`. The cache
    /// must only ever have been used with this state and `context`.
    pub fn sample_response_cached(
        &self,
        context: &[u32],
        params: SampleParams,
        cache: &mut RowCache,
    ) -> Result<Generation> {
        if !params.greedy && !(params.temperature.is_finite() && params.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                params.temperature
            )));
        }
        let total = context.len() + params.max_new;
        if total > self.config.max_seq_len {
            return Err(Error::Length {
                len: total,
                limit: self.config.max_seq_len,
            });
        }
        self.check_tokens(context)?;
        let mut rng = seed::rng(params.seed);
        let mut seq = context.to_vec();
        let mut out = Generation {
            tokens: Vec::with_capacity(params.max_new),
            logps: Vec::with_capacity(params.max_new),
            ended_with_eos: false,
        };
        for _ in 0..params.max_new {
            let key = seq[context.len()..].to_vec();
            let row = match cache.get(&key) {
                Some(r) => r.clone(),
                None => {
                    let r = self.next_token_logprobs(&seq)?;
                    cache.insert(key, r.clone());
                    r
                }
            };
            let tok = if params.greedy {
                argmax(&row)
            } else {
                sample_index(&row, params.temperature, &mut rng)
            };
            out.tokens.push(tok as u32);
            out.logps.push(row[tok]);
            seq.push(tok as u32);
            if tok as u32 == EOS {
                out.ended_with_eos = true;
                break;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::tiny_config;

    #[test]
    fn cached_sampling_matches_uncached() {
        let state = ModelState::<f64>::init(tiny_config(6, 16, 1), 4).unwrap();
        let ctx = [1, 2, 3, 4];
        let mut cache = RowCache::new();
        for s in 0..20 {
            let p = SampleParams::sampled(4, 1.0, s);
            let cached = state.sample_response_cached(&ctx, p, &mut cache).unwrap();
            assert_eq!(cached, state.sample_response(&ctx, p).unwrap());
        }
        assert!(cache.contains_key(&Vec::new()));
    }
}
