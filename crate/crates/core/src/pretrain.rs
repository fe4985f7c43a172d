//! Supervised short-context pretraining that gives the model its
//! "well-trained window": fresh QA documents no longer than `short_len`.

use serde::{Deserialize, Serialize};

use crate::distill::{train_sft, SftExample, SftStats};
use crate::error::{Error, Result};
use crate::nn::{ModelState, Scalar, EOS};
use crate::seed;
use crate::taskgen::{gen_qa_example, CorpusConfig};
use rand::Rng;

fn default_min_len() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    /// Peak learning rate.
    pub lr: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak, reached by cosine decay.
    #[serde(default = "one")]
    pub final_lr_frac: f64,
    /// Documents are drawn with lengths uniform in `min_len..=max_len_at(step)`.
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    /// The longest document length grows linearly from `min_len` to
    /// `short_len` over this many steps (0 starts at `short_len`).
    #[serde(default)]
    pub curriculum_steps: usize,
    /// Questions asked about each document; answers after the first see the
    /// earlier questions and answers as extra context.
    #[serde(default = "one_question")]
    pub questions_per_doc: usize,
    /// Loss weight of the EOS after each answer. Full weight on this easy
    /// token early in training can stall the formation of key matching.
    #[serde(default = "one")]
    pub eos_weight: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one_question() -> usize {
    1
}

fn one() -> f64 {
    1.0
}

impl PretrainConfig {
    pub fn validate(&self, corpus: &CorpusConfig) -> Result<()> {
        if self.questions_per_doc == 0 {
            return Err(Error::Config("questions_per_doc must be >= 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("pretrain batch must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("pretrain lr must be > 0".into()));
        }
        if !(self.eos_weight.is_finite() && self.eos_weight >= 0.0) {
            return Err(Error::Config("eos_weight must be >= 0".into()));
        }
        if !(self.final_lr_frac > 0.0 && self.final_lr_frac <= 1.0) {
            return Err(Error::Config("final_lr_frac must be in (0, 1]".into()));
        }
        if self.min_len < corpus.fact_len() || self.min_len > corpus.short_len {
            return Err(Error::Config(format!(
                "min_len must be in {}..={}",
                corpus.fact_len(),
                corpus.short_len
            )));
        }
        Ok(())
    }

    pub fn max_len_at(&self, step: usize, short_len: usize) -> usize {
        if step >= self.curriculum_steps {
            return short_len;
        }
        let span = short_len - self.min_len;
        self.min_len + span * step / self.curriculum_steps
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

/// Batch for step `step`. The prompt is document ++ first query; the target
/// chains `answer EOS query answer EOS ...` with loss only on answers and EOS.
pub fn pretrain_batch(corpus: &CorpusConfig, cfg: &PretrainConfig, step: usize) -> Result<Vec<SftExample>> {
    let vocab = corpus.vocab()?;
    (0..cfg.batch)
        .map(|j| {
            let mut rng = seed::stream(cfg.seed, "pretrain", &[step as u64, j as u64]);
            let len = rng.random_range(cfg.min_len..=cfg.max_len_at(step, corpus.short_len));
            let ex = gen_qa_example(corpus, &vocab, len, cfg.questions_per_doc, &mut rng)?;
            let mut target = Vec::new();
            let mut weights = Vec::new();
            for (i, (query, answer)) in ex.questions.iter().enumerate() {
                if i > 0 {
                    target.extend_from_slice(query);
                    weights.extend(std::iter::repeat_n(0.0, query.len()));
                }
                target.extend_from_slice(answer);
                target.push(EOS);
                weights.extend(std::iter::repeat_n(1.0, answer.len()));
                weights.push(cfg.eos_weight);
            }
            Ok(SftExample {
                context: ex.prompt(),
                target,
                weights,
            })
        })
        .collect()
}

pub fn pretrain_short<T: Scalar, F>(
    state: &mut ModelState<T>,
    corpus: &CorpusConfig,
    cfg: &PretrainConfig,
    on_step: F,
) -> Result<Vec<SftStats>>
where
    F: FnMut(&ModelState<T>, &SftStats) -> Result<()>,
{
    cfg.validate(corpus)?;
    train_sft(state, cfg.steps, |i| pretrain_batch(corpus, cfg, i), |i| cfg.lr_at(i), on_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::FillerStyle;

    fn corpus() -> CorpusConfig {
        CorpusConfig {
            n_triplets: 4,
            long_len: 64,
            short_len: 16,
            n_facts_per_doc: 8,
            filler_style: FillerStyle::RandomWords,
            seed: 0,
            query_templates: vec!["find {key}".into()],
            key_len: 1,
            value_len: 1,
            n_keys: 8,
            n_values: 4,
            n_filler_words: 8,
            distractor_rate: 0.0,
            alphabet: Default::default(),
        }
    }

    fn cfg() -> PretrainConfig {
        PretrainConfig {
            steps: 10,
            batch: 3,
            lr: 1e-2,
            warmup_steps: 2,
            final_lr_frac: 0.1,
            min_len: 4,
            questions_per_doc: 1,
            curriculum_steps: 0,
            eos_weight: 1.0,
            seed: 9,
        }
    }

    #[test]
    fn schedule_shape() {
        let c = cfg();
        assert_eq!(c.lr_at(0), 5e-3);
        assert_eq!(c.lr_at(1), 1e-2);
        assert!((c.lr_at(2) - 1e-2).abs() < 1e-15);
        assert!((c.lr_at(10) - 1e-3).abs() < 1e-15);
        assert!(c.lr_at(6) < c.lr_at(3));
    }

    #[test]
    fn batches_respect_lengths_and_end_with_eos() {
        let c = corpus();
        for step in 0..5 {
            let b = pretrain_batch(&c, &cfg(), step).unwrap();
            assert_eq!(b.len(), 3);
            for ex in &b {
                assert_eq!(ex.target.len(), 2);
                assert_eq!(*ex.target.last().unwrap(), EOS);
                let doc_len = ex.context.len() - 2;
                assert!((4..=16).contains(&doc_len));
            }
        }
        assert_eq!(pretrain_batch(&c, &cfg(), 3).unwrap(), pretrain_batch(&c, &cfg(), 3).unwrap());
    }

    #[test]
    fn several_questions_share_a_document() {
        let c = corpus();
        let p = PretrainConfig {
            questions_per_doc: 3,
            min_len: 16,
            ..cfg()
        };
        for ex in pretrain_batch(&c, &p, 0).unwrap() {
            // 16-token documents carry 2 facts at this density.
            let supervised: Vec<u32> = ex
                .target
                .iter()
                .zip(&ex.weights)
                .filter(|(_, &w)| w == 1.0)
                .map(|(&t, _)| t)
                .collect();
            assert_eq!(supervised.len(), 4);
            assert_eq!(supervised[1], EOS);
            assert_eq!(supervised[3], EOS);
        }
    }

    #[test]
    fn curriculum_grows_the_longest_document() {
        let p = PretrainConfig {
            curriculum_steps: 4,
            ..cfg()
        };
        let lens: Vec<usize> = (0..6).map(|s| p.max_len_at(s, 16)).collect();
        assert_eq!(lens, [4, 7, 10, 13, 16, 16]);
        assert_eq!(cfg().max_len_at(0, 16), 16);
        for ex in pretrain_batch(&corpus(), &p, 0).unwrap() {
            assert_eq!(ex.context.len() - 2, 4);
        }
    }

    #[test]
    fn eos_weight_scales_only_eos() {
        let p = PretrainConfig {
            eos_weight: 0.1,
            questions_per_doc: 2,
            min_len: 16,
            ..cfg()
        };
        for ex in pretrain_batch(&corpus(), &p, 1).unwrap() {
            for (&t, &w) in ex.target.iter().zip(&ex.weights) {
                if t == EOS {
                    assert_eq!(w, 0.1);
                } else {
                    assert!(w == 0.0 || w == 1.0);
                }
            }
        }
        let bad = PretrainConfig { eos_weight: -1.0, ..cfg() };
        assert!(bad.validate(&corpus()).is_err());
    }

    #[test]
    fn rejects_bad_min_len() {
        let bad = PretrainConfig { min_len: 17, ..cfg() };
        assert!(bad.validate(&corpus()).is_err());
    }
}
