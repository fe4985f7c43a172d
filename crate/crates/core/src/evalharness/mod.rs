//! Retrieval accuracy across context lengths, long/short reverse-KL, and
//! short-context preservation.

use std::collections::HashSet;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distill::{compute_advantages, teacher_logprobs};
use crate::error::{Error, Result};
use crate::nn::{ModelState, SampleParams, Scalar};
use crate::seed;
use crate::taskgen::{build_corpus, Corpus, CorpusConfig, Triplet};

pub const COMPARE_CSV_HEADER: &str = "length,acc_base,acc_ours,acc_sft,delta_ours,delta_sft";
pub const PRESERVATION_CSV_HEADER: &str = "short_len,short_acc_before,short_acc_after,delta";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub context_lengths: Vec<usize>,
    pub n_examples_per_length: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EvalConfig {
    pub fn validate(&self, corpus: &CorpusConfig, max_seq_len: usize) -> Result<()> {
        if self.context_lengths.is_empty() {
            return Err(Error::Config("context_lengths must be non-empty".into()));
        }
        if self.context_lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("context_lengths must be strictly ascending".into()));
        }
        if self.n_examples_per_length == 0 {
            return Err(Error::Config("n_examples_per_length must be >= 1".into()));
        }
        let headroom = corpus.max_query_len() + corpus.value_len;
        if let Some(&l) = self.context_lengths.iter().find(|&&l| l + headroom > max_seq_len) {
            return Err(Error::Length {
                len: l + headroom,
                limit: max_seq_len,
            });
        }
        Ok(())
    }

    /// Seed of the evaluation corpus at `len`; never the training seed.
    pub fn corpus_seed(&self, len: usize) -> u64 {
        seed::derive(self.seed, "eval", &[len as u64])
    }

    /// Corpus generator for evaluation at context length `len`.
    pub fn corpus_config(&self, train: &CorpusConfig, len: usize) -> CorpusConfig {
        CorpusConfig {
            n_triplets: self.n_examples_per_length,
            seed: self.corpus_seed(len),
            ..train.at_length(len)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub context_lengths: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub n_correct: Vec<usize>,
    pub n_examples: usize,
    /// `−mean(A_t)` over greedy long-context answers, per length.
    pub mean_rkl: Vec<f64>,
    /// `−mean(A_t)` pooled over every length.
    pub mean_rkl_overall: f64,
    pub decode: String,
    pub answer_len: usize,
}

/// Outcome for one triplet: exact match and the advantages of the greedy answer.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub correct: bool,
    pub answer: Vec<u32>,
    pub advantages: Vec<f64>,
}

/// Greedy-decodes `len(gold)` tokens under the long context and scores them
/// under the short one.
pub fn score_triplet<T: Scalar>(state: &ModelState<T>, t: &Triplet) -> Result<Scored> {
    let g = state.sample_response(&t.student_prompt(), SampleParams::greedy(t.gold_answer.len()))?;
    let student: Vec<f64> = g.logps.iter().map(|&l| crate::distill::floor_logp(l)).collect();
    let teacher = teacher_logprobs(state, t, &g.tokens)?;
    let adv = compute_advantages(&teacher, &student, None)?;
    Ok(Scored {
        correct: g.tokens == t.gold_answer,
        answer: g.tokens,
        advantages: adv.values,
    })
}

pub fn score_corpus<T: Scalar>(state: &ModelState<T>, triplets: &[Triplet]) -> Result<Vec<Scored>> {
    triplets.par_iter().map(|t| score_triplet(state, t)).collect()
}

/// Fails if any evaluation id also names a training triplet.
pub fn check_held_out(train_ids: &HashSet<String>, eval: &[Triplet]) -> Result<()> {
    match eval.iter().find(|t| train_ids.contains(&t.id)) {
        Some(t) => Err(Error::Data(format!(
            "evaluation triplet {} overlaps the training corpus",
            t.id
        ))),
        None => Ok(()),
    }
}

fn mean_neg(adv: &[f64]) -> f64 {
    if adv.is_empty() {
        0.0
    } else {
        -adv.iter().sum::<f64>() / adv.len() as f64
    }
}

/// Accuracy and reverse-KL at every configured length on freshly generated,
/// held-out corpora.
pub fn eval_retrieval<T: Scalar>(
    state: &ModelState<T>,
    train: &CorpusConfig,
    cfg: &EvalConfig,
    checkpoint: &str,
) -> Result<EvalReport> {
    cfg.validate(train, state.config.max_seq_len)?;
    if cfg.context_lengths.iter().any(|&l| cfg.corpus_seed(l) == train.seed) {
        return Err(Error::Data("evaluation seed collides with the training seed".into()));
    }
    let mut report = EvalReport {
        checkpoint: checkpoint.to_string(),
        context_lengths: cfg.context_lengths.clone(),
        accuracy: Vec::new(),
        n_correct: Vec::new(),
        n_examples: cfg.n_examples_per_length,
        mean_rkl: Vec::new(),
        mean_rkl_overall: 0.0,
        decode: "greedy".into(),
        answer_len: train.value_len,
    };
    let mut pooled = Vec::new();
    for &len in &cfg.context_lengths {
        let corpus = build_corpus(&cfg.corpus_config(train, len))?;
        let scored = score_corpus(state, &corpus.triplets)?;
        let correct = scored.iter().filter(|s| s.correct).count();
        let adv: Vec<f64> = scored.iter().flat_map(|s| s.advantages.iter().copied()).collect();
        report.n_correct.push(correct);
        report.accuracy.push(correct as f64 / scored.len() as f64);
        report.mean_rkl.push(mean_neg(&adv));
        pooled.extend(adv);
    }
    report.mean_rkl_overall = mean_neg(&pooled);
    Ok(report)
}

/// Same as [`eval_retrieval`] over a caller-supplied corpus; ids must not
/// appear in `train_ids`.
pub fn eval_corpus<T: Scalar>(state: &ModelState<T>, corpus: &Corpus, train_ids: &HashSet<String>) -> Result<(f64, f64)> {
    check_held_out(train_ids, &corpus.triplets)?;
    if corpus.triplets.is_empty() {
        return Err(Error::Data("evaluation corpus is empty".into()));
    }
    let scored = score_corpus(state, &corpus.triplets)?;
    let acc = scored.iter().filter(|s| s.correct).count() as f64 / scored.len() as f64;
    let adv: Vec<f64> = scored.iter().flat_map(|s| s.advantages.iter().copied()).collect();
    Ok((acc, mean_neg(&adv)))
}

/// Accuracy with contexts exactly `short_len` long.
pub fn eval_short<T: Scalar>(state: &ModelState<T>, train: &CorpusConfig, cfg: &EvalConfig) -> Result<f64> {
    let short = EvalConfig {
        context_lengths: vec![train.short_len],
        ..cfg.clone()
    };
    Ok(eval_retrieval(state, train, &short, "")?.accuracy[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreservationReport {
    pub short_len: usize,
    pub short_acc_before: f64,
    pub short_acc_after: f64,
    pub delta: f64,
}

pub fn preservation_report<T: Scalar>(
    before: &ModelState<T>,
    after: &ModelState<T>,
    train: &CorpusConfig,
    cfg: &EvalConfig,
) -> Result<PreservationReport> {
    if before.config != after.config {
        return Err(Error::Config("states have different model configurations".into()));
    }
    let b = eval_short(before, train, cfg)?;
    let a = eval_short(after, train, cfg)?;
    Ok(PreservationReport {
        short_len: train.short_len,
        short_acc_before: b,
        short_acc_after: a,
        delta: a - b,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(e.to_string())
}

pub fn write_preservation_csv<W: Write>(r: &PreservationReport, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(PRESERVATION_CSV_HEADER.split(',')).map_err(csv_err)?;
    w.serialize(r).map_err(csv_err)?;
    w.flush().map_err(|e| Error::Data(e.to_string()))
}

pub fn read_preservation_csv(text: &str) -> Result<PreservationReport> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .next()
        .ok_or_else(|| Error::Data("preservation CSV has no rows".into()))?
        .map_err(csv_err)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub length: usize,
    pub acc_base: f64,
    pub acc_ours: f64,
    pub acc_sft: f64,
    pub delta_ours: f64,
    pub delta_sft: f64,
}

/// Per-length accuracy deltas of the distilled and Long-SFT checkpoints over the base.
pub fn length_sweep_compare(base: &EvalReport, ours: &EvalReport, sft: &EvalReport) -> Result<Vec<CompareRow>> {
    for r in [ours, sft] {
        if r.context_lengths != base.context_lengths || r.accuracy.len() != base.accuracy.len() {
            return Err(Error::Shape(format!(
                "length axis {:?} of {} differs from {:?}",
                r.context_lengths, r.checkpoint, base.context_lengths
            )));
        }
    }
    Ok(base
        .context_lengths
        .iter()
        .enumerate()
        .map(|(i, &length)| CompareRow {
            length,
            acc_base: base.accuracy[i],
            acc_ours: ours.accuracy[i],
            acc_sft: sft.accuracy[i],
            delta_ours: ours.accuracy[i] - base.accuracy[i],
            delta_sft: sft.accuracy[i] - base.accuracy[i],
        })
        .collect())
}

pub fn write_compare_csv<W: Write>(rows: &[CompareRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(COMPARE_CSV_HEADER.split(',')).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}
