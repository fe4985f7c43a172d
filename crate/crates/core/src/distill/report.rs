use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{compute_advantages, teacher_logprobs, Rollout, NEAR_ZERO};
use crate::error::{Error, Result};
use crate::nn::{ModelState, Scalar};
use crate::taskgen::{Triplet, Vocab};

pub const ADVANTAGE_CSV_HEADER: &str = "position,token,text,student_logp,teacher_logp,advantage,bucket";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bucket {
    /// The short context favours the token more than the long one does.
    Positive,
    /// The long context favours a token the short context does not support.
    Negative,
    NearZero,
}

impl Bucket {
    pub fn of(a: f64) -> Bucket {
        if a > NEAR_ZERO {
            Bucket::Positive
        } else if a < -NEAR_ZERO {
            Bucket::Negative
        } else {
            Bucket::NearZero
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bucket::Positive => "positive",
            Bucket::Negative => "negative",
            Bucket::NearZero => "near-zero",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRow {
    pub position: usize,
    pub token: u32,
    pub text: String,
    pub student_logp: f64,
    pub teacher_logp: f64,
    pub advantage: f64,
    pub bucket: Bucket,
}

/// Per-token view of one rollout's advantages (no clipping).
pub fn advantage_report<T: Scalar>(
    state: &ModelState<T>,
    triplet: &Triplet,
    rollout: &Rollout,
    vocab: Option<&Vocab>,
) -> Result<Vec<AdvantageRow>> {
    if rollout.triplet_id != triplet.id {
        return Err(Error::Data(format!(
            "rollout for {} does not belong to triplet {}",
            rollout.triplet_id, triplet.id
        )));
    }
    let tl = teacher_logprobs(state, triplet, &rollout.response)?;
    let adv = compute_advantages(&tl, &rollout.student_logps, None)?;
    Ok(rollout
        .response
        .iter()
        .enumerate()
        .map(|(i, &tok)| AdvantageRow {
            position: i,
            token: tok,
            text: vocab.map(|v| v.token(tok).to_string()).unwrap_or_default(),
            student_logp: rollout.student_logps[i],
            teacher_logp: tl[i],
            advantage: adv.values[i],
            bucket: Bucket::of(adv.values[i]),
        })
        .collect())
}

pub fn write_advantage_csv<W: Write>(rows: &[AdvantageRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(ADVANTAGE_CSV_HEADER.split(','))
        .map_err(|e| Error::Data(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))
}
