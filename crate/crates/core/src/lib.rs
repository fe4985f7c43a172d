//! On-policy self-distillation for long-context retrieval.
//!
//! A tiny decoder-only transformer answers key/value retrieval queries over a
//! long synthetic document. The same model, shown only a short window around
//! the evidence, scores the long-context answers token by token; the
//! log-ratio of those scores is the advantage of a policy-gradient update.

pub mod cli;
pub mod distill;
pub mod error;
pub mod evalharness;
pub mod nn;
pub mod oracle;
pub mod pretrain;
pub mod seed;
pub mod taskgen;

pub use error::{Error, Result};
