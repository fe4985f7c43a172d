//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use opsdl::nn::{DType, ModelConfig, ModelState, PosEncoding};
use opsdl::taskgen::{Fact, Triplet};

pub fn toy_config(vocab: usize, n_layers: usize, max_seq_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        n_layers,
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
    ModelState::init(toy_config(vocab, 1, 32), seed).unwrap()
}

/// A triplet over raw token ids with short window `long[span.0..span.1]`.
pub fn toy_triplet(id: &str, long: &[u32], span: (usize, usize), query: &[u32]) -> Triplet {
    Triplet {
        id: id.into(),
        long_context: long.to_vec(),
        short_span: span,
        short_context: long[span.0..span.1].to_vec(),
        query: query.to_vec(),
        gold_answer: vec![long[span.0 + 1]],
        evidence: Fact {
            key: vec![long[span.0]],
            value: vec![long[span.0 + 1]],
            position: span.0,
        },
    }
}

/// Runs the `opsdl` binary with `args`.
pub fn opsdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opsdl"))
        .args(args)
        .output()
        .expect("spawn opsdl")
}

/// Runs one subcommand against `config` writing into `out`; panics with the
/// captured stderr if it fails.
pub fn opsdl_ok(sub: &[&str], config: &Path, out: &Path) -> serde_json::Value {
    let mut args = vec!["--deterministic"];
    args.extend_from_slice(sub);
    args.extend(["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let o = opsdl(&args);
    assert!(
        o.status.success(),
        "opsdl {sub:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("json summary on stdout")
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Every subcommand runs on this configuration in seconds. Its gate is
/// disabled so the pipeline continues past pretraining.
pub fn smoke_config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

pub fn reference_config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")
}
