use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::config::RunConfig;
use super::{gate_failed, Common, TrainMode};
use crate::distill::{self, advantage_report, write_advantage_csv, Bucket, Teacher};
use crate::error::{Error, Result};
use crate::evalharness::{
    eval_retrieval, eval_short, length_sweep_compare, preservation_report, write_compare_csv,
    write_preservation_csv, EvalReport,
};
use crate::nn::{checkpoint, DType, ModelState, Scalar};
use crate::oracle;
use crate::pretrain::pretrain_short;
use crate::seed;
use crate::taskgen::{build_corpus, read_corpus, write_corpus, Corpus};

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn open(c: &Common) -> Result<Run> {
        let (cfg, text) = RunConfig::load(&c.config)?;
        let cfg = cfg.resolve(c.seed)?;
        fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
        let echo = c.out.join("config.toml");
        fs::write(&echo, &text).map_err(|e| Error::io(&echo, e))?;
        let resolved = c.out.join("resolved_config.json");
        write_json(&resolved, &cfg)?;
        Ok(Run {
            cfg,
            out: c.out.clone(),
        })
    }

    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn dir(&self, p: &Path) -> Result<PathBuf> {
        let d = self.path(p);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    fn metrics(&self, file: &str) -> Result<PathBuf> {
        Ok(self.dir(&self.cfg.paths.metrics)?.join(file))
    }

    fn checkpoint(&self, file: &str) -> Result<PathBuf> {
        Ok(self.dir(&self.cfg.paths.checkpoints)?.join(file))
    }

    fn corpus(&self) -> Result<Corpus> {
        let corpus = read_corpus(&self.path(&self.cfg.paths.corpus))?;
        if corpus.config() != &self.cfg.corpus {
            return Err(Error::Data(
                "corpus on disk was generated from a different [corpus] configuration".into(),
            ));
        }
        Ok(corpus)
    }

    fn load<T: Scalar>(&self, path: &Path) -> Result<ModelState<T>> {
        let state = checkpoint::load(path)?.into_typed::<T>()?;
        if state.config != self.cfg.model {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different [model] configuration",
                path.display()
            )));
        }
        Ok(state)
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable report");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_csv<S: Serialize>(path: &Path, header: &str, rows: &[S]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(header.split(',')).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

pub fn gen_data(c: &Common) -> Result<Value> {
    let run = Run::open(c)?;
    let corpus = build_corpus(&run.cfg.corpus)?;
    let dir = run.dir(&run.cfg.paths.corpus)?;
    write_corpus(&corpus, &dir)?;
    Ok(json!({
        "command": "gen-data",
        "corpus": dir,
        "n_triplets": corpus.triplets.len(),
        "vocab_size": corpus.vocab().len(),
    }))
}

macro_rules! by_dtype {
    ($dtype:expr, $f:ident($($arg:expr),*)) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn pretrain(c: &Common) -> Result<Value> {
    let run = Run::open(c)?;
    by_dtype!(run.cfg.model.dtype, pretrain_typed(&run))
}

fn pretrain_typed<T: Scalar>(run: &Run) -> Result<Value> {
    let cfg = &run.cfg;
    let pc = cfg.pretrain()?;
    let mut state = ModelState::<T>::init(cfg.model.clone(), cfg.init_seed())?;
    let log = pretrain_short(&mut state, &cfg.corpus, pc, |_, _| Ok(()))?;
    write_csv(&run.metrics("pretrain.csv")?, distill::SFT_CSV_HEADER, &log)?;
    let ckpt = run.checkpoint("base.ckpt")?;
    checkpoint::save(&state, &ckpt)?;

    let report = eval_retrieval(&state, &cfg.corpus, &cfg.eval, "base")?;
    write_json(&run.metrics("eval_base.json")?, &report)?;
    let short_acc = eval_short(&state, &cfg.corpus, &cfg.eval)?;
    let longest = *cfg.eval.context_lengths.last().expect("validated non-empty");
    let long_acc = *report.accuracy.last().expect("one accuracy per length");
    let gap = short_acc - long_acc;
    let passed = short_acc >= cfg.gate.min_short_acc && gap >= cfg.gate.min_gap;
    let gate = json!({
        "short_len": cfg.corpus.short_len,
        "short_acc": short_acc,
        "longest_len": longest,
        "long_acc": long_acc,
        "gap": gap,
        "min_short_acc": cfg.gate.min_short_acc,
        "min_gap": cfg.gate.min_gap,
        "passed": passed,
    });
    write_json(&run.metrics("pretrain_gate.json")?, &gate)?;
    if !passed {
        return Err(gate_failed(format!(
            "short accuracy {short_acc:.3} (need >= {}), gap to length {longest} {gap:.3} (need >= {}); \
             increase pretrain.steps or adjust the recipe",
            cfg.gate.min_short_acc, cfg.gate.min_gap
        )));
    }
    Ok(json!({"command": "pretrain", "checkpoint": ckpt, "gate": gate}))
}

pub fn train(c: &Common, mode: Option<TrainMode>, init: Option<PathBuf>) -> Result<Value> {
    let run = Run::open(c)?;
    let mode = match (mode, run.cfg.mode) {
        (Some(m), _) => m,
        (None, Some(super::Mode::Opsdl)) => TrainMode::Opsdl,
        (None, Some(super::Mode::LongSft)) => TrainMode::LongSft,
        _ => return Err(Error::Config("pass --mode opsdl|long-sft or set mode in the config".into())),
    };
    let init = match init {
        Some(p) => p,
        None => run.checkpoint("base.ckpt")?,
    };
    by_dtype!(run.cfg.model.dtype, train_typed(&run, mode, &init))
}

fn train_typed<T: Scalar>(run: &Run, mode: TrainMode, init: &Path) -> Result<Value> {
    let dc = run.cfg.distill()?.clone();
    let corpus = run.corpus()?;
    let mut state = run.load::<T>(init)?.with_fresh_optimizer();
    let every = dc.checkpoint_every;
    let (name, steps) = match mode {
        TrainMode::Opsdl => ("opsdl", dc.steps),
        TrainMode::LongSft => ("long-sft", dc.steps),
    };
    let save_periodic = |s: &ModelState<T>, step: usize| -> Result<()> {
        if every > 0 && (step + 1).is_multiple_of(every) {
            checkpoint::save(s, &run.checkpoint(&format!("{name}-step{:06}.ckpt", step + 1))?)?;
        }
        Ok(())
    };
    let last = match mode {
        TrainMode::Opsdl => {
            let log = distill::train(&mut state, &dc, &corpus.triplets, Teacher::Current, |s, st| {
                save_periodic(s, st.step)
            })?;
            write_csv(&run.metrics("train_opsdl.csv")?, distill::STEP_CSV_HEADER, &log)?;
            log.last().map(|s| serde_json::to_value(s).expect("serializable"))
        }
        TrainMode::LongSft => {
            let targets = distill::sft_targets(&state, &corpus.triplets, dc.max_new)?;
            let schedule = distill::batch_schedule(targets.len(), dc.batch_triplets, steps, dc.seed);
            let log = distill::train_sft(
                &mut state,
                steps,
                |i| Ok(schedule[i].iter().map(|&j| targets[j].clone()).collect()),
                |_| dc.lr,
                |s, st| save_periodic(s, st.step),
            )?;
            write_csv(&run.metrics("train_long-sft.csv")?, distill::SFT_CSV_HEADER, &log)?;
            log.last().map(|s| serde_json::to_value(s).expect("serializable"))
        }
    };
    let ckpt = run.checkpoint(&format!("{name}.ckpt"))?;
    checkpoint::save(&state, &ckpt)?;
    Ok(json!({"command": "train", "mode": name, "steps": steps, "checkpoint": ckpt, "last": last}))
}

fn report_name(checkpoint: &Path) -> String {
    checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "checkpoint".into())
}

pub fn eval(c: &Common, checkpoint: &Path, name: Option<String>) -> Result<Value> {
    let run = Run::open(c)?;
    let name = name.unwrap_or_else(|| report_name(checkpoint));
    let report = by_dtype!(run.cfg.model.dtype, eval_typed(&run, checkpoint, &name))?;
    let path = run.metrics(&format!("eval_{name}.json"))?;
    write_json(&path, &report)?;
    Ok(json!({"command": "eval", "report": path, "accuracy": report.accuracy}))
}

fn eval_typed<T: Scalar>(run: &Run, checkpoint: &Path, name: &str) -> Result<EvalReport> {
    let state = run.load::<T>(checkpoint)?;
    eval_retrieval(&state, &run.cfg.corpus, &run.cfg.eval, name)
}

pub fn compare(c: &Common, base: Option<PathBuf>, ours: Option<PathBuf>, sft: Option<PathBuf>) -> Result<Value> {
    let run = Run::open(c)?;
    let base = base.map_or_else(|| run.checkpoint("base.ckpt"), Ok)?;
    let ours = ours.map_or_else(|| run.checkpoint("opsdl.ckpt"), Ok)?;
    let sft = sft.map_or_else(|| run.checkpoint("long-sft.ckpt"), Ok)?;
    by_dtype!(run.cfg.model.dtype, compare_typed(&run, &base, &ours, &sft))
}

fn compare_typed<T: Scalar>(run: &Run, base: &Path, ours: &Path, sft: &Path) -> Result<Value> {
    let cfg = &run.cfg;
    let states = [run.load::<T>(base)?, run.load::<T>(ours)?, run.load::<T>(sft)?];
    let mut reports = Vec::new();
    for (state, name) in states.iter().zip(["base", "ours", "sft"]) {
        let r = eval_retrieval(state, &cfg.corpus, &cfg.eval, name)?;
        write_json(&run.metrics(&format!("eval_{name}.json"))?, &r)?;
        reports.push(r);
    }
    let rows = length_sweep_compare(&reports[0], &reports[1], &reports[2])?;
    write_compare_csv(&rows, create(&run.metrics("compare.csv")?)?)?;

    let keep_ours = preservation_report(&states[0], &states[1], &cfg.corpus, &cfg.eval)?;
    write_preservation_csv(&keep_ours, create(&run.metrics("preservation_opsdl.csv")?)?)?;
    let keep_sft = preservation_report(&states[0], &states[2], &cfg.corpus, &cfg.eval)?;
    write_preservation_csv(&keep_sft, create(&run.metrics("preservation_long-sft.csv")?)?)?;

    // Recovery of the short/long gap at the longest length.
    let last = rows.last().expect("non-empty length axis");
    let gap = keep_ours.short_acc_before - last.acc_base;
    let recovery = |acc: f64| if gap > 0.0 { (acc - last.acc_base) / gap } else { f64::NAN };
    let summary = json!({
        "longest_len": last.length,
        "short_acc_base": keep_ours.short_acc_before,
        "gap": gap,
        "acc_longest": {"base": last.acc_base, "ours": last.acc_ours, "sft": last.acc_sft},
        "recovery_ours": recovery(last.acc_ours),
        "recovery_sft": recovery(last.acc_sft),
        "short_delta_ours": keep_ours.delta,
        "short_delta_sft": keep_sft.delta,
    });
    write_json(&run.metrics("summary.json")?, &summary)?;
    Ok(json!({"command": "compare", "summary": summary}))
}

pub fn advantages(c: &Common, checkpoint: &Path, triplet: &str, index: u64) -> Result<Value> {
    let run = Run::open(c)?;
    by_dtype!(run.cfg.model.dtype, advantages_typed(&run, checkpoint, triplet, index))
}

fn advantages_typed<T: Scalar>(run: &Run, checkpoint: &Path, id: &str, index: u64) -> Result<Value> {
    let dc = run.cfg.distill()?;
    let corpus = run.corpus()?;
    let t = corpus
        .find(id)
        .ok_or_else(|| Error::Data(format!("unknown triplet id {id:?}")))?;
    let state = run.load::<T>(checkpoint)?;
    let s = seed::derive(dc.seed, "advantages", &[index]);
    let ro = distill::rollout(&state, t, dc.max_new, dc.temperature, s)?;
    let rows = advantage_report(&state, t, &ro, Some(corpus.vocab()))?;
    let path = run.metrics(&format!("advantages_{id}_{index}.csv"))?;
    write_advantage_csv(&rows, create(&path)?)?;
    let frac = |b: Bucket| {
        if rows.is_empty() {
            0.0
        } else {
            rows.iter().filter(|r| r.bucket == b).count() as f64 / rows.len() as f64
        }
    };
    Ok(json!({
        "command": "advantages",
        "triplet": id,
        "response": corpus.vocab().detokenize(&ro.response),
        "gold": corpus.vocab().detokenize(&t.gold_answer),
        "csv": path,
        "fraction_positive": frac(Bucket::Positive),
        "fraction_negative": frac(Bucket::Negative),
        "fraction_near_zero": frac(Bucket::NearZero),
    }))
}

fn save_report<S: Serialize>(out: Option<PathBuf>, file: &str, report: &S) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join(file), report)?;
    }
    Ok(())
}

pub fn grad_check(seed: u64, draws: usize, out: Option<PathBuf>) -> Result<Value> {
    let report = oracle::grad_check_suite(seed, draws)?;
    save_report(out, "grad_check.json", &report)?;
    let summary = json!({
        "command": "grad-check",
        "passed": report.passed,
        "worst_rel_err": report.worst_rel_err,
        "tolerance": report.tolerance,
        "draws": draws,
    });
    if !report.passed {
        return Err(gate_failed(summary.to_string()));
    }
    Ok(summary)
}

pub fn estimator_check(seed: u64, states: usize, samples: usize, out: Option<PathBuf>) -> Result<Value> {
    let report = oracle::estimator_suite(seed, states, samples)?;
    save_report(out, "estimator_check.json", &report)?;
    let summary = json!({
        "command": "estimator-check",
        "passed": report.passed,
        "max_z": report.max_z,
        "z_limit": report.z_limit,
        "states": states,
        "n_samples": samples,
    });
    if !report.passed {
        return Err(gate_failed(summary.to_string()));
    }
    Ok(summary)
}

