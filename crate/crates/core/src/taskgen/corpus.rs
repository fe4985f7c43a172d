use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, KEY_SLOT};
use crate::error::{Error, Result};
use crate::seed;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const HEADER_FILE: &str = "corpus.header.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FillerStyle {
    RandomWords,
    RepeatedTemplate,
}

/// Whether fact values use their own tokens or are drawn from the key tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alphabet {
    #[default]
    Separate,
    /// One entity alphabet; every key and value in a document is a distinct
    /// entity, so value tokens carry no class signal of their own.
    Shared,
}

fn one() -> usize {
    1
}
fn default_keys() -> usize {
    24
}
fn default_values() -> usize {
    16
}
fn default_filler() -> usize {
    24
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_triplets: usize,
    pub long_len: usize,
    pub short_len: usize,
    pub n_facts_per_doc: usize,
    pub filler_style: FillerStyle,
    #[serde(default)]
    pub seed: u64,
    pub query_templates: Vec<String>,
    #[serde(default = "one")]
    pub key_len: usize,
    #[serde(default = "one")]
    pub value_len: usize,
    #[serde(default = "default_keys")]
    pub n_keys: usize,
    /// Size of the value alphabet; unused with [`Alphabet::Shared`].
    #[serde(default = "default_values")]
    pub n_values: usize,
    #[serde(default)]
    pub alphabet: Alphabet,
    #[serde(default = "default_filler")]
    pub n_filler_words: usize,
    /// Probability that a filler position holds a stray value token instead
    /// of a filler word, so that the values present in a document do not by
    /// themselves reveal the answer.
    #[serde(default)]
    pub distractor_rate: f64,
}

impl CorpusConfig {
    pub fn fact_len(&self) -> usize {
        self.key_len + self.value_len
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_facts_per_doc == 0 {
            return bad("n_facts_per_doc must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad(format!("distractor_rate {} is not a probability", self.distractor_rate));
        }
        if self.key_len == 0 || self.value_len == 0 {
            return bad("key_len and value_len must be >= 1".into());
        }
        if self.short_len < self.fact_len() {
            return bad(format!("short_len {} cannot hold a fact", self.short_len));
        }
        if self.short_len > self.long_len {
            return bad(format!(
                "short_len {} exceeds long_len {}",
                self.short_len, self.long_len
            ));
        }
        if self.n_facts_per_doc * self.fact_len() > self.long_len {
            return bad(format!(
                "{} facts of {} tokens do not fit in {} tokens",
                self.n_facts_per_doc,
                self.fact_len(),
                self.long_len
            ));
        }
        match self.alphabet {
            Alphabet::Separate => {
                let distinct_keys = (self.n_keys as f64).powi(self.key_len as i32);
                if (self.n_facts_per_doc as f64) > distinct_keys {
                    return bad("not enough distinct keys for n_facts_per_doc".into());
                }
                if self.n_values == 0 {
                    return bad("n_values must be >= 1".into());
                }
            }
            Alphabet::Shared => {
                if self.key_len != 1 || self.value_len != 1 {
                    return bad("a shared alphabet needs single-token keys and values".into());
                }
                if self.n_keys < 2 * self.n_facts_per_doc {
                    return bad(format!(
                        "a shared alphabet needs n_keys >= 2 * n_facts_per_doc = {}",
                        2 * self.n_facts_per_doc
                    ));
                }
            }
        }
        if self.query_templates.is_empty() {
            return bad("query_templates must be non-empty".into());
        }
        if let Some(t) = self
            .query_templates
            .iter()
            .find(|t| !super::vocab::split_words(t).iter().any(|w| w == KEY_SLOT))
        {
            return bad(format!("template {t:?} has no {KEY_SLOT} slot"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Result<Vocab> {
        let n_values = match self.alphabet {
            Alphabet::Separate => Some(self.n_values),
            Alphabet::Shared => None,
        };
        Vocab::build(&self.query_templates, self.n_filler_words, self.n_keys, n_values)
    }

    /// Fact count for a document of `len` tokens at this config's fact density.
    pub fn facts_for_length(&self, len: usize) -> usize {
        let scaled = (self.n_facts_per_doc as f64 * len as f64 / self.long_len as f64).round() as usize;
        scaled.clamp(1, (len / self.fact_len()).max(1))
    }

    /// Same generator at a different document length, fact density held fixed.
    pub fn at_length(&self, len: usize) -> CorpusConfig {
        CorpusConfig {
            long_len: len,
            short_len: self.short_len.min(len),
            n_facts_per_doc: self.facts_for_length(len),
            ..self.clone()
        }
    }

    /// Longest query any template can render to.
    pub fn max_query_len(&self) -> usize {
        self.query_templates
            .iter()
            .map(|t| {
                super::vocab::split_words(t)
                    .iter()
                    .map(|w| if w == KEY_SLOT { self.key_len } else { 1 })
                    .sum::<usize>()
            })
            .max()
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub key: Vec<u32>,
    pub value: Vec<u32>,
    /// Offset of the first key token in the document.
    pub position: usize,
}

impl Fact {
    pub fn len(&self) -> usize {
        self.key.len() + self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn end(&self) -> usize {
        self.position + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub id: String,
    pub long_context: Vec<u32>,
    pub short_span: (usize, usize),
    pub short_context: Vec<u32>,
    pub query: Vec<u32>,
    pub gold_answer: Vec<u32>,
    pub evidence: Fact,
}

impl Triplet {
    /// Student conditioning: long context followed by the query.
    pub fn student_prompt(&self) -> Vec<u32> {
        [self.long_context.as_slice(), &self.query].concat()
    }

    /// Teacher conditioning: short window followed by the query.
    pub fn teacher_prompt(&self) -> Vec<u32> {
        [self.short_context.as_slice(), &self.query].concat()
    }
}

fn random_seq<R: Rng>(alphabet: &[u32], len: usize, rng: &mut R) -> Vec<u32> {
    (0..len).map(|_| *alphabet.choose(rng).expect("non-empty alphabet")).collect()
}

/// A document of exactly `cfg.long_len` tokens with `cfg.n_facts_per_doc`
/// non-overlapping facts placed uniformly at random.
pub fn gen_document<R: Rng>(cfg: &CorpusConfig, vocab: &Vocab, rng: &mut R) -> Result<(Vec<u32>, Vec<Fact>)> {
    let (n, flen, len) = (cfg.n_facts_per_doc, cfg.fact_len(), cfg.long_len);
    if n == 0 || n * flen > len {
        return Err(Error::Data(format!(
            "{n} facts of {flen} tokens cannot be placed without overlap in {len} tokens"
        )));
    }
    let mut doc: Vec<u32> = match cfg.filler_style {
        FillerStyle::RandomWords => random_seq(vocab.filler(), len, rng),
        FillerStyle::RepeatedTemplate => (0..len).map(|i| vocab.filler()[i % vocab.filler().len()]).collect(),
    };
    let mut keys: Vec<Vec<u32>> = Vec::with_capacity(n);
    let mut values: Vec<Vec<u32>> = Vec::with_capacity(n);
    // Tokens stray values are drawn from: the value alphabet, or the entities
    // no fact in this document uses.
    let mut stray: Vec<u32> = vocab.values().to_vec();
    match cfg.alphabet {
        Alphabet::Shared => {
            let picks = index::sample(rng, vocab.keys().len(), 2 * n).into_vec();
            let used: HashSet<usize> = picks.iter().copied().collect();
            for pair in picks.chunks_exact(2) {
                keys.push(vec![vocab.keys()[pair[0]]]);
                values.push(vec![vocab.keys()[pair[1]]]);
            }
            stray = (0..vocab.keys().len())
                .filter(|i| !used.contains(i))
                .map(|i| vocab.keys()[i])
                .collect();
        }
        Alphabet::Separate if cfg.key_len == 1 => {
            for i in index::sample(rng, vocab.keys().len(), n) {
                keys.push(vec![vocab.keys()[i]]);
            }
        }
        Alphabet::Separate => {
            let mut seen = HashSet::new();
            while keys.len() < n {
                let k = random_seq(vocab.keys(), cfg.key_len, rng);
                if seen.insert(k.clone()) {
                    keys.push(k);
                }
            }
        }
    }
    if cfg.alphabet == Alphabet::Separate {
        values = (0..n).map(|_| random_seq(vocab.values(), cfg.value_len, rng)).collect();
    }
    if cfg.distractor_rate > 0.0 && !stray.is_empty() {
        for tok in doc.iter_mut() {
            if rng.random_bool(cfg.distractor_rate) {
                *tok = stray[rng.random_range(0..stray.len())];
            }
        }
    }

    // Non-overlapping placements of n intervals of length flen in [0, len)
    // biject with n-subsets of [0, len - n*flen + n) via p_i = c_i + i*(flen-1).
    let slots = len - n * flen + n;
    let mut picks: Vec<usize> = index::sample(rng, slots, n).into_vec();
    picks.sort_unstable();
    let mut facts = Vec::with_capacity(n);
    for (i, ((c, key), value)) in picks.into_iter().zip(keys).zip(values).enumerate() {
        let position = c + i * (flen - 1);
        doc[position..position + key.len()].copy_from_slice(&key);
        doc[position + key.len()..position + flen].copy_from_slice(&value);
        facts.push(Fact { key, value, position });
    }
    Ok((doc, facts))
}

/// A `short_len` window containing `facts[target]`, offset drawn uniformly
/// among all valid placements.
pub fn extract_short<R: Rng>(
    doc: &[u32],
    facts: &[Fact],
    target: usize,
    short_len: usize,
    rng: &mut R,
) -> Result<((usize, usize), Vec<u32>)> {
    let fact = facts
        .get(target)
        .ok_or_else(|| Error::Data(format!("no fact with index {target}")))?;
    if short_len > doc.len() || short_len < fact.len() || fact.end() > doc.len() {
        return Err(Error::Data(format!(
            "cannot place a {short_len}-token window around a {}-token fact in a {}-token document",
            fact.len(),
            doc.len()
        )));
    }
    let lo = fact.end().saturating_sub(short_len);
    let hi = fact.position.min(doc.len() - short_len);
    if lo > hi {
        return Err(Error::Data("no valid window placement".into()));
    }
    let start = rng.random_range(lo..=hi);
    let span = (start, start + short_len);
    Ok((span, doc[span.0..span.1].to_vec()))
}

/// Query naming the fact's key (never its value) and the gold answer.
pub fn gen_query<R: Rng>(fact: &Fact, templates: &[String], vocab: &Vocab, rng: &mut R) -> Result<(Vec<u32>, Vec<u32>)> {
    let template = templates
        .choose(rng)
        .ok_or_else(|| Error::Config("query_templates must be non-empty".into()))?;
    Ok((vocab.render(template, &fact.key)?, fact.value.clone()))
}

/// Checks contiguity, answerability and absence of answer leakage.
pub fn validate_triplet(t: &Triplet) -> Result<()> {
    let fail = |m: &str| Err(Error::Data(format!("triplet {}: {m}", t.id)));
    let (s, e) = t.short_span;
    if s >= e || e > t.long_context.len() {
        return fail("short span out of bounds");
    }
    if t.long_context[s..e] != t.short_context[..] {
        return fail("short context is not a contiguous slice of the long context");
    }
    let f = &t.evidence;
    if f.position < s || f.end() > e {
        return fail("evidence fact is not inside the short span");
    }
    if t.long_context[f.position..f.position + f.key.len()] != f.key[..]
        || t.long_context[f.position + f.key.len()..f.end()] != f.value[..]
    {
        return fail("evidence fact does not match the document");
    }
    if t.gold_answer != f.value {
        return fail("gold answer differs from the evidence value");
    }
    if t.gold_answer.iter().any(|g| t.query.contains(g)) {
        return fail("gold answer token leaks into the query");
    }
    Ok(())
}

fn gen_triplet(cfg: &CorpusConfig, vocab: &Vocab, index: usize) -> Result<Triplet> {
    let mut rng = seed::stream(cfg.seed, "triplet", &[index as u64]);
    let (doc, facts) = gen_document(cfg, vocab, &mut rng)?;
    let target = rng.random_range(0..facts.len());
    let (short_span, short_context) = extract_short(&doc, &facts, target, cfg.short_len, &mut rng)?;
    let (query, gold_answer) = gen_query(&facts[target], &cfg.query_templates, vocab, &mut rng)?;
    Ok(Triplet {
        id: format!("{:016x}-{index:06}", cfg.seed),
        long_context: doc,
        short_span,
        short_context,
        query,
        gold_answer,
        evidence: facts[target].clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format_version: u32,
    pub config: CorpusConfig,
    pub vocab: Vocab,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub triplets: Vec<Triplet>,
}

impl Corpus {
    pub fn vocab(&self) -> &Vocab {
        &self.header.vocab
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.header.config
    }

    pub fn find(&self, id: &str) -> Option<&Triplet> {
        self.triplets.iter().find(|t| t.id == id)
    }
}

pub fn build_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let vocab = cfg.vocab()?;
    let triplets = (0..cfg.n_triplets)
        .into_par_iter()
        .map(|i| gen_triplet(cfg, &vocab, i))
        .collect::<Result<Vec<_>>>()?;
    for t in &triplets {
        validate_triplet(t)?;
    }
    Ok(Corpus {
        header: CorpusHeader {
            format_version: CORPUS_FORMAT_VERSION,
            config: cfg.clone(),
            vocab,
        },
        triplets,
    })
}

/// A document followed by questions about distinct facts in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaExample {
    pub document: Vec<u32>,
    /// (query, gold answer) pairs in asking order.
    pub questions: Vec<(Vec<u32>, Vec<u32>)>,
}

impl QaExample {
    /// Document followed by the first query.
    pub fn prompt(&self) -> Vec<u32> {
        [self.document.as_slice(), &self.questions[0].0].concat()
    }
}

/// Fresh document of `len` tokens at the config's fact density plus up to
/// `n_questions` queries about distinct, uniformly chosen facts.
pub fn gen_qa_example<R: Rng>(
    cfg: &CorpusConfig,
    vocab: &Vocab,
    len: usize,
    n_questions: usize,
    rng: &mut R,
) -> Result<QaExample> {
    if n_questions == 0 {
        return Err(Error::Config("need at least one question per document".into()));
    }
    let sized = cfg.at_length(len);
    let (document, facts) = gen_document(&sized, vocab, rng)?;
    let picks = index::sample(rng, facts.len(), n_questions.min(facts.len()));
    let questions = picks
        .into_iter()
        .map(|i| gen_query(&facts[i], &cfg.query_templates, vocab, rng))
        .collect::<Result<_>>()?;
    Ok(QaExample { document, questions })
}

#[derive(Serialize, Deserialize)]
struct EvidenceRecord {
    key: Vec<u32>,
    value: Vec<u32>,
    position: usize,
}

#[derive(Serialize, Deserialize)]
struct TripletRecord {
    id: String,
    long_context: Vec<u32>,
    short_span: [usize; 2],
    query: Vec<u32>,
    gold_answer: Vec<u32>,
    evidence: EvidenceRecord,
    debug: String,
}

/// Writes `corpus.header.json` and `corpus.jsonl` into `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header_path = dir.join(HEADER_FILE);
    let header = serde_json::to_string_pretty(&corpus.header).expect("header serializes");
    fs::write(&header_path, header + "\n").map_err(|e| Error::io(&header_path, e))?;

    let path = dir.join(CORPUS_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let vocab = corpus.vocab();
    for t in &corpus.triplets {
        let rec = TripletRecord {
            id: t.id.clone(),
            long_context: t.long_context.clone(),
            short_span: [t.short_span.0, t.short_span.1],
            query: t.query.clone(),
            gold_answer: t.gold_answer.clone(),
            evidence: EvidenceRecord {
                key: t.evidence.key.clone(),
                value: t.evidence.value.clone(),
                position: t.evidence.position,
            },
            debug: format!("{} => {}", vocab.detokenize(&t.query), vocab.detokenize(&t.gold_answer)),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let header_path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: CorpusHeader =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", header_path.display())))?;
    if header.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported corpus format version {}",
            header.format_version
        )));
    }
    let path = dir.join(CORPUS_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut triplets = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TripletRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let [s, e] = rec.short_span;
        if s > e || e > rec.long_context.len() {
            return Err(Error::Data(format!("{}:{}: bad short_span", path.display(), lineno + 1)));
        }
        let t = Triplet {
            short_context: rec.long_context[s..e].to_vec(),
            id: rec.id,
            long_context: rec.long_context,
            short_span: (s, e),
            query: rec.query,
            gold_answer: rec.gold_answer,
            evidence: Fact {
                key: rec.evidence.key,
                value: rec.evidence.value,
                position: rec.evidence.position,
            },
        };
        validate_triplet(&t)?;
        triplets.push(t);
    }
    Ok(Corpus { header, triplets })
}
