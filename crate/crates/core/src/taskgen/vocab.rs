//! Word-level tokenizer fixed per corpus.
//!
//! Id 0 is always end-of-sequence. Keys and values live in their own
//! alphabets, disjoint from filler and template words, so retrieval answers
//! are unambiguous under exact match.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::EOS;

pub const EOS_TOKEN: &str = "<eos>";
pub const KEY_SLOT: &str = "{key}";
pub const MAX_VOCAB: usize = 512;

const FILLER_WORDS: &[&str] = &[
    "the", "river", "stone", "quiet", "over", "lamp", "north", "and", "garden", "slowly", "paper",
    "under", "bright", "window", "across", "cold", "market", "a", "small", "road", "hill", "after",
    "green", "house", "near", "old", "cloud", "with", "iron", "field", "before", "soft", "bridge",
    "through", "dark", "song", "along", "wide", "sea", "then", "tall", "wind", "into", "blue",
    "forest", "from", "warm", "tower",
];

/// Splits a template into words, detaching trailing punctuation.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut core = word;
        let mut tail = Vec::new();
        while let Some(c) = core.chars().last() {
            if matches!(c, '?' | '.' | ',' | '!' | ':' | ';') && core.len() > 1 {
                tail.push(c.to_string());
                core = &core[..core.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        out.push(core.to_string());
        out.extend(tail.into_iter().rev());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    filler: Vec<u32>,
    keys: Vec<u32>,
    values: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    filler: Vec<u32>,
    keys: Vec<u32>,
    values: Vec<u32>,
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            tokens: v.tokens,
            filler: v.filler,
            keys: v.keys,
            values: v.values,
        }
    }
}

impl TryFrom<VocabRepr> for Vocab {
    type Error = Error;

    fn try_from(r: VocabRepr) -> Result<Self> {
        let index: HashMap<String, u32> = r
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if index.len() != r.tokens.len() {
            return Err(Error::Data("duplicate tokens in vocabulary".into()));
        }
        if r.tokens.first().map(String::as_str) != Some(EOS_TOKEN) {
            return Err(Error::Data("vocabulary must start with <eos>".into()));
        }
        let n = r.tokens.len() as u32;
        if r.filler.iter().chain(&r.keys).chain(&r.values).any(|&i| i >= n) {
            return Err(Error::Data("vocabulary class id out of range".into()));
        }
        Ok(Vocab {
            tokens: r.tokens,
            index,
            filler: r.filler,
            keys: r.keys,
            values: r.values,
        })
    }
}

impl Vocab {
    /// `n_values == None` builds one entity alphabet ("E0", "E1", ...) that
    /// serves as both keys and values.
    pub fn build(templates: &[String], n_filler: usize, n_keys: usize, n_values: Option<usize>) -> Result<Self> {
        if n_filler == 0 || n_filler > FILLER_WORDS.len() {
            return Err(Error::Config(format!(
                "n_filler_words must be in 1..={}",
                FILLER_WORDS.len()
            )));
        }
        let mut tokens: Vec<String> = vec![EOS_TOKEN.to_string()];
        let mut index = HashMap::from([(EOS_TOKEN.to_string(), EOS)]);
        let mut intern = |w: &str, tokens: &mut Vec<String>| -> u32 {
            *index.entry(w.to_string()).or_insert_with(|| {
                tokens.push(w.to_string());
                (tokens.len() - 1) as u32
            })
        };
        for t in templates {
            for w in split_words(t) {
                if w != KEY_SLOT {
                    intern(&w, &mut tokens);
                }
            }
        }
        let filler: Vec<u32> = FILLER_WORDS[..n_filler].iter().map(|w| intern(w, &mut tokens)).collect();
        let (keys, values) = match n_values {
            Some(nv) => {
                let keys: Vec<u32> = (0..n_keys).map(|i| intern(&format!("K{i}"), &mut tokens)).collect();
                let values: Vec<u32> = (0..nv).map(|i| intern(&format!("V{i}"), &mut tokens)).collect();
                (keys, values)
            }
            None => {
                let entities: Vec<u32> = (0..n_keys).map(|i| intern(&format!("E{i}"), &mut tokens)).collect();
                (entities.clone(), entities)
            }
        };
        let n_class = n_keys + n_values.unwrap_or(0);
        if keys.iter().chain(&values).any(|&id| (id as usize) < tokens.len() - n_class) {
            return Err(Error::Config("templates must not use key or value words".into()));
        }
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary of {} tokens exceeds {MAX_VOCAB}",
                tokens.len()
            )));
        }
        Vocab::try_from(VocabRepr {
            tokens,
            filler,
            keys,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn filler(&self) -> &[u32] {
        &self.filler
    }

    pub fn keys(&self) -> &[u32] {
        &self.keys
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn is_value(&self, id: u32) -> bool {
        self.values.contains(&id)
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    /// Encodes a template, expanding the key slot into `key`.
    pub fn render(&self, template: &str, key: &[u32]) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for w in split_words(template) {
            if w == KEY_SLOT {
                out.extend_from_slice(key);
            } else {
                out.push(
                    self.id(&w)
                        .ok_or_else(|| Error::Config(format!("template word {w:?} not in vocabulary")))?,
                );
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_trailing_punctuation() {
        assert_eq!(
            split_words("What is the value of {key}?"),
            vec!["What", "is", "the", "value", "of", "{key}", "?"]
        );
    }

    #[test]
    fn classes_are_disjoint_and_eos_first() {
        let v = Vocab::build(&["find {key}".into()], 10, 5, Some(4)).unwrap();
        assert_eq!(v.token(0), EOS_TOKEN);
        for k in v.keys() {
            assert!(!v.values().contains(k) && !v.filler().contains(k));
        }
        for x in v.values() {
            assert!(!v.filler().contains(x));
        }
        assert_eq!(v.len(), 1 + 1 + 10 + 5 + 4);
    }

    #[test]
    fn shared_entities_serve_as_keys_and_values() {
        let v = Vocab::build(&["find {key}".into()], 10, 6, None).unwrap();
        assert_eq!(v.keys(), v.values());
        assert_eq!(v.token(v.keys()[2]), "E2");
        assert_eq!(v.len(), 1 + 1 + 10 + 6);
        assert!(v.keys().iter().all(|k| !v.filler().contains(k)));
    }

    #[test]
    fn serde_roundtrip() {
        let v = Vocab::build(&["recall {key} ?".into()], 8, 3, Some(3)).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn rejects_oversized_vocabulary() {
        assert!(Vocab::build(&["{key}".into()], 8, 400, Some(200)).is_err());
    }
}
