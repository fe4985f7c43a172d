//! Training and evaluation triplets built from synthetic long documents.
//!
//! Construction runs in reverse: a long document full of key/value facts is
//! generated first, a contiguous short window around one fact is cut out, and
//! a templated query about that fact is attached. The query is answerable from
//! both the long document and the short window.

mod corpus;
mod vocab;

pub use corpus::{
    build_corpus, extract_short, Alphabet, gen_document, gen_qa_example, gen_query, read_corpus, validate_triplet,
    write_corpus, Corpus, CorpusConfig, CorpusHeader, Fact, FillerStyle, QaExample, Triplet,
    CORPUS_FILE, CORPUS_FORMAT_VERSION, HEADER_FILE,
};
pub use vocab::{split_words, Vocab, EOS_TOKEN, KEY_SLOT, MAX_VOCAB};
