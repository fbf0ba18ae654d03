//! Straightforward per-position reference implementations used as oracles.
#![allow(dead_code)]

pub mod naive;

use archlab_core::data::{split_domains, synth, Corpus, Tokenizer};

/// Two training domains and two held-out ones, as in the shipped toy corpus.
pub fn toy_corpus(docs_per_domain: usize) -> (Corpus, Tokenizer) {
    let raw = synth::generate(synth::DOMAINS, docs_per_domain, 1);
    let corpus = split_domains(
        &raw,
        &["prose".into(), "records".into()],
        0.1,
        &["dialog".into(), "arith".into()],
        1,
    )
    .unwrap();
    let tok = Tokenizer::char_level(corpus.all_texts());
    (corpus, tok)
}
