//! Tokenization, corpus splits and batch construction.

mod batch;
mod corpus;
pub mod synth;
mod tokenizer;

pub use batch::{
    eval_batches, make_lm_batch, make_mlm_batch, mask_count, mask_row, pack_lm_stream,
    pack_mlm_stream, BatchSampler, LabeledBatch, MaskedBatch, Objective, MASK_RATE,
};
pub use corpus::{
    load_corpus_dir, parse_documents, split_domains, write_documents, Corpus, DomainRole, Manifest,
};
pub use tokenizer::{
    is_special, Tokenizer, TokenizerMode, BOS, CLS, MASK, NUM_SPECIALS, PAD, SEP, UNK,
};
