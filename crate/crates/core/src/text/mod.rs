//! Corpus ingestion, vocabulary, masking and the synthetic benchmark.

mod idf;
pub mod io;
mod masking;
pub mod synthetic;
mod vocab;

pub use idf::compute_idf;
pub use io::{Document, Qrels};
pub use masking::{mask_once, mask_twice, mask_count, MaskedView};
pub use synthetic::{gen_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
pub use vocab::{build_vocab, encode_text, tokenize, TokenSeq, Vocab};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
/// Ids below this value are special tokens.
pub const NUM_RESERVED: u32 = 5;
pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub fn is_reserved(id: u32) -> bool {
    id < NUM_RESERVED
}
