//! Byte-level BPE subword model and a frequency truecaser.

mod bpe;
mod truecase;

pub use bpe::{Specials, SubwordModel, BASE_VOCAB, SEP_TOKEN, WORD_MARKER};
pub use truecase::Truecaser;
