//! Sign quantization, bit-packed codes, and exact Hamming retrieval.

mod code;
mod db;
mod index;

pub use code::{code_words, HashCode};
pub use db::CodeDatabase;
pub use index::Index;
