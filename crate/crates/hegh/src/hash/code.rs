//! Bit-packed hash codes and Hamming distance.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// A `k`-bit code packed little-endian into 64-bit words: bit `j` lives in
/// word `j / 64` at position `j % 64`. Spare high bits of the last word
/// are always zero, so equal codes compare equal word-for-word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HashCode {
    bits: usize,
    words: Vec<u64>,
}

/// Words needed to hold `bits` bits.
pub fn code_words(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl HashCode {
    /// The all-zeros code.
    pub fn zero(bits: usize) -> Self {
        HashCode { bits, words: vec![0; code_words(bits)] }
    }

    /// Quantizes a binary-like vector by sign: bit `j` is 1 iff `b[j] >= 0`.
    /// An exact zero counts as positive.
    pub fn quantize<T: Scalar>(values: &[T]) -> Result<Self> {
        let mut code = HashCode::zero(values.len());
        for (j, v) in values.iter().enumerate() {
            let v = v.as_f64();
            if v.is_nan() {
                return Err(Error::Data(format!("cannot quantize NaN at bit {j}")));
            }
            if v >= 0.0 {
                code.words[j / 64] |= 1 << (j % 64);
            }
        }
        Ok(code)
    }

    /// Reassembles a code from packed words, enforcing canonical form.
    pub fn from_words(bits: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != code_words(bits) {
            return Err(Error::Data(format!(
                "{bits}-bit code needs {} words, got {}",
                code_words(bits),
                words.len()
            )));
        }
        let spare = words.len() * 64 - bits;
        if spare > 0 && words.last().is_some_and(|&w| w & !(!0u64 >> spare) != 0) {
            return Err(Error::Data(format!(
                "{bits}-bit code has nonzero spare bits in its last word"
            )));
        }
        Ok(HashCode { bits, words })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, j: usize) -> bool {
        debug_assert!(j < self.bits);
        self.words[j / 64] >> (j % 64) & 1 == 1
    }

    /// Number of differing bits, by XOR and popcount over the packed words.
    pub fn hamming_distance(&self, other: &HashCode) -> Result<u32> {
        if self.bits != other.bits {
            return Err(Error::Usage(format!(
                "hamming distance between {}-bit and {}-bit codes",
                self.bits, other.bits
            )));
        }
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum())
    }

    /// Hex rendering, most significant nibble first, for CLI round trips.
    pub fn to_hex(&self) -> String {
        let nibbles = self.bits.div_ceil(4).max(1);
        let mut out = String::with_capacity(nibbles + 2);
        out.push_str("0x");
        for i in (0..nibbles).rev() {
            let nib = (self.words[i * 4 / 64] >> (i * 4 % 64)) & 0xF;
            out.push(char::from_digit(nib as u32, 16).unwrap());
        }
        out
    }

    /// Parses the `to_hex` form (the `0x` prefix is optional). The value
    /// must fit in `bits` bits.
    pub fn from_hex(bits: usize, text: &str) -> Result<Self> {
        let digits = text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")).unwrap_or(text);
        if digits.is_empty() {
            return Err(Error::Data("empty hash code literal".into()));
        }
        let mut words = vec![0u64; code_words(bits)];
        for (i, c) in digits.chars().rev().enumerate() {
            let nib = c
                .to_digit(16)
                .ok_or_else(|| Error::Data(format!("bad hex digit '{c}' in hash code")))?
                as u64;
            if nib == 0 {
                continue;
            }
            let bit = i * 4;
            let room = bits.saturating_sub(bit);
            if room < 4 && nib >> room != 0 {
                return Err(Error::Data(format!(
                    "hash code {text} does not fit in {bits} bits"
                )));
            }
            words[bit / 64] |= nib << (bit % 64);
        }
        HashCode::from_words(bits, words)
    }
}
