//! The 20-letter amino-acid alphabet used everywhere in the crate.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};

/// Canonical residue order. Checkpoints, confusion matrices and
/// distribution tables all index by this order.
pub const CANONICAL_ORDER: &str = "ACDEFGHIKLMNPQRSTVWY";

/// Number of residue types.
pub const ALPHABET_SIZE: usize = 20;

/// Token index reserved for the decoder begin-of-sequence marker. It is an
/// internal embedding row only and never appears in output logits.
pub const BOS_TOKEN: usize = ALPHABET_SIZE;

/// Ordered one-letter amino-acid alphabet with symbol<->index maps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidueAlphabet {
    symbols: Vec<char>,
    index: [i8; 128],
}

impl Default for ResidueAlphabet {
    fn default() -> Self {
        Self::canonical()
    }
}

impl ResidueAlphabet {
    /// The canonical alphabet in `ACDEFGHIKLMNPQRSTVWY` order.
    pub fn canonical() -> Self {
        let symbols: Vec<char> = CANONICAL_ORDER.chars().collect();
        debug_assert_eq!(symbols.len(), ALPHABET_SIZE);
        let mut index = [-1i8; 128];
        for (i, &c) in symbols.iter().enumerate() {
            index[c as usize] = i as i8;
        }
        ResidueAlphabet { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of a one-letter code, or None for symbols outside the alphabet.
    pub fn index_of(&self, c: char) -> Option<usize> {
        if (c as usize) < 128 && self.index[c as usize] >= 0 {
            Some(self.index[c as usize] as usize)
        } else {
            None
        }
    }

    /// Symbol at an index. Panics on out-of-range indices.
    pub fn symbol(&self, i: usize) -> char {
        self.symbols[i]
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Encode a sequence string, failing on the first unknown symbol.
    pub fn encode(&self, seq: &str) -> Result<Vec<usize>> {
        seq.chars()
            .map(|c| {
                self.index_of(c)
                    .ok_or_else(|| Error::Corpus(format!("unknown residue symbol {c:?}")))
            })
            .collect()
    }

    /// Decode token indices back into a sequence string.
    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.symbol(t)).collect()
    }

    /// SHA-256 of the symbol order, embedded in checkpoints so weights are
    /// never interpreted against a different residue ordering.
    pub fn hash(&self) -> String {
        let s: String = self.symbols.iter().collect();
        let digest = Sha256::digest(s.as_bytes());
        hex_string(&digest)
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
