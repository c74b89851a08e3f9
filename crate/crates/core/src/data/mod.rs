//! Deterministic synthetic datasets, vocabularies and batching.

mod batch;
mod parallel;
mod qa;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use batch::{batchify, ParallelBatch};
pub use parallel::{gen_synth_translation, read_parallel, write_parallel, ParallelPair, Task, TranslationOptions};
pub use qa::{gen_synth_qa, read_qa, write_qa, QaExample, QaOptions, QaRecord};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token ↔ id map with ids 0..4 reserved for pad, unknown, start and end.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    /// Vocabulary over every token yielded, in first-seen order.
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Decodes ids, stopping at the end marker and skipping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i >= RESERVED.len() || i == UNK)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds from a token list; the first four must be the reserved set.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Data("vocabulary is missing reserved entries".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry {t}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n").map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

/// Characters with dedicated ids; everything else maps to 1 (unknown).
pub const CHAR_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789_";

pub fn char_vocab_size() -> usize {
    CHAR_ALPHABET.len() + 2
}

/// Character ids of a token: 0 is padding, 1 unknown, letters from 2.
pub fn char_ids(token: &str) -> Vec<usize> {
    token
        .chars()
        .map(|c| CHAR_ALPHABET.find(c).map_or(UNK, |i| i + 2))
        .collect()
}

/// Seeded permutation of `0..n`.
pub(crate) fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_unknowns() {
        let v = Vocab::build(["a", "b", "a"]);
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.decode(&[4, 5, EOS, 4]), vec!["a", "b"]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::build(["x", "y"]);
        let f = tempfile::NamedTempFile::new().unwrap();
        v.save(f.path()).unwrap();
        assert_eq!(Vocab::load(f.path()).unwrap(), v);
    }

    #[test]
    fn char_ids_skip_reserved() {
        assert_eq!(char_ids("ab_"), vec![2, 3, 38]);
        assert_eq!(char_ids("A"), vec![UNK]);
        assert!(char_ids("key12").iter().all(|&c| c >= 2));
    }
}
