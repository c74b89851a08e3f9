use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{char_ids, Vocab};
use crate::error::{Error, Result};

/// One line of a QA dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub passage: Vec<String>,
    pub passage_chars: Vec<Vec<usize>>,
    pub question: Vec<String>,
    pub question_chars: Vec<Vec<usize>>,
    pub answer_start: usize,
    pub answer_end: usize,
}

impl QaRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.passage.len();
        if n == 0 || self.question.is_empty() {
            return Err(Error::Data("empty passage or question".into()));
        }
        if self.passage_chars.len() != n || self.question_chars.len() != self.question.len() {
            return Err(Error::Data("character lists do not match token lists".into()));
        }
        if self.answer_start > self.answer_end || self.answer_end >= n {
            return Err(Error::Data(format!(
                "answer span ({}, {}) outside passage of {n}",
                self.answer_start, self.answer_end
            )));
        }
        Ok(())
    }

    pub fn answer(&self) -> &[String] {
        &self.passage[self.answer_start..=self.answer_end]
    }

    pub fn encode(&self, vocab: &Vocab) -> Result<QaExample> {
        self.validate()?;
        Ok(QaExample {
            passage: vocab.encode(&self.passage),
            passage_chars: self.passage_chars.clone(),
            question: vocab.encode(&self.question),
            question_chars: self.question_chars.clone(),
            span: (self.answer_start, self.answer_end),
        })
    }
}

/// A QA record mapped to word ids. Spans are inclusive token indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaExample {
    pub passage: Vec<usize>,
    pub passage_chars: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub question_chars: Vec<Vec<usize>>,
    pub span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaOptions {
    /// Distinct content tokens (keys, values and fillers together).
    pub vocab_size: usize,
    pub min_passage: usize,
    pub max_passage: usize,
    pub value_len: usize,
}

impl Default for QaOptions {
    fn default() -> Self {
        QaOptions {
            vocab_size: 60,
            min_passage: 8,
            max_passage: 16,
            value_len: 2,
        }
    }
}

/// Passages of random filler with embedded `key_k v1 v2` patterns; the
/// question names one key and the answer is the value tokens after it.
pub fn gen_synth_qa(seed: u64, count: usize, opts: &QaOptions) -> Result<Vec<QaRecord>> {
    let pattern = opts.value_len + 1;
    if opts.min_passage < 3 || opts.min_passage < pattern || opts.max_passage < opts.min_passage {
        return Err(Error::Config(format!(
            "passage length range {}..={} cannot hold a pattern of {pattern}",
            opts.min_passage, opts.max_passage
        )));
    }
    let n_keys = opts.vocab_size / 5;
    let n_values = 2 * opts.vocab_size / 5;
    let n_fill = opts.vocab_size.saturating_sub(n_keys + n_values);
    if n_keys < 2 || n_values < opts.value_len.max(2) || n_fill < 1 {
        return Err(Error::Config(format!(
            "vocabulary of {} is too small to embed key-value patterns",
            opts.vocab_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(opts.min_passage..=opts.max_passage);
        let patterns = (len / (2 * pattern)).clamp(1, 3).min(n_keys);
        let mut passage: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..n_fill))).collect();

        // non-overlapping pattern slots, shifted together
        let slots = len / pattern;
        let shift = rng.gen_range(0..=len - slots * pattern);
        let mut chosen: Vec<usize> = (0..slots).collect();
        chosen.shuffle(&mut rng);
        chosen.truncate(patterns);
        let mut keys: Vec<usize> = (0..n_keys).collect();
        keys.shuffle(&mut rng);

        let mut spans = Vec::with_capacity(patterns);
        for (&slot, &key) in chosen.iter().zip(&keys) {
            let at = shift + slot * pattern;
            passage[at] = format!("key{key}");
            for j in 0..opts.value_len {
                passage[at + 1 + j] = format!("v{}", rng.gen_range(0..n_values));
            }
            spans.push((at, key));
        }
        let &(at, key) = spans.choose(&mut rng).expect("at least one pattern");
        let question = vec!["find".to_string(), format!("key{key}")];
        out.push(QaRecord {
            passage_chars: passage.iter().map(|t| char_ids(t)).collect(),
            question_chars: question.iter().map(|t| char_ids(t)).collect(),
            passage,
            question,
            answer_start: at + 1,
            answer_end: at + opts.value_len,
        });
    }
    Ok(out)
}

pub fn write_qa(path: &Path, records: &[QaRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::file(path, e))?;
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::file(path, e))?;
    }
    Ok(())
}

pub fn read_qa(path: &Path) -> Result<Vec<QaRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: QaRecord =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        r.validate()
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}
