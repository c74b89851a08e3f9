use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::permutation;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelPair {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Copy,
    Reverse,
    Cipher,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "cipher" => Ok(Task::Cipher),
            _ => Err(Error::Config(format!("unknown task {s} (copy|reverse|cipher)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Cipher => "cipher",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationOptions {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent for token frequencies; `None` samples uniformly.
    pub zipf: Option<f64>,
    /// Seed of the substitution table, shared by train and dev splits.
    pub cipher_key: u64,
}

impl Default for TranslationOptions {
    fn default() -> Self {
        TranslationOptions {
            vocab_size: 20,
            min_len: 3,
            max_len: 8,
            zipf: None,
            cipher_key: 0,
        }
    }
}

/// The fixed bijective token substitution of the cipher task.
pub fn cipher_table(vocab_size: usize, key: u64) -> Vec<usize> {
    permutation(vocab_size, key ^ 0x5eed_c1f3)
}

pub fn gen_synth_translation(
    seed: u64,
    count: usize,
    task: Task,
    opts: &TranslationOptions,
) -> Result<Vec<ParallelPair>> {
    if count == 0 {
        return Err(Error::Config("translation dataset needs count >= 1".into()));
    }
    if opts.vocab_size == 0 || opts.min_len == 0 || opts.max_len < opts.min_len {
        return Err(Error::Config("invalid translation vocabulary or length range".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = match opts.zipf {
        Some(s) => (1..=opts.vocab_size).map(|r| (r as f64).powf(-s)).collect(),
        None => vec![1.0; opts.vocab_size],
    };
    let sampler = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("token distribution: {e}")))?;
    let table = cipher_table(opts.vocab_size, opts.cipher_key);
    let token = |i: usize| format!("t{i}");

    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(opts.min_len..=opts.max_len);
        let ids: Vec<usize> = (0..len).map(|_| sampler.sample(&mut rng)).collect();
        let target_ids: Vec<usize> = match task {
            Task::Copy => ids.clone(),
            Task::Reverse => ids.iter().rev().copied().collect(),
            Task::Cipher => ids.iter().rev().map(|&i| table[i]).collect(),
        };
        out.push(ParallelPair {
            source: ids.into_iter().map(token).collect(),
            target: target_ids.into_iter().map(token).collect(),
        });
    }
    Ok(out)
}

/// One pair per line: source tokens, a tab, target tokens.
pub fn write_parallel(path: &Path, pairs: &[ParallelPair]) -> Result<()> {
    let mut text = String::new();
    for p in pairs {
        text.push_str(&p.source.join(" "));
        text.push('\t');
        text.push_str(&p.target.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn read_parallel(path: &Path) -> Result<Vec<ParallelPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (src, tgt) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{}: missing tab separator", path.display(), i + 1)))?;
            let source: Vec<String> = src.split_whitespace().map(str::to_string).collect();
            if source.is_empty() {
                return Err(Error::Data(format!("{}:{}: empty source", path.display(), i + 1)));
            }
            Ok(ParallelPair {
                source,
                target: tgt.split_whitespace().map(str::to_string).collect(),
            })
        })
        .collect()
}
