use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Embedding;
use crate::error::{Error, Result};
use crate::params::{init, ParamStore};
use crate::tensor::{Graph, Scalar, Var};

/// Character embeddings, a bank of 1-D filters and max-pooling over
/// positions. Output width is the filter count for any word length.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharCnn {
    pub prefix: String,
    pub chars: Embedding,
    pub filters: usize,
    pub width: usize,
}

impl CharCnn {
    pub fn new(prefix: &str, char_vocab: usize, char_dim: usize, filters: usize, width: usize) -> Self {
        CharCnn {
            prefix: prefix.to_string(),
            chars: Embedding::new(format!("{prefix}.char_emb"), char_vocab, char_dim),
            filters,
            width,
        }
    }

    pub fn filter_name(&self) -> String {
        format!("{}.filters", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init(&self, ps: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.chars.init(ps, rng)?;
        let fan_in = self.width * self.chars.dim;
        ps.insert(self.filter_name(), init::xavier(self.filters, fan_in, rng))?;
        ps.insert(self.bias_name(), init::zeros(self.filters))
    }

    pub fn num_elements(&self) -> usize {
        self.chars.num_elements() + self.filters * (self.width * self.chars.dim + 1)
    }

    /// Encodes each word (a list of character ids) into one row of
    /// `words.len() × filters`. Words shorter than the filter width are
    /// right-padded with the padding character.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<'_, S>, words: &[Vec<usize>]) -> Result<Var> {
        if words.is_empty() {
            return Err(Error::EmptyInput("char-cnn over zero words".into()));
        }
        let mut ids = Vec::new();
        let mut starts = Vec::new();
        let mut windows = Vec::with_capacity(words.len());
        for w in words {
            if w.is_empty() {
                return Err(Error::EmptyInput("word with no characters".into()));
            }
            let offset = ids.len();
            let padded = w.len().max(self.width);
            ids.extend_from_slice(w);
            ids.resize(offset + padded, 0);
            let count = padded - self.width + 1;
            starts.extend((0..count).map(|p| offset + p));
            windows.push(count);
        }
        let emb = self.chars.lookup(g, &ids)?;
        let cols = g.unfold(emb, &starts, self.width)?;
        let filters = g.param(&self.filter_name())?;
        let bias = g.param(&self.bias_name())?;
        let conv = g.matmul_bt(cols, filters)?;
        let conv = g.add_bias(conv, bias)?;
        let act = g.tanh(conv)?;
        g.segment_max(act, &windows)
    }
}
