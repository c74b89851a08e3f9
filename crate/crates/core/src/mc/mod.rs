//! Span-extraction comprehension model: shared bidirectional encoder over
//! word and character representations, bidirectional attention, a two-layer
//! modeling LSTM and an MLP span head.

mod attention;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{char_vocab_size, QaExample};
use crate::error::{Error, Result};
use crate::layers::{BiLstm, CharCnn, Embedding, Linear, StackedLstm};
use crate::params::{init, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use attention::{attend, similarity, Attended, AttentionVariant};
pub use train::{evaluate_mc, predict, train_mc, McEpochLog, McTrainOptions};

pub const WORD_EMB: &str = "mc.word_emb";
pub const CHAR_CNN: &str = "mc.char_cnn";
pub const ENCODER: &str = "mc.enc";
pub const ATT_W: &str = "mc.att.w_s";
pub const MODELING: &str = "mc.model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub vocab_size: usize,
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub char_width: usize,
    pub hidden: usize,
    pub variant: AttentionVariant,
    pub dropout: f64,
    pub max_span: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            vocab_size: 64,
            word_dim: 32,
            char_dim: 8,
            char_filters: 16,
            char_width: 5,
            hidden: 32,
            variant: AttentionVariant::Bidaf,
            dropout: 0.2,
            max_span: 8,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.word_dim == 0 || self.char_filters == 0 || self.char_width == 0 {
            return Err(Error::Config("mc sizes must be positive".into()));
        }
        if self.max_span == 0 {
            return Err(Error::Config("max answer span must be at least 1".into()));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("mc vocabulary must hold reserved ids and a word".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Input width of the encoder: word plus character features.
    pub fn encoder_input(&self) -> usize {
        self.word_dim + self.char_filters
    }

    /// Width of the attended context `G`.
    pub fn attended_width(&self) -> usize {
        self.variant.output_width(2 * self.hidden)
    }
}

/// Positionwise one-hidden-layer tanh MLP producing one logit per row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl SpanMlp {
    fn new(prefix: &str, input: usize, hidden: usize) -> Self {
        SpanMlp {
            hidden: Linear::new(format!("{prefix}.hidden"), input, hidden),
            out: Linear::new(format!("{prefix}.out"), hidden, 1),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let z = self.hidden.forward(g, x)?;
        let z = g.tanh(z)?;
        self.out.forward(g, z)
    }
}

/// Encoder states of one example: question `U` (`m × 2h`) and passage
/// `H` (`n × 2h`).
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub u: Var,
    pub h: Var,
}

/// Start and end logits of one example, each `1 × n`.
#[derive(Clone, Copy, Debug)]
pub struct SpanLogits {
    pub start: Var,
    pub end: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McModel {
    pub config: McConfig,
    pub word_emb: Embedding,
    pub char_cnn: CharCnn,
    pub encoder: BiLstm,
    pub modeling: StackedLstm,
    pub start: SpanMlp,
    pub end: SpanMlp,
}

impl McModel {
    pub fn new(config: McConfig) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let dg = config.attended_width();
        Ok(McModel {
            word_emb: Embedding::new(WORD_EMB, config.vocab_size, config.word_dim),
            char_cnn: CharCnn::new(
                CHAR_CNN,
                char_vocab_size(),
                config.char_dim,
                config.char_filters,
                config.char_width,
            ),
            encoder: BiLstm::new(ENCODER, config.encoder_input(), h),
            modeling: StackedLstm::new(MODELING, dg, h, 2),
            start: SpanMlp::new("mc.span.start", dg + h, h),
            end: SpanMlp::new("mc.span.end", dg + h, h),
            config,
        })
    }

    pub fn init(&self, seed: u64) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        self.word_emb.init(&mut ps, &mut rng)?;
        self.char_cnn.init(&mut ps, &mut rng)?;
        self.encoder.init(&mut ps, &mut rng)?;
        ps.insert(ATT_W, init::xavier(1, 6 * self.config.hidden, &mut rng))?;
        self.modeling.init(&mut ps, &mut rng)?;
        for mlp in [&self.start, &self.end] {
            mlp.hidden.init(&mut ps, &mut rng)?;
            mlp.out.init(&mut ps, &mut rng)?;
        }
        Ok(ps)
    }

    /// Encodes questions and passages of a batch with the shared encoder.
    /// Sequences are padded together; each example's rows are gathered back.
    pub fn encode<S: Scalar>(&self, g: &mut Graph<'_, S>, batch: &[&QaExample]) -> Result<Vec<Encoded>> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::EmptyInput("empty QA batch".into()));
        }
        let seqs: Vec<(&[usize], &[Vec<usize>])> = batch
            .iter()
            .map(|e| (e.passage.as_slice(), e.passage_chars.as_slice()))
            .chain(
                batch
                    .iter()
                    .map(|e| (e.question.as_slice(), e.question_chars.as_slice())),
            )
            .collect();
        let mut ids = Vec::new();
        let mut chars = Vec::new();
        let mut offsets = Vec::with_capacity(seqs.len());
        for (words, cs) in &seqs {
            if words.is_empty() {
                return Err(Error::EmptyInput("empty passage or question".into()));
            }
            if cs.len() != words.len() {
                return Err(Error::Data("character lists do not match token lists".into()));
            }
            offsets.push(ids.len());
            ids.extend_from_slice(words);
            chars.extend_from_slice(cs);
        }
        let emb = self.word_emb.lookup(g, &ids)?;
        let ch = self.char_cnn.encode(g, &chars)?;
        let rep = g.concat(&[emb, ch], 1)?;
        let rep = g.dropout(rep, self.config.dropout)?;

        let lengths: Vec<usize> = seqs.iter().map(|(w, _)| w.len()).collect();
        let steps = stack_steps(g, rep, &offsets, &lengths)?;
        let out = self.encoder.forward(g, &steps, &lengths)?;
        let states = unstack_steps(g, &out.steps, &lengths)?;
        let (h, u) = states.split_at(b);
        Ok(h.iter().zip(u).map(|(&h, &u)| Encoded { u, h }).collect())
    }

    pub fn attention<S: Scalar>(&self, g: &mut Graph<'_, S>, enc: Encoded) -> Result<Attended> {
        let w = g.param(ATT_W)?;
        let s = similarity(g, w, enc.u, enc.h)?;
        attend(g, s, enc.u, enc.h, self.config.variant)
    }

    /// Two-layer modeling LSTM over each example's `G`; returns `M` (`n × h`).
    pub fn modeling<S: Scalar>(&self, g: &mut Graph<'_, S>, gs: &[Var]) -> Result<Vec<Var>> {
        if gs.is_empty() {
            return Err(Error::EmptyInput("modeling over zero examples".into()));
        }
        let lengths: Vec<usize> = gs.iter().map(|&x| g.shape(x).0).collect();
        let table = g.concat(gs, 0)?;
        let table = g.dropout(table, self.config.dropout)?;
        let offsets = lengths
            .iter()
            .scan(0, |acc, &l| {
                let o = *acc;
                *acc += l;
                Some(o)
            })
            .collect::<Vec<_>>();
        let steps = stack_steps(g, table, &offsets, &lengths)?;
        let outs = self.modeling.forward(g, &steps, &lengths)?;
        unstack_steps(g, &outs, &lengths)
    }

    pub fn span_logits<S: Scalar>(&self, g: &mut Graph<'_, S>, gs: &[Var], ms: &[Var]) -> Result<Vec<SpanLogits>> {
        let mut rows = Vec::with_capacity(gs.len());
        for (&gv, &mv) in gs.iter().zip(ms) {
            if g.shape(gv).0 != g.shape(mv).0 {
                return Err(Error::dim("span_head", "G and M row counts differ"));
            }
            rows.push(g.concat(&[gv, mv], 1)?);
        }
        let x = g.concat(&rows, 0)?;
        let start = self.start.forward(g, x)?;
        let end = self.end.forward(g, x)?;
        let mut out = Vec::with_capacity(gs.len());
        let mut at = 0;
        for &gv in gs {
            let n = g.shape(gv).0;
            let s = g.slice_rows(start, at, n)?;
            let e = g.slice_rows(end, at, n)?;
            out.push(SpanLogits {
                start: g.transpose(s)?,
                end: g.transpose(e)?,
            });
            at += n;
        }
        Ok(out)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, batch: &[&QaExample]) -> Result<Vec<SpanLogits>> {
        let enc = self.encode(g, batch)?;
        let gs = enc
            .into_iter()
            .map(|e| self.attention(g, e).map(|a| a.g))
            .collect::<Result<Vec<_>>>()?;
        let ms = self.modeling(g, &gs)?;
        self.span_logits(g, &gs, &ms)
    }

    /// Mean span loss over the batch.
    pub fn loss<S: Scalar>(&self, g: &mut Graph<'_, S>, batch: &[&QaExample]) -> Result<Var> {
        let logits = self.forward(g, batch)?;
        let losses = logits
            .iter()
            .zip(batch)
            .map(|(l, e)| mc_loss(g, l.start, l.end, e.span))
            .collect::<Result<Vec<_>>>()?;
        let all = g.concat(&losses, 0)?;
        let total = g.sum(all)?;
        g.affine(total, 1.0 / batch.len() as f64, 0.0)
    }

    pub fn num_elements(&self) -> usize {
        let h = self.config.hidden;
        self.word_emb.num_elements()
            + self.char_cnn.num_elements()
            + self.encoder.num_elements()
            + 6 * h
            + self.modeling.num_elements()
            + 2 * (self.start.hidden.num_elements() + self.start.out.num_elements())
    }
}

/// Time-major inputs from per-sequence row ranges of `table`; padded
/// positions read an appended zero row.
fn stack_steps<S: Scalar>(g: &mut Graph<'_, S>, table: Var, offsets: &[usize], lengths: &[usize]) -> Result<Vec<Var>> {
    let (rows, cols) = g.shape(table);
    let zero = g.constant(Tensor::zeros(&[1, cols]))?;
    let table = g.concat(&[table, zero], 0)?;
    let t_max = lengths.iter().copied().max().unwrap_or(0);
    (0..t_max)
        .map(|t| {
            let idx: Vec<usize> = offsets
                .iter()
                .zip(lengths)
                .map(|(&o, &l)| if t < l { o + t } else { rows })
                .collect();
            g.gather_rows(table, &idx)
        })
        .collect()
}

/// Inverse of [`stack_steps`]: one `len × d` matrix per sequence.
fn unstack_steps<S: Scalar>(g: &mut Graph<'_, S>, steps: &[Var], lengths: &[usize]) -> Result<Vec<Var>> {
    let b = lengths.len();
    let stacked = g.concat(steps, 0)?;
    lengths
        .iter()
        .enumerate()
        .map(|(s, &l)| {
            let idx: Vec<usize> = (0..l).map(|t| t * b + s).collect();
            g.gather_rows(stacked, &idx)
        })
        .collect()
}

/// `−log softmax(start)[s] − log softmax(end)[e]` for `1 × n` logits.
pub fn mc_loss<S: Scalar>(g: &mut Graph<'_, S>, start: Var, end: Var, span: (usize, usize)) -> Result<Var> {
    let n = g.shape(start).1;
    if g.shape(end) != (1, n) || g.shape(start).0 != 1 {
        return Err(Error::dim("mc_loss", "logits must be 1 × n rows of equal length"));
    }
    if span.0 > span.1 || span.1 >= n {
        return Err(Error::Index(format!("span {span:?} outside passage of {n}")));
    }
    let ls = g.log_softmax_rows(start)?;
    let le = g.log_softmax_rows(end)?;
    let ps = g.pick(ls, &[span.0])?;
    let pe = g.pick(le, &[span.1])?;
    let both = g.add(ps, pe)?;
    g.affine(both, -1.0, 0.0)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Best `(s, e)` with `s ≤ e ≤ s + max_len − 1` under the product of start
/// and end probabilities; ties go to the smallest `s`, then smallest `e`.
pub fn predict_span(start: &[f64], end: &[f64], max_len: usize) -> Result<(usize, usize)> {
    if max_len == 0 {
        return Err(Error::Config("max span length must be at least 1".into()));
    }
    if start.is_empty() || start.len() != end.len() {
        return Err(Error::dim(
            "predict_span",
            format!("{} start vs {} end logits", start.len(), end.len()),
        ));
    }
    let (ps, pe) = (softmax(start), softmax(end));
    let n = start.len();
    let mut best = (0, 0);
    let mut best_p = f64::NEG_INFINITY;
    for s in 0..n {
        for e in s..n.min(s + max_len) {
            let p = ps[s] * pe[e];
            if p > best_p {
                best_p = p;
                best = (s, e);
            }
        }
    }
    Ok(best)
}
