use serde::{Deserialize, Serialize};

use super::{decode, focal_terms, Seq2SeqModel};
use crate::data::{batchify, ParallelBatch};
use crate::error::{Error, Result};
use crate::metrics::bleu;
use crate::optim::{clip_global_norm, Optimizer, OptimizerConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mode, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for Seq2SeqTrainOptions {
    fn default() -> Self {
        Seq2SeqTrainOptions {
            epochs: 30,
            batch_size: 16,
            optimizer: OptimizerConfig::adagrad(0.15),
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Summed loss over non-pad target tokens.
    pub loss: f64,
    pub tokens: usize,
    pub clamped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqEpochLog {
    pub epoch: usize,
    /// Mean loss per target token.
    pub loss: f64,
    /// Held-out BLEU in `[0, 1]`.
    pub bleu: f64,
}

impl Seq2SeqEpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,dev_bleu";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6}", self.epoch, self.loss, self.bleu)
    }
}

impl Seq2SeqModel {
    /// Teacher-forced loss summed over the non-pad target positions.
    pub fn loss<S: Scalar>(&self, g: &mut Graph<'_, S>, batch: &ParallelBatch) -> Result<Var> {
        let enc = self.encode_source(g, &batch.src, &batch.src_lens)?;
        let mut state = self.initial_state(g, &enc)?;
        let mut terms = Vec::with_capacity(batch.tgt_in.len());
        for (t, (prev, gold)) in batch.tgt_in.iter().zip(&batch.tgt_out).enumerate() {
            let out = self.decoder_step(g, &enc, prev, &mut state)?;
            let probs = g.softmax_rows(out.logits)?;
            let p = g.pick(probs, gold)?;
            let mut term = focal_terms(g, p, self.config.gamma)?;
            if (0..batch.size()).any(|b| !batch.tgt_valid(t, b)) {
                let w: Vec<S> = (0..batch.size())
                    .map(|b| if batch.tgt_valid(t, b) { S::one() } else { S::zero() })
                    .collect();
                let w = g.constant(Tensor::new(vec![batch.size(), 1], w)?)?;
                term = g.scale_rows(term, w)?;
            }
            terms.push(term);
        }
        let all = g.concat(&terms, 0)?;
        g.sum(all)
    }
}

/// One teacher-forced update on `batch`; the gradient is of the loss
/// divided by the number of sequences.
pub fn train_step(
    model: &Seq2SeqModel,
    ps: &mut ParamStore,
    opt: &mut Optimizer,
    batch: &ParallelBatch,
    clip_norm: Option<f64>,
    dropout_seed: u64,
) -> Result<StepStats> {
    let (loss, clamped, mut grads) = {
        let mut g = Graph::new(&*ps, Mode::Train, dropout_seed);
        let total = model.loss(&mut g, batch)?;
        let scaled = g.affine(total, 1.0 / batch.size() as f64, 0.0)?;
        g.backward(scaled)?;
        (f64::from(g.value(total).item()), g.clamp_events(), g.param_grads())
    };
    if let Some(c) = clip_norm {
        clip_global_norm(&mut grads, c);
    }
    opt.step(ps, &grads)?;
    Ok(StepStats {
        loss,
        tokens: batch.target_tokens(),
        clamped,
    })
}

/// Corpus BLEU of decoded outputs against references, plus the outputs.
pub fn evaluate_bleu(
    model: &Seq2SeqModel,
    ps: &ParamStore,
    pairs: &[(Vec<usize>, Vec<usize>)],
) -> Result<(f64, Vec<Vec<usize>>)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("no evaluation pairs".into()));
    }
    let hyps = pairs
        .iter()
        .map(|(s, _)| decode(model, ps, s))
        .collect::<Result<Vec<_>>>()?;
    let words = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>();
    let h: Vec<Vec<String>> = hyps.iter().map(|x| words(x)).collect();
    let r: Vec<Vec<String>> = pairs.iter().map(|(_, y)| words(y)).collect();
    Ok((bleu(&h, &r, 4)?.score, hyps))
}

/// Trains in place, evaluating BLEU on `dev` after every epoch.
pub fn train_seq2seq(
    model: &Seq2SeqModel,
    ps: &mut ParamStore,
    train: &[(Vec<usize>, Vec<usize>)],
    dev: &[(Vec<usize>, Vec<usize>)],
    opts: &Seq2SeqTrainOptions,
    mut on_epoch: impl FnMut(&Seq2SeqEpochLog),
) -> Result<Vec<Seq2SeqEpochLog>> {
    if train.is_empty() {
        return Err(Error::EmptyInput("no training pairs".into()));
    }
    let mut opt = opts.optimizer.build();
    let mut logs = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let (mut loss, mut tokens) = (0.0, 0);
        for (k, idx) in batchify(train.len(), opts.batch_size, opts.seed, epoch)?
            .into_iter()
            .enumerate()
        {
            let pairs: Vec<(&[usize], &[usize])> = idx
                .iter()
                .map(|&i| (train[i].0.as_slice(), train[i].1.as_slice()))
                .collect();
            let batch = ParallelBatch::new(&pairs)?;
            let seed = opts.seed ^ ((epoch as u64) << 32 | k as u64);
            let st = train_step(model, ps, &mut opt, &batch, opts.clip_norm, seed)?;
            loss += st.loss;
            tokens += st.tokens;
        }
        let bleu = if dev.is_empty() {
            0.0
        } else {
            evaluate_bleu(model, ps, dev)?.0
        };
        let log = Seq2SeqEpochLog {
            epoch: epoch + 1,
            loss: loss / tokens as f64,
            bleu,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
