use serde::{Deserialize, Serialize};

use super::{predict_span, McModel};
use crate::data::{batchify, QaExample};
use crate::error::{Error, Result};
use crate::metrics::em_f1;
use crate::optim::{clip_global_norm, OptimizerConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for McTrainOptions {
    fn default() -> Self {
        McTrainOptions {
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerConfig::adadelta(1.0),
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

/// One row of the training log: mean loss and EM/F1 on the evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub em: f64,
    pub f1: f64,
}

impl McEpochLog {
    pub const CSV_HEADER: &'static str = "epoch,loss,em,f1";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.epoch, self.loss, self.em, self.f1)
    }
}

/// Trains in place; calls `on_epoch` after each epoch with its log row.
pub fn train_mc(
    model: &McModel,
    ps: &mut ParamStore,
    train: &[QaExample],
    eval: &[QaExample],
    opts: &McTrainOptions,
    mut on_epoch: impl FnMut(&McEpochLog),
) -> Result<Vec<McEpochLog>> {
    if train.is_empty() {
        return Err(Error::EmptyInput("no QA training examples".into()));
    }
    let mut opt = opts.optimizer.build();
    let mut logs = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let mut total = 0.0;
        for (k, idx) in batchify(train.len(), opts.batch_size, opts.seed, epoch)?
            .into_iter()
            .enumerate()
        {
            let batch: Vec<&QaExample> = idx.iter().map(|&i| &train[i]).collect();
            let dropout_seed = opts.seed ^ ((epoch as u64) << 32 | k as u64);
            let (loss, mut grads) = {
                let mut g = Graph::new(&*ps, Mode::Train, dropout_seed);
                let l = model.loss(&mut g, &batch)?;
                g.backward(l)?;
                (f64::from(g.value(l).item()), g.param_grads())
            };
            if let Some(c) = opts.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            opt.step(ps, &grads)?;
            total += loss * batch.len() as f64;
        }
        let (em, f1) = if eval.is_empty() {
            (0.0, 0.0)
        } else {
            evaluate_mc(model, ps, eval)?
        };
        let log = McEpochLog {
            epoch: epoch + 1,
            loss: total / train.len() as f64,
            em,
            f1,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

/// Predicted spans in evaluation mode.
pub fn predict(model: &McModel, ps: &ParamStore, examples: &[QaExample]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let batch: Vec<&QaExample> = chunk.iter().collect();
        let mut g = Graph::new(ps, Mode::Eval, 0);
        for l in model.forward(&mut g, &batch)? {
            let s = g.value(l.start).to_f64_vec();
            let e = g.value(l.end).to_f64_vec();
            out.push(predict_span(&s, &e, model.config.max_span)?);
        }
    }
    Ok(out)
}

/// Mean exact match and token F1 of predicted against gold spans.
pub fn evaluate_mc(model: &McModel, ps: &ParamStore, examples: &[QaExample]) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Err(Error::EmptyInput("no QA evaluation examples".into()));
    }
    let spans = predict(model, ps, examples)?;
    let (mut em, mut f1) = (0.0, 0.0);
    for (ex, &(s, e)) in examples.iter().zip(&spans) {
        let words = |a: usize, b: usize| -> Vec<String> { ex.passage[a..=b].iter().map(usize::to_string).collect() };
        let (m, f) = em_f1(&words(s, e), &words(ex.span.0, ex.span.1));
        em += m;
        f1 += f;
    }
    let n = examples.len() as f64;
    Ok((em / n, f1 / n))
}
