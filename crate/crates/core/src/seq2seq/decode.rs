use super::{DecodeMode, DecoderState, Seq2SeqModel};
use crate::data::{BOS, EOS};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mode};

struct Hyp {
    tokens: Vec<usize>,
    score: f64,
    state: DecoderState,
}

/// Beam search over one source sentence. Output excludes the end marker
/// and never exceeds `max_len` tokens. Width 1 is greedy decoding.
pub fn beam_search(
    model: &Seq2SeqModel,
    ps: &ParamStore,
    src: &[usize],
    width: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if src.is_empty() {
        return Err(Error::EmptyInput("empty source sentence".into()));
    }
    let mut g = Graph::new(ps, Mode::Eval, 0);
    let steps: Vec<Vec<usize>> = src.iter().map(|&t| vec![t]).collect();
    let enc = model.encode_source(&mut g, &steps, &[src.len()])?;
    let mut alive = vec![Hyp {
        tokens: Vec::new(),
        score: 0.0,
        state: model.initial_state(&mut g, &enc)?,
    }];
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();

    for _ in 0..=max_len {
        let mut candidates = Vec::new();
        for (hi, hyp) in alive.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(BOS);
            let mut state = hyp.state.clone();
            let out = model.decoder_step(&mut g, &enc, &[prev], &mut state)?;
            let logp = g.log_softmax_rows(out.logits)?;
            let logp = g.value(logp).to_f64_vec();
            // at the length cap only the end marker may follow
            let allowed: Vec<usize> = if hyp.tokens.len() == max_len {
                vec![EOS]
            } else {
                let mut order: Vec<usize> = (0..logp.len()).collect();
                order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
                order.truncate(width);
                order
            };
            for tok in allowed {
                candidates.push((hi, tok, hyp.score + logp[tok], state.clone()));
            }
        }
        candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let mut next = Vec::with_capacity(width);
        for (hi, tok, score, state) in candidates.into_iter().take(width) {
            let tokens = alive[hi].tokens.clone();
            if tok == EOS {
                finished.push((tokens, score));
            } else {
                let mut tokens = tokens;
                tokens.push(tok);
                next.push(Hyp { tokens, score, state });
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= width {
            break;
        }
    }
    let best = finished
        .into_iter()
        .chain(alive.into_iter().map(|h| (h.tokens, h.score)))
        .reduce(|best, c| if c.1 > best.1 { c } else { best })
        .map(|(t, _)| t)
        .unwrap_or_default();
    Ok(best)
}

pub fn greedy(model: &Seq2SeqModel, ps: &ParamStore, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    beam_search(model, ps, src, 1, max_len)
}

/// Decodes with the model's configured search and length cap.
pub fn decode(model: &Seq2SeqModel, ps: &ParamStore, src: &[usize]) -> Result<Vec<usize>> {
    let cap = model.config.max_decode_len;
    match model.config.decode {
        DecodeMode::Greedy => greedy(model, ps, src, cap),
        DecodeMode::Beam(k) => beam_search(model, ps, src, k, cap),
    }
}
