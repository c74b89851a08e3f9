//! BLEU, ROUGE-1/2/L and span EM/F1 over whitespace tokens.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor used in place of a zero modified n-gram precision.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    /// Corpus score in `[0, 1]`.
    pub score: f64,
    pub per_example: Vec<f64>,
    /// Named raw counts the score was computed from.
    pub counts: Vec<(String, f64)>,
}

impl MetricReport {
    pub fn n_examples(&self) -> usize {
        self.per_example.len()
    }

    pub fn count(&self, name: &str) -> Option<f64> {
        self.counts.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }

    /// `metric,score,n_examples` with the score reported ×100.
    pub fn csv_row(&self) -> String {
        format!("{},{:.4},{}", self.metric, 100.0 * self.score, self.n_examples())
    }
}

pub fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut text = String::from("metric,score,n_examples\n");
    for r in reports {
        let _ = writeln!(text, "{}", r.csv_row());
    }
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

/// Parses rows written by [`write_reports`] into `(metric, score×100, n)`.
pub fn read_reports(path: &Path) -> Result<Vec<(String, f64, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Data(format!("{}: malformed report row {line:?}", path.display()));
            let mut it = line.split(',');
            let (Some(m), Some(s), Some(n), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad());
            };
            Ok((
                m.to_string(),
                s.parse().map_err(|_| bad())?,
                n.parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Clipped n-gram matches and hypothesis n-gram total.
fn clipped<S: AsRef<str>>(hyp: &[S], reference: &[S], n: usize) -> (usize, usize) {
    let h = ngrams(hyp, n);
    let r = ngrams(reference, n);
    let matches = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, h.values().sum())
}

fn check_pairs<S>(hyps: &[Vec<S>], refs: &[Vec<S>], what: &str) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::EmptyInput(format!("{what} over an empty hypothesis set")));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{what}: {} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// BLEU from pooled counts: `matches[n-1]`, `totals[n-1]` for each order.
pub fn bleu_from_counts(matches: &[usize], totals: &[usize], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 || matches.is_empty() {
        return 0.0;
    }
    let log_p: f64 = matches
        .iter()
        .zip(totals)
        .map(|(&m, &t)| {
            if m == 0 {
                BLEU_EPSILON.ln()
            } else {
                (m as f64 / t as f64).ln()
            }
        })
        .sum::<f64>()
        / matches.len() as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}

/// Corpus BLEU with pooled n-gram counts up to `max_n`; per-example
/// entries are sentence-level BLEU under the same rule.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize) -> Result<MetricReport> {
    check_pairs(hyps, refs, "bleu")?;
    if max_n == 0 {
        return Err(Error::Config("bleu needs max_n >= 1".into()));
    }
    let mut matches = vec![0; max_n];
    let mut totals = vec![0; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    let mut per_example = Vec::with_capacity(hyps.len());
    for (h, r) in hyps.iter().zip(refs) {
        let mut m1 = vec![0; max_n];
        let mut t1 = vec![0; max_n];
        for n in 1..=max_n {
            let (m, t) = clipped(h, r, n);
            m1[n - 1] = m;
            t1[n - 1] = t;
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
        hyp_len += h.len();
        ref_len += r.len();
        per_example.push(bleu_from_counts(&m1, &t1, h.len(), r.len()));
    }
    let mut counts = vec![
        ("hyp_len".to_string(), hyp_len as f64),
        ("ref_len".to_string(), ref_len as f64),
    ];
    for n in 0..max_n {
        counts.push((format!("match_{}", n + 1), matches[n] as f64));
        counts.push((format!("total_{}", n + 1), totals[n] as f64));
    }
    Ok(MetricReport {
        metric: "bleu".into(),
        score: bleu_from_counts(&matches, &totals, hyp_len, ref_len),
        per_example,
        counts,
    })
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    for x in a {
        let mut cur = vec![0; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F1, each averaged over examples. A pair
/// of empty sequences scores 1.
pub fn rouge<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<[MetricReport; 3]> {
    check_pairs(hyps, refs, "rouge")?;
    let mut scores = [Vec::new(), Vec::new(), Vec::new()];
    for (h, r) in hyps.iter().zip(refs) {
        if h.is_empty() && r.is_empty() {
            scores.iter_mut().for_each(|s| s.push(1.0));
            continue;
        }
        for n in 1..=2 {
            let (m, t) = clipped(h, r, n);
            let rt = r.len().saturating_sub(n - 1);
            scores[n - 1].push(f1(m, t, rt));
        }
        scores[2].push(f1(lcs_len(h, r), h.len(), r.len()));
    }
    let names = ["rouge-1", "rouge-2", "rouge-l"];
    Ok(std::array::from_fn(|i| {
        let per_example = std::mem::take(&mut scores[i]);
        MetricReport {
            metric: names[i].into(),
            score: per_example.iter().sum::<f64>() / per_example.len() as f64,
            counts: vec![("sum".into(), per_example.iter().sum())],
            per_example,
        }
    }))
}

/// Exact match and token-bag F1 of one predicted span.
pub fn em_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> (f64, f64) {
    let same = pred.len() == gold.len() && pred.iter().zip(gold).all(|(a, b)| a.as_ref() == b.as_ref());
    if pred.is_empty() || gold.is_empty() {
        let v = if same { 1.0 } else { 0.0 };
        return (v, v);
    }
    let (overlap, _) = clipped(pred, gold, 1);
    (if same { 1.0 } else { 0.0 }, f1(overlap, pred.len(), gold.len()))
}

/// Averaged EM and F1 reports over a set of spans.
pub fn span_reports<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<[MetricReport; 2]> {
    check_pairs(preds, golds, "em/f1")?;
    let (em, f): (Vec<f64>, Vec<f64>) = preds.iter().zip(golds).map(|(p, g)| em_f1(p, g)).unzip();
    let mk = |name: &str, v: Vec<f64>| MetricReport {
        metric: name.into(),
        score: v.iter().sum::<f64>() / v.len() as f64,
        counts: vec![("sum".into(), v.iter().sum())],
        per_example: v,
    };
    Ok([mk("em", em), mk("f1", f)])
}

/// Splits each line on whitespace.
pub fn tokenize_lines(lines: &[String]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_identity_is_one() {
        let c = vec![toks("a b c d e"), toks("x y z w")];
        assert_eq!(bleu(&c, &c, 4).unwrap().score, 1.0);
    }

    #[test]
    fn bleu_disjoint_is_floor() {
        let r = bleu(&[toks("a b c d")], &[toks("w x y z")], 4).unwrap();
        assert!(r.score < 1e-8);
    }

    #[test]
    fn bleu_score_reproducible_from_counts() {
        let h = vec![toks("a b c d"), toks("a a b")];
        let r = vec![toks("a b d c e"), toks("a b a")];
        let rep = bleu(&h, &r, 4).unwrap();
        let m: Vec<usize> = (1..=4)
            .map(|n| rep.count(&format!("match_{n}")).unwrap() as usize)
            .collect();
        let t: Vec<usize> = (1..=4)
            .map(|n| rep.count(&format!("total_{n}")).unwrap() as usize)
            .collect();
        let again = bleu_from_counts(
            &m,
            &t,
            rep.count("hyp_len").unwrap() as usize,
            rep.count("ref_len").unwrap() as usize,
        );
        assert_eq!(again.to_bits(), rep.score.to_bits());
    }

    #[test]
    fn bleu_empty_set_is_error() {
        let e: Vec<Vec<&str>> = vec![];
        assert!(bleu(&e, &e, 4).is_err());
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        let a = vec![toks("a b c")];
        for r in rouge(&a, &a).unwrap() {
            assert_eq!(r.score, 1.0);
        }
        for r in rouge(&a, &[toks("x y z")]).unwrap() {
            assert_eq!(r.score, 0.0);
        }
    }

    #[test]
    fn em_f1_basic() {
        assert_eq!(em_f1(&toks("a b"), &toks("a b")), (1.0, 1.0));
        assert_eq!(em_f1(&toks("a"), &toks("b")), (0.0, 0.0));
        assert_eq!(em_f1::<&str>(&[], &toks("b")), (0.0, 0.0));
    }

    #[test]
    fn csv_rows_round_trip() {
        let a = vec![toks("a b c")];
        let reps = rouge(&a, &a).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_reports(f.path(), &reps).unwrap();
        let rows = read_reports(f.path()).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|(_, s, n)| *s == 100.0 && *n == 1));
    }
}
