//! Finite-difference gradient suites over every op, every layer and both
//! end-to-end models, in 64-bit mode.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{char_ids, ParallelBatch, QaExample};
use crate::error::Result;
use crate::layers::{BiLstm, CharCnn, Embedding, Linear, Lstm, LstmCell, LstmState, StackedLstm};
use crate::mc::{self, AttentionVariant, McConfig, McModel};
use crate::params::ParamStore;
use crate::seq2seq::{focal_terms, MacnetMode, Seq2SeqConfig, Seq2SeqModel, TransplantDims};
use crate::tensor::gradcheck::{check, CheckOptions, CheckReport, MODEL_TOL, OP_TOL};
use crate::tensor::{Graph, Mode, OpKind, Tensor, Var};

/// Knobs shared by every suite.
#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Deliberately wrong backward rule, to prove the harness catches it.
    pub fault: Option<(OpKind, f64)>,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub reports: Vec<CheckReport>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.reports.iter().all(CheckReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckReport> {
        self.reports.iter().filter(|r| !r.passed())
    }

    /// One line per check: name, status, max relative error, tolerance.
    pub fn lines(&self) -> Vec<String> {
        self.reports
            .iter()
            .map(|r| {
                format!(
                    "{:<28} {} max_rel_err={:.3e} tol={:.0e} checked={}{}",
                    r.name,
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.max_rel_err,
                    r.tolerance,
                    r.checked,
                    r.worst
                        .as_ref()
                        .filter(|_| !r.passed())
                        .map(|(p, i)| format!(" worst={p}[{i}]"))
                        .unwrap_or_default()
                )
            })
            .collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Values whose pairwise gaps stay well above the difference step, so
/// max and clamp kinks are never crossed.
fn spread(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.1 * i as f64 + 0.05).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).expect("shape matches data")
}

/// `Σ out ∘ R` for a fixed random `R`, so every output element carries a
/// distinct weight.
fn probe(g: &mut Graph<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b5e_77ed);
    let w = g.constant(uniform(&mut rng, &[r, c], -1.0, 1.0))?;
    let y = g.mul(out, w)?;
    g.sum(y)
}

fn store(entries: Vec<(&str, Tensor<f64>)>) -> Result<ParamStore<f64>> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.insert(n, t)?;
    }
    Ok(s)
}

fn opts(tol: f64, suite: &SuiteOptions) -> CheckOptions {
    CheckOptions {
        tolerance: tol,
        seed: suite.seed,
        fault: suite.fault,
        ..CheckOptions::default()
    }
}

type OpCase = (
    &'static str,
    Vec<(&'static str, Tensor<f64>)>,
    fn(&mut Graph<'_, f64>) -> Result<Var>,
);

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<OpCase> {
    let u = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, -1.0, 1.0);
    let pos = |rng: &mut ChaCha8Rng, s: &[usize]| uniform(rng, s, 0.3, 1.5);
    vec![
        ("matmul", vec![("a", u(rng, &[3, 4])), ("b", u(rng, &[4, 2]))], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.matmul(a, b)
        }),
        ("matmul_bt", vec![("a", u(rng, &[3, 4])), ("b", u(rng, &[2, 4]))], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.matmul_bt(a, b)
        }),
        ("transpose", vec![("a", u(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.transpose(a)
        }),
        ("add", vec![("a", u(rng, &[3, 4])), ("b", u(rng, &[3, 4]))], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.add(a, b)
        }),
        ("sub", vec![("a", u(rng, &[3, 4])), ("b", u(rng, &[3, 4]))], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.sub(a, b)
        }),
        ("mul", vec![("a", u(rng, &[3, 4])), ("b", u(rng, &[3, 4]))], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.mul(a, b)
        }),
        ("add_bias", vec![("a", u(rng, &[3, 4])), ("b", u(rng, &[1, 4]))], |g| {
            let (a, b) = (g.param("a")?, g.param("b")?);
            g.add_bias(a, b)
        }),
        (
            "scale_rows",
            vec![("a", u(rng, &[3, 4])), ("w", u(rng, &[3, 1]))],
            |g| {
                let (a, w) = (g.param("a")?, g.param("w")?);
                g.scale_rows(a, w)
            },
        ),
        ("affine", vec![("a", u(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.affine(a, -1.7, 0.3)
        }),
        ("powf", vec![("a", pos(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.powf(a, 2.5)
        }),
        ("tanh", vec![("a", u(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.tanh(a)
        }),
        ("sigmoid", vec![("a", u(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.sigmoid(a)
        }),
        ("relu", vec![("a", spread(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.relu(a)
        }),
        ("exp", vec![("a", u(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.exp(a)
        }),
        ("log", vec![("a", pos(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.log(a)
        }),
        ("clamp_min", vec![("a", spread(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.clamp_min(a, 0.01)
        }),
        ("softmax", vec![("a", u(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.softmax_rows(a)
        }),
        ("log_softmax", vec![("a", u(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.log_softmax_rows(a)
        }),
        (
            "concat",
            vec![("a", u(rng, &[3, 4])), ("b", u(rng, &[3, 2])), ("c", u(rng, &[1, 6]))],
            |g| {
                let (a, b, c) = (g.param("a")?, g.param("b")?, g.param("c")?);
                let ab = g.concat(&[a, b], 1)?;
                g.concat(&[ab, c], 0)
            },
        ),
        ("slice_cols", vec![("a", u(rng, &[3, 5]))], |g| {
            let a = g.param("a")?;
            g.slice_cols(a, 1, 3)
        }),
        ("slice_rows", vec![("a", u(rng, &[5, 3]))], |g| {
            let a = g.param("a")?;
            g.slice_rows(a, 2, 2)
        }),
        ("gather_rows", vec![("a", u(rng, &[4, 3]))], |g| {
            let a = g.param("a")?;
            g.gather_rows(a, &[2, 0, 2, 3])
        }),
        ("pick", vec![("a", u(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.pick(a, &[3, 0, 1])
        }),
        ("sum", vec![("a", u(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            let s = g.sum(a)?;
            g.affine(s, 0.7, 0.0)
        }),
        ("unfold", vec![("a", u(rng, &[6, 3]))], |g| {
            let a = g.param("a")?;
            g.unfold(a, &[0, 2, 3], 3)
        }),
        ("segment_max", vec![("a", spread(rng, &[5, 3]))], |g| {
            let a = g.param("a")?;
            g.segment_max(a, &[2, 3])
        }),
        ("max_cols", vec![("a", spread(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.max_cols(a)
        }),
        ("max_rows", vec![("a", spread(rng, &[3, 4]))], |g| {
            let a = g.param("a")?;
            g.max_rows(a)
        }),
        ("repeat_rows", vec![("a", u(rng, &[1, 4]))], |g| {
            let a = g.param("a")?;
            g.repeat_rows(a, 3)
        }),
        ("repeat_cols", vec![("a", u(rng, &[3, 1]))], |g| {
            let a = g.param("a")?;
            g.repeat_cols(a, 4)
        }),
    ]
}

/// One check per differentiable op, tolerance [`OP_TOL`].
pub fn op_suite(suite: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed);
    let mut out = Vec::new();
    for (k, (name, params, f)) in op_cases(&mut rng).into_iter().enumerate() {
        let s = store(params)?;
        let seed = suite.seed + k as u64;
        out.push(check(&format!("op/{name}"), &s, &opts(OP_TOL, suite), |g| {
            let y = f(g)?;
            probe(g, y, seed)
        })?);
    }
    // dropout draws its mask from the tape seed, identical on every pass
    let s = store(vec![("a", uniform(&mut rng, &[4, 5], -1.0, 1.0))])?;
    let dropout_opts = CheckOptions {
        mode: Mode::Train,
        ..opts(OP_TOL, suite)
    };
    out.push(check("op/dropout", &s, &dropout_opts, |g| {
        let a = g.param("a")?;
        let y = g.dropout(a, 0.3)?;
        probe(g, y, 99)
    })?);
    Ok(out)
}

fn inits(seed: u64, f: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<()>) -> Result<ParamStore<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    f(&mut ps, &mut rng)?;
    Ok(ps.cast())
}

fn steps(g: &mut Graph<'_, f64>, seed: u64, t: usize, b: usize, d: usize) -> Result<Vec<Var>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t)
        .map(|_| g.constant(uniform(&mut rng, &[b, d], -1.0, 1.0)))
        .collect()
}

/// Every layer of both models, tolerance [`OP_TOL`].
pub fn layer_suite(suite: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let seed = suite.seed;
    let o = opts(OP_TOL, suite);
    let mut out = Vec::new();

    let lin = Linear::new("lin", 4, 3);
    let ps = inits(seed, |ps, r| lin.init(ps, r))?;
    out.push(check("layer/linear", &ps, &o, |g| {
        let x = steps(g, seed, 1, 2, 4)?[0];
        let y = lin.forward(g, x)?;
        probe(g, y, 1)
    })?);

    let emb = Embedding::new("emb", 6, 3);
    let ps = inits(seed, |ps, r| emb.init(ps, r))?;
    out.push(check("layer/embedding", &ps, &o, |g| {
        let y = emb.lookup(g, &[4, 1, 4, 5])?;
        probe(g, y, 2)
    })?);

    let cnn = CharCnn::new("cnn", 10, 3, 4, 2);
    let ps = inits(seed, |ps, r| cnn.init(ps, r))?;
    out.push(check("layer/char_cnn", &ps, &o, |g| {
        let y = cnn.encode(g, &[vec![2, 5, 7], vec![3], vec![9, 4, 4, 6]])?;
        probe(g, y, 3)
    })?);

    let cell = LstmCell::new("cell", 3, 4);
    let ps = inits(seed, |ps, r| cell.init(ps, r))?;
    out.push(check("layer/lstm_cell", &ps, &o, |g| {
        let xs = steps(g, seed, 2, 2, 3)?;
        let mut st = LstmState::zeros(g, 2, 4)?;
        for x in xs {
            st = cell.step(g, x, st)?;
        }
        let y = g.concat(&[st.h, st.c], 1)?;
        probe(g, y, 4)
    })?);

    let lstm = Lstm::new("lstm", 3, 4);
    let ps = inits(seed, |ps, r| lstm.cell.init(ps, r))?;
    out.push(check("layer/lstm_masked", &ps, &o, |g| {
        let xs = steps(g, seed, 4, 3, 3)?;
        let (outs, fin) = lstm.forward(g, &xs, &[4, 2, 1], None)?;
        let mut all = outs;
        all.push(fin.c);
        let y = g.concat(&all, 0)?;
        probe(g, y, 5)
    })?);

    let bi = BiLstm::new("bi", 3, 2);
    let ps = inits(seed, |ps, r| bi.init(ps, r))?;
    out.push(check("layer/bilstm", &ps, &o, |g| {
        let xs = steps(g, seed, 3, 2, 3)?;
        let r = bi.forward(g, &xs, &[3, 2])?;
        let mut all = r.steps;
        all.push(g.concat(&[r.fwd_final.h, r.bwd_final.h], 1)?);
        let y = g.concat(&all, 0)?;
        probe(g, y, 6)
    })?);

    let stack = StackedLstm::new("stack", 3, 3, 2);
    let ps = inits(seed, |ps, r| stack.init(ps, r))?;
    out.push(check("layer/stacked_lstm", &ps, &o, |g| {
        let xs = steps(g, seed, 3, 2, 3)?;
        let ys = stack.forward(g, &xs, &[3, 2])?;
        let y = g.concat(&ys, 0)?;
        probe(g, y, 7)
    })?);

    for variant in [AttentionVariant::Bidaf, AttentionVariant::C2q, AttentionVariant::Q2c] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ps = store(vec![
            ("w_s", uniform(&mut rng, &[1, 9], -1.0, 1.0)),
            ("u", uniform(&mut rng, &[2, 3], -1.0, 1.0)),
            ("h", uniform(&mut rng, &[4, 3], -1.0, 1.0)),
        ])?;
        out.push(check(&format!("layer/attention_{variant}"), &ps, &o, |g| {
            let (w, u, h) = (g.param("w_s")?, g.param("u")?, g.param("h")?);
            let s = mc::similarity(g, w, u, h)?;
            let att = mc::attend(g, s, u, h, variant)?;
            probe(g, att.g, 8)
        })?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ps = store(vec![
        ("start", uniform(&mut rng, &[1, 5], -1.0, 1.0)),
        ("end", uniform(&mut rng, &[1, 5], -1.0, 1.0)),
    ])?;
    out.push(check("layer/span_loss", &ps, &o, |g| {
        let (s, e) = (g.param("start")?, g.param("end")?);
        mc::mc_loss(g, s, e, (1, 3))
    })?);

    let ps = store(vec![("z", uniform(&mut rng, &[3, 5], -2.0, 2.0))])?;
    for gamma in [0.0, 2.0, 5.0] {
        out.push(check(&format!("layer/focal_g{gamma}"), &ps, &o, |g| {
            let z = g.param("z")?;
            let p = g.softmax_rows(z)?;
            let p = g.pick(p, &[0, 4, 2])?;
            let t = focal_terms(g, p, gamma)?;
            g.sum(t)
        })?);
    }

    let m = Seq2SeqModel::new(Seq2SeqConfig {
        src_vocab: 8,
        tgt_vocab: 8,
        emb_dim: 3,
        hidden: 4,
        ..Seq2SeqConfig::default()
    })?;
    let ps = m.init(seed)?.cast::<f64>();
    out.push(check("layer/additive_attention", &ps, &o, |g| {
        let enc = m.encode_source(g, &[vec![4, 5], vec![6, 0], vec![7, 0]], &[3, 1])?;
        let h = steps(g, seed, 1, 2, 4)?[0];
        let att = m.attention_step(g, &enc, h)?;
        let y = g.concat(&[att.a, att.alpha], 1)?;
        probe(g, y, 9)
    })?);
    Ok(out)
}

fn tiny_mc() -> McConfig {
    McConfig {
        vocab_size: 12,
        word_dim: 3,
        char_dim: 2,
        char_filters: 2,
        char_width: 2,
        hidden: 2,
        dropout: 0.0,
        ..McConfig::default()
    }
}

fn qa(passage: &[usize], question: &[usize], span: (usize, usize)) -> QaExample {
    let chars = |ids: &[usize]| ids.iter().map(|i| char_ids(&format!("w{i}"))).collect();
    QaExample {
        passage: passage.to_vec(),
        passage_chars: chars(passage),
        question: question.to_vec(),
        question_chars: chars(question),
        span,
    }
}

/// Both full models, tolerance [`MODEL_TOL`].
pub fn model_suite(suite: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let seed = suite.seed;
    let o = opts(MODEL_TOL, suite);
    let mut out = Vec::new();

    let batch = [qa(&[4, 7, 5, 9, 6], &[5, 8], (2, 3)), qa(&[10, 4, 11], &[11], (0, 0))];
    for variant in [AttentionVariant::Bidaf, AttentionVariant::Q2c] {
        let model = McModel::new(McConfig { variant, ..tiny_mc() })?;
        let ps = model.init(seed)?.cast::<f64>();
        out.push(check(&format!("model/mc_{variant}"), &ps, &o, |g| {
            let refs: Vec<&QaExample> = batch.iter().collect();
            model.loss(g, &refs)
        })?);
    }

    let dims = TransplantDims::from_mc(&tiny_mc());
    let pairs: [(&[usize], &[usize]); 2] = [(&[4, 5, 6], &[6, 5]), (&[7], &[4, 4, 7])];
    let batch = ParallelBatch::new(&pairs)?;
    for (mode, gamma) in [(MacnetMode::Off, 0.0), (MacnetMode::Full, 0.0), (MacnetMode::Full, 2.0)] {
        let model = Seq2SeqModel::new(Seq2SeqConfig {
            src_vocab: 8,
            tgt_vocab: 8,
            emb_dim: 3,
            hidden: 4,
            macnet: mode,
            transplant: Some(dims),
            gamma,
            ..Seq2SeqConfig::default()
        })?;
        let ps = model.init(seed)?.cast::<f64>();
        out.push(check(&format!("model/seq2seq_{mode}_g{gamma}"), &ps, &o, |g| {
            model.loss(g, &batch)
        })?);
    }
    Ok(out)
}

/// All suites in order: ops, layers, models.
pub fn run_all(suite: &SuiteOptions) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut reports = op_suite(suite)?;
    reports.extend(layer_suite(suite)?);
    reports.extend(model_suite(suite)?);
    Ok(SuiteReport {
        reports,
        elapsed: start.elapsed(),
    })
}
