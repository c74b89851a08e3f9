//! One PASS/FAIL line per acceptance criterion, tolerances pinned below.
//! The lines bypass output capture, so a plain `cargo test --test acceptance` shows them.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use macnet::checks::{self, SuiteOptions};
use macnet::cli::{self, Settings};
use macnet::data::{
    batchify, gen_synth_qa, gen_synth_translation, read_parallel, ParallelBatch, ParallelPair, QaExample, QaOptions,
    Task, TranslationOptions, Vocab, BOS,
};
use macnet::mc::{self, McConfig, McModel, McTrainOptions};
use macnet::metrics::{bleu, em_f1, rouge, BLEU_EPSILON};
use macnet::optim::clip_global_norm;
use macnet::params::ParamStore;
use macnet::seq2seq::{
    self, focal_loss, focal_terms, greedy, MacnetMode, Seq2SeqConfig, Seq2SeqEpochLog, Seq2SeqModel,
    Seq2SeqTrainOptions, W_Q,
};
use macnet::tensor::{Graph, Mode, Scalar, Tensor};
use macnet::transfer::{
    build_params, extract_bundle, load_checkpoint, save_checkpoint, Checkpoint, FreezePolicy, ModelKind, CONFIG_KEY,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const GRAD_BUDGET: Duration = Duration::from_secs(300);
const FOCAL_CE_TOL: f64 = 1e-6;
const FOCAL_POINT_TOL: f64 = 1e-9;
const ZERO_WQ_TOL: f64 = 1e-6;
const MC_EM_TARGET: f64 = 0.95;
const TRAIN_BUDGET: Duration = Duration::from_secs(600);
const COPY_BLEU_TARGET: f64 = 0.99;
const COPY_EXACT_TARGET: f64 = 0.95;
const METRIC_TOL: f64 = 1e-9;

/// Writes past the test harness's output capture so the report always shows.
macro_rules! report {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        writeln!(out, $($arg)*).unwrap();
        out.flush().unwrap();
    }};
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn run_cli(cmd: &str, kv: &[(&str, String)]) -> macnet::Result<()> {
    let layer = kv.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    let s = Settings::resolve(cmd, &[layer], true)?;
    cli::run_settings(&s).map(|_| ())
}

fn p(path: &Path) -> String {
    path.display().to_string()
}

fn qa_examples(seed: u64, n: usize) -> (Vec<QaExample>, Vocab) {
    let recs = gen_synth_qa(seed, n, &QaOptions::default()).unwrap();
    let vocab = Vocab::build(
        recs.iter()
            .flat_map(|r| r.passage.iter().chain(&r.question))
            .map(String::as_str),
    );
    (recs.iter().map(|r| r.encode(&vocab).unwrap()).collect(), vocab)
}

type Pairs = Vec<(Vec<usize>, Vec<usize>)>;

fn encode_pairs(train: &[ParallelPair], dev: &[ParallelPair]) -> (Pairs, Pairs, usize, usize) {
    let sv = Vocab::build(train.iter().flat_map(|p| &p.source).map(String::as_str));
    let tv = Vocab::build(train.iter().flat_map(|p| &p.target).map(String::as_str));
    let enc =
        |v: &[ParallelPair]| -> Pairs { v.iter().map(|p| (sv.encode(&p.source), tv.encode(&p.target))).collect() };
    (enc(train), enc(dev), sv.len(), tv.len())
}

fn step_distributions<S: Scalar>(m: &Seq2SeqModel, ps: &ParamStore<S>, src: &[usize], tgt: &[usize]) -> Vec<Vec<f64>> {
    let mut g = Graph::new(ps, Mode::Eval, 0);
    let steps: Vec<Vec<usize>> = src.iter().map(|&t| vec![t]).collect();
    let enc = m.encode_source(&mut g, &steps, &[src.len()]).unwrap();
    let mut st = m.initial_state(&mut g, &enc).unwrap();
    std::iter::once(BOS)
        .chain(tgt.iter().copied())
        .map(|y| {
            let out = m.decoder_step(&mut g, &enc, &[y], &mut st).unwrap();
            let d = g.softmax_rows(out.logits).unwrap();
            g.value(d).to_f64_vec()
        })
        .collect()
}

fn c1_gradients() -> Outcome {
    let report = checks::run_all(&SuiteOptions::default()).unwrap();
    let worst = |prefix: &str| {
        report
            .reports
            .iter()
            .filter(|r| r.name.starts_with(prefix))
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    };
    let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
    outcome(
        report.passed() && report.elapsed < GRAD_BUDGET,
        format!(
            "{} checks; max rel err ops {:.1e} layers {:.1e} (<1e-4), models {:.1e} (<1e-3); {:.1}s (<300s); failed {:?}",
            report.reports.len(),
            worst("op/"),
            worst("layer/"),
            worst("model/"),
            report.elapsed.as_secs_f64(),
            failed
        ),
    )
}

fn c2_focal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (b, v) = (rng.gen_range(1..=16), rng.gen_range(2..=30));
        let mut gold_p = Vec::with_capacity(b);
        let mut logits = Vec::with_capacity(b * v);
        let mut gold = Vec::with_capacity(b);
        let mut ce = 0.0;
        for _ in 0..b {
            let row: Vec<f64> = (0..v).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            let y = rng.gen_range(0..v);
            ce += -((row[y] - m) - z.ln());
            gold_p.push((row[y] - m).exp() / z);
            gold.push(y);
            logits.extend(row);
        }
        worst = worst.max((focal_loss(&gold_p, 0.0).unwrap().loss - ce).abs());
        let mut g = Graph::<f64>::bare();
        let x = g.constant(Tensor::new(vec![b, v], logits).unwrap()).unwrap();
        let probs = g.softmax_rows(x).unwrap();
        let picked = g.pick(probs, &gold).unwrap();
        let terms = focal_terms(&mut g, picked, 0.0).unwrap();
        let total = g.sum(terms).unwrap();
        worst = worst.max((g.value(total).item() - ce).abs());
    }
    let point = (focal_loss(&[0.5], 2.0).unwrap().loss - 0.25 * 2f64.ln()).abs();
    outcome(
        worst < FOCAL_CE_TOL && point < FOCAL_POINT_TOL,
        format!("100 batches max |FL(γ=0) − CE| = {worst:.1e} (<1e-6); |FL(0.5, γ=2) − ¼ln2| = {point:.1e} (<1e-9)"),
    )
}

fn c3_zero_injection() -> Outcome {
    let mc_cfg = McConfig {
        vocab_size: 30,
        hidden: 8,
        word_dim: 8,
        char_filters: 4,
        ..McConfig::default()
    };
    let dims = seq2seq::TransplantDims::from_mc(&mc_cfg);
    let cfg = |mode| Seq2SeqConfig {
        src_vocab: 24,
        tgt_vocab: 24,
        emb_dim: 16,
        hidden: 16,
        macnet: mode,
        transplant: Some(dims),
        ..Seq2SeqConfig::default()
    };
    let full = Seq2SeqModel::new(cfg(MacnetMode::Full)).unwrap();
    let enc_only = Seq2SeqModel::new(cfg(MacnetMode::Enc)).unwrap();
    let mut ps = full.init(3).unwrap();
    let wq = &mut ps.get_mut(W_Q).unwrap().value;
    *wq = Tensor::zeros(wq.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut steps = 0;
    for _ in 0..20 {
        let src: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(4..24)).collect();
        let tgt: Vec<usize> = (0..rng.gen_range(1..10)).map(|_| rng.gen_range(4..24)).collect();
        let a = step_distributions(&full, &ps, &src, &tgt);
        let b = step_distributions(&enc_only, &ps, &src, &tgt);
        for (x, y) in a.iter().zip(&b) {
            steps += 1;
            for (p, q) in x.iter().zip(y) {
                worst = worst.max((p - q).abs());
            }
        }
    }
    outcome(
        worst < ZERO_WQ_TOL,
        format!("{steps} decoder steps, max elementwise |Δp| = {worst:.1e} (<1e-6, f32)"),
    )
}

fn c4_mc_overfit() -> (Outcome, Checkpoint) {
    let start = Instant::now();
    let (ex, vocab) = qa_examples(0, 200);
    let model = McModel::new(McConfig {
        vocab_size: vocab.len(),
        ..McConfig::default()
    })
    .unwrap();
    let mut ps = model.init(0).unwrap();
    let opts = McTrainOptions {
        epochs: 30,
        ..McTrainOptions::default()
    };
    let logs = mc::train_mc(&model, &mut ps, &ex, &ex, &opts, |_| {}).unwrap();
    let first = logs.iter().find(|l| l.em >= MC_EM_TARGET).map(|l| l.epoch);
    let last = logs.last().unwrap();
    let elapsed = start.elapsed();
    let ckpt = Checkpoint::new(ModelKind::Mc, ps)
        .with_meta(CONFIG_KEY, &model.config)
        .unwrap();
    (
        outcome(
            first.is_some() && elapsed < TRAIN_BUDGET,
            format!(
                "train EM ≥ 0.95 first at epoch {first:?} (≤30); epoch 30 EM {:.3} F1 {:.3}; {:.1}s (<600s)",
                last.em,
                last.f1,
                elapsed.as_secs_f64()
            ),
        ),
        ckpt,
    )
}

fn c5_copy_overfit() -> Outcome {
    let start = Instant::now();
    let pairs = gen_synth_translation(0, 500, Task::Copy, &TranslationOptions::default()).unwrap();
    let (train, _, sv, tv) = encode_pairs(&pairs, &[]);
    let model = Seq2SeqModel::new(Seq2SeqConfig {
        src_vocab: sv,
        tgt_vocab: tv,
        ..Seq2SeqConfig::default()
    })
    .unwrap();
    let mut ps = build_params(&model, None, 0).unwrap();
    let opts = Seq2SeqTrainOptions::default();
    seq2seq::train_seq2seq(&model, &mut ps, &train, &[], &opts, |_| {}).unwrap();
    let (score, hyps) = seq2seq::evaluate_bleu(&model, &ps, &train).unwrap();
    let exact = hyps.iter().zip(&train).filter(|(h, (s, _))| h == &s).count() as f64 / train.len() as f64;
    let greedy_ok = train
        .iter()
        .zip(&hyps)
        .take(20)
        .all(|((s, _), h)| greedy(&model, &ps, s, 20).unwrap() == *h);
    let elapsed = start.elapsed();
    outcome(
        score >= COPY_BLEU_TARGET && exact >= COPY_EXACT_TARGET && greedy_ok && elapsed < TRAIN_BUDGET,
        format!(
            "after {} epochs train BLEU {score:.4} (≥0.99), exact copies {:.1}% (≥95%); {:.1}s (<600s)",
            opts.epochs,
            100.0 * exact,
            elapsed.as_secs_f64()
        ),
    )
}

fn c6_transfer_table() -> Outcome {
    const PRETRAIN_EPOCHS: usize = 10;
    const EPOCHS: usize = 3;
    let (ex, vocab) = qa_examples(0, 2000);
    let mc_model = McModel::new(McConfig {
        vocab_size: vocab.len(),
        ..McConfig::default()
    })
    .unwrap();
    let mut mc_ps = mc_model.init(0).unwrap();
    let mc_opts = McTrainOptions {
        epochs: PRETRAIN_EPOCHS,
        ..McTrainOptions::default()
    };
    let mc_log = mc::train_mc(&mc_model, &mut mc_ps, &ex, &ex[..200], &mc_opts, |_| {}).unwrap();
    let ckpt = Checkpoint::new(ModelKind::Mc, mc_ps)
        .with_meta(CONFIG_KEY, &mc_model.config)
        .unwrap();
    let bundle = extract_bundle(&ckpt, FreezePolicy::default()).unwrap();

    let opts = TranslationOptions::default();
    let train = gen_synth_translation(0, 2000, Task::Cipher, &opts).unwrap();
    let dev = gen_synth_translation(0xd3e7_5eed, 200, Task::Cipher, &opts).unwrap();
    let (train, dev, sv, tv) = encode_pairs(&train, &dev);
    let modes = [MacnetMode::Off, MacnetMode::RandomInit, MacnetMode::Full];
    let mut table = vec![Vec::new(); modes.len()];
    for seed in 0..5u64 {
        for (i, mode) in modes.into_iter().enumerate() {
            let model = Seq2SeqModel::new(Seq2SeqConfig {
                src_vocab: sv,
                tgt_vocab: tv,
                macnet: mode,
                transplant: Some(bundle.dims()),
                ..Seq2SeqConfig::default()
            })
            .unwrap();
            let mut ps = build_params(&model, Some(&bundle), seed).unwrap();
            let o = Seq2SeqTrainOptions {
                epochs: EPOCHS,
                seed,
                ..Seq2SeqTrainOptions::default()
            };
            let logs = seq2seq::train_seq2seq(&model, &mut ps, &train, &dev, &o, |_| {}).unwrap();
            table[i].push(logs.last().unwrap().bleu);
        }
    }
    report!(
        "      transfer table: MC pretrained {PRETRAIN_EPOCHS} epochs on 2000 QA (dev EM {:.3}); seq2seq {EPOCHS} epochs on 2000 cipher pairs; held-out BLEU×100",
        mc_log.last().unwrap().em
    );
    report!(
        "      {:<12} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}",
        "mode",
        "s0",
        "s1",
        "s2",
        "s3",
        "s4",
        "mean"
    );
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (mode, row) in modes.iter().zip(&table) {
        let cells: String = row.iter().map(|b| format!(" {:>7.2}", 100.0 * b)).collect();
        report!("      {:<12}{cells} {:>7.2}", mode.to_string(), 100.0 * mean(row));
    }
    let delta = 100.0 * (mean(&table[2]) - mean(&table[0]));
    let finite = table.iter().flatten().all(|b| b.is_finite() && (0.0..=1.0).contains(b));
    outcome(
        finite,
        format!("table produced (no threshold); mean full − baseline = {delta:+.2} BLEU"),
    )
}

fn c7_ablation(dir: &Path) -> Outcome {
    let data = dir.join("data");
    let mc = dir.join("mc");
    run_cli(
        "gen-data",
        &[
            ("out", p(&data)),
            ("pairs_train", "200".into()),
            ("qa_train", "100".into()),
        ],
    )
    .unwrap();
    run_cli(
        "pretrain-mc",
        &[("out", p(&mc)), ("data", p(&data)), ("epochs", "2".into())],
    )
    .unwrap();
    let mut completed = Vec::new();
    for mode in MacnetMode::ALL {
        let out = dir.join(format!("s2s_{mode}"));
        let res = run_cli(
            "train-seq2seq",
            &[
                ("out", p(&out)),
                ("data", p(&data)),
                ("mc", p(&mc.join(cli::MC_CHECKPOINT))),
                ("macnet", mode.to_string()),
                ("epochs", "2".into()),
            ],
        );
        let rows = fs::read_to_string(out.join(cli::S2S_LOG)).map_or(0, |t| t.lines().count() - 1);
        if res.is_ok() && rows == 2 {
            completed.push(mode.to_string());
        }
    }
    let ckpt = load_checkpoint(&mc.join(cli::MC_CHECKPOINT)).unwrap();
    let bundle = extract_bundle(&ckpt, FreezePolicy::default()).unwrap();
    let same = |mode| {
        let model = Seq2SeqModel::new(Seq2SeqConfig {
            macnet: mode,
            transplant: Some(bundle.dims()),
            ..Seq2SeqConfig::default()
        })
        .unwrap();
        let ps = build_params(&model, Some(&bundle), 0).unwrap();
        bundle
            .params
            .iter()
            .filter(|(n, p)| ps.get(n).unwrap().value.bit_eq(&p.value))
            .count()
    };
    let (n, full_same, random_same) = (
        bundle.params.len(),
        same(MacnetMode::Full),
        same(MacnetMode::RandomInit),
    );
    outcome(
        completed.len() == 5 && full_same == n && random_same == 0,
        format!(
            "modes completed {completed:?}; pretrained tensors bitwise kept: full {full_same}/{n}, random-init {random_same}/{n}"
        ),
    )
}

/// Cross-entropy training written independently of the focal path.
fn plain_mle_logs(dir: &Path, seed: u64, epochs: usize) -> Vec<Seq2SeqEpochLog> {
    let train = read_parallel(&dir.join(cli::PAIRS_TRAIN)).unwrap();
    let dev = read_parallel(&dir.join(cli::PAIRS_DEV)).unwrap();
    let (train, dev, sv, tv) = encode_pairs(&train, &dev);
    let model = Seq2SeqModel::new(Seq2SeqConfig {
        src_vocab: sv,
        tgt_vocab: tv,
        ..Seq2SeqConfig::default()
    })
    .unwrap();
    let mut ps = build_params(&model, None, seed).unwrap();
    let defaults = Seq2SeqTrainOptions::default();
    let mut opt = defaults.optimizer.build();
    let mut logs = Vec::new();
    for epoch in 0..epochs {
        let (mut total, mut tokens) = (0.0, 0);
        for (k, idx) in batchify(train.len(), defaults.batch_size, seed, epoch)
            .unwrap()
            .into_iter()
            .enumerate()
        {
            let pairs: Vec<(&[usize], &[usize])> = idx.iter().map(|&i| (&train[i].0[..], &train[i].1[..])).collect();
            let batch = ParallelBatch::new(&pairs).unwrap();
            let (loss, mut grads) = {
                let mut g = Graph::new(&ps, Mode::Train, seed ^ ((epoch as u64) << 32 | k as u64));
                let enc = model.encode_source(&mut g, &batch.src, &batch.src_lens).unwrap();
                let mut st = model.initial_state(&mut g, &enc).unwrap();
                let mut terms = Vec::new();
                for (t, (prev, gold)) in batch.tgt_in.iter().zip(&batch.tgt_out).enumerate() {
                    let out = model.decoder_step(&mut g, &enc, prev, &mut st).unwrap();
                    let probs = g.softmax_rows(out.logits).unwrap();
                    let pk = g.pick(probs, gold).unwrap();
                    let lp = g.log(pk).unwrap();
                    let mut nll = g.affine(lp, -1.0, 0.0).unwrap();
                    let valid: Vec<f32> = (0..batch.size()).map(|b| batch.tgt_valid(t, b) as u8 as f32).collect();
                    if valid.contains(&0.0) {
                        let w = g.constant(Tensor::new(vec![batch.size(), 1], valid).unwrap()).unwrap();
                        nll = g.scale_rows(nll, w).unwrap();
                    }
                    terms.push(nll);
                }
                let all = g.concat(&terms, 0).unwrap();
                let sum = g.sum(all).unwrap();
                let scaled = g.affine(sum, 1.0 / batch.size() as f64, 0.0).unwrap();
                g.backward(scaled).unwrap();
                (f64::from(g.value(sum).item()), g.param_grads())
            };
            clip_global_norm(&mut grads, defaults.clip_norm.unwrap());
            opt.step(&mut ps, &grads).unwrap();
            total += loss;
            tokens += batch.target_tokens();
        }
        logs.push(Seq2SeqEpochLog {
            epoch: epoch + 1,
            loss: total / tokens as f64,
            bleu: seq2seq::evaluate_bleu(&model, &ps, &dev).unwrap().0,
        });
    }
    logs
}

fn c8_gamma_sweep(dir: &Path) -> Outcome {
    const EPOCHS: usize = 10;
    let data = dir.join("zipf");
    let sweep = dir.join("sweep");
    run_cli(
        "gen-data",
        &[("out", p(&data)), ("task", "cipher".into()), ("zipf", "1.2".into())],
    )
    .unwrap();
    let start = Instant::now();
    run_cli(
        "sweep-gamma",
        &[("out", p(&sweep)), ("data", p(&data)), ("epochs", EPOCHS.to_string())],
    )
    .unwrap();
    let elapsed = start.elapsed();
    let csv = fs::read_to_string(sweep.join(cli::SWEEP_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let well_formed = lines[0] == "gamma,dev_bleu,train_loss"
        && lines.len() == 9
        && lines[1..].iter().enumerate().all(|(i, l)| {
            let c: Vec<&str> = l.split(',').collect();
            c.len() == 3
                && c[0] == i.to_string()
                && c[1].parse::<f64>().is_ok_and(|b| (0.0..=1.0).contains(&b))
                && c[2].parse::<f64>().is_ok_and(f64::is_finite)
        });
    let mle = plain_mle_logs(&data, 0, EPOCHS);
    let mle_log: String = std::iter::once(Seq2SeqEpochLog::CSV_HEADER.to_string())
        .chain(mle.iter().map(Seq2SeqEpochLog::csv_row))
        .map(|l| l + "\n")
        .collect();
    let g0_log = fs::read_to_string(sweep.join("gamma_0").join(cli::S2S_LOG)).unwrap();
    let last = mle.last().unwrap();
    let row_matches = lines.get(1) == Some(&format!("0,{:.6},{:.6}", last.bleu, last.loss).as_str());
    let bleus: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap_or("?")).collect();
    outcome(
        well_formed && row_matches && mle_log == g0_log,
        format!(
            "8 rows well-formed: {well_formed}; γ=0 log identical to plain MLE run: {}; dev BLEU by γ {bleus:?}; {:.0}s",
            row_matches && mle_log == g0_log,
            elapsed.as_secs_f64()
        ),
    )
}

fn c9_metrics() -> Outcome {
    let t = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let mut errs = Vec::new();
    // hypothesis has no 4-gram at all: p1..p3 = 1, p4 smoothed to ε, BP = e^(1 − 4/3)
    let want = (BLEU_EPSILON.ln() / 4.0).exp() * (1.0 - 4.0 / 3.0f64).exp();
    errs.push((bleu(&[t("the cat sat")], &[t("the cat sat down")], 4).unwrap().score - want).abs());
    let [r1, r2, rl] = rouge(&[t("a b c")], &[t("a c d")]).unwrap();
    errs.push((r1.score - 2.0 / 3.0).abs());
    errs.push(r2.score.abs());
    errs.push((rl.score - 2.0 / 3.0).abs());
    let (em, f1) = em_f1(&t("a b"), &t("b c"));
    errs.push(em.abs());
    errs.push((f1 - 0.5).abs());
    let corpus = [t("x y z w"), t("q r s")];
    errs.push((bleu(&corpus, &corpus, 4).unwrap().score - 1.0).abs());
    for r in rouge(&corpus, &corpus).unwrap() {
        errs.push((r.score - 1.0).abs());
    }
    let (em, f1) = em_f1(&t("q r"), &t("q r"));
    errs.push((em - 1.0).abs() + (f1 - 1.0).abs());
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    outcome(
        worst < METRIC_TOL,
        format!("BLEU/ROUGE-1/2/L/EM/F1 worked examples and identity inputs, max error {worst:.1e} (<1e-9)"),
    )
}

fn c10_checkpoints(dir: &Path, mc_ckpt: &Checkpoint) -> Outcome {
    let path = dir.join("mc.ckpt");
    save_checkpoint(&path, mc_ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let round_trip = back.params.bit_eq(&mc_ckpt.params) && back.metadata == mc_ckpt.metadata;

    let bundle = extract_bundle(&back, FreezePolicy::default()).unwrap();
    let model = Seq2SeqModel::new(Seq2SeqConfig {
        macnet: MacnetMode::Full,
        transplant: Some(bundle.dims()),
        ..Seq2SeqConfig::default()
    })
    .unwrap();
    let ps = build_params(&model, Some(&bundle), 4).unwrap();
    let s2s_path = dir.join("s2s.ckpt");
    save_checkpoint(&s2s_path, &Checkpoint::new(ModelKind::Seq2seq, ps.clone())).unwrap();
    let loaded = load_checkpoint(&s2s_path).unwrap().params;
    let inputs = [
        (vec![5usize, 9, 7], vec![6usize, 8]),
        (vec![12, 4, 4, 30, 11], vec![20, 21, 22]),
    ];
    let same_outputs = inputs.iter().all(|(s, t)| {
        let a = step_distributions(&model, &ps, s, t);
        let b = step_distributions(&model, &loaded, s, t);
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .all(|(x, y)| x.to_bits() == y.to_bits())
    });
    outcome(
        round_trip && loaded.bit_eq(&ps) && same_outputs,
        format!(
            "MC save→load bitwise: {round_trip}; extract→attach→save→load: params bitwise {}, forward outputs bitwise {same_outputs}",
            loaded.bit_eq(&ps)
        ),
    )
}

fn pipeline(dir: &Path) {
    let data = dir.join("data");
    let mc = dir.join("mc");
    let s2s = dir.join("s2s");
    fn args(out: &Path, rest: &[(&'static str, String)]) -> Vec<(&'static str, String)> {
        let mut v = vec![("out", p(out)), ("seed", "7".to_string())];
        v.extend_from_slice(rest);
        v
    }
    run_cli(
        "gen-data",
        &args(&data, &[("pairs_train", "120".into()), ("qa_train", "60".into())]),
    )
    .unwrap();
    run_cli("pretrain-mc", &args(&mc, &[("data", p(&data)), ("epochs", "2".into())])).unwrap();
    run_cli(
        "train-seq2seq",
        &args(
            &s2s,
            &[
                ("data", p(&data)),
                ("mc", p(&mc.join(cli::MC_CHECKPOINT))),
                ("macnet", "full".into()),
                ("epochs", "2".into()),
                ("dropout", "0.1".into()),
            ],
        ),
    )
    .unwrap();
    let input = p(&data.join(cli::PAIRS_DEV));
    run_cli(
        "evaluate",
        &args(
            &dir.join("eval"),
            &[("checkpoint", p(&s2s.join(cli::S2S_CHECKPOINT))), ("input", input)],
        ),
    )
    .unwrap();
    run_cli(
        "sweep-gamma",
        &args(
            &dir.join("sweep"),
            &[("data", p(&data)), ("epochs", "1".into()), ("gammas", "0,3".into())],
        ),
    )
    .unwrap();
}

fn files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                let mut bytes = fs::read(&path).unwrap();
                if rel.ends_with(cli::CONFIG_ECHO) {
                    // the echo records the (differing) output directory
                    let text = String::from_utf8(bytes).unwrap();
                    let root = p(root);
                    bytes = text.replace(&root, "<root>").into_bytes();
                }
                out.push((rel, bytes));
            }
        }
    }
    out.sort();
    out
}

fn c11_determinism(dir: &Path) -> Outcome {
    let (a, b) = (dir.join("a"), dir.join("b"));
    pipeline(&a);
    pipeline(&b);
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        fa.len() == fb.len() && differing.is_empty() && fa.len() > 10,
        format!(
            "gen-data, pretrain-mc, train-seq2seq, evaluate, sweep-gamma run twice: {} files byte-identical, differing {differing:?}",
            fa.len()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let tmp = TempDir::new().unwrap();
    report!();
    let mut results: Vec<(&str, &str, Outcome)> = Vec::new();
    let mut record = |id: &'static str, name: &'static str, o: Outcome| {
        report!("{} {id} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record("C1", "gradient integrity", c1_gradients());
    record("C2", "focal-loss reduction", c2_focal());
    record("C3", "zero-injection equivalence", c3_zero_injection());
    let (o, mc_ckpt) = c4_mc_overfit();
    record("C4", "MC overfit", o);
    record("C5", "seq2seq copy overfit", c5_copy_overfit());
    record("C6", "transfer directionality", c6_transfer_table());
    record("C7", "ablation lattice", c7_ablation(&tmp.path().join("c7")));
    record("C8", "gamma sweep", c8_gamma_sweep(&tmp.path().join("c8")));
    record("C9", "metric oracles", c9_metrics());
    record(
        "C10",
        "checkpoint fidelity",
        c10_checkpoints(&tmp.path().join("c10"), &mc_ckpt),
    );
    record("C11", "determinism", c11_determinism(&tmp.path().join("c11")));
    let failed: Vec<&str> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
