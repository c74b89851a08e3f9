use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process;

use super::{keys, Settings, TRAIN_SEQ2SEQ};
use crate::checks::{self, SuiteOptions};
use crate::data::{
    gen_synth_qa, gen_synth_translation, read_parallel, read_qa, write_parallel, write_qa, ParallelPair, QaExample,
    QaOptions, QaRecord, Task, TranslationOptions, Vocab,
};
use crate::error::{Error, Result};
use crate::mc::{self, McConfig, McModel, McTrainOptions};
use crate::metrics::{bleu, rouge, span_reports, write_reports};
use crate::optim::OptimizerConfig;
use crate::seq2seq::{self, DecodeMode, Seq2SeqConfig, Seq2SeqModel, Seq2SeqTrainOptions};
use crate::tensor::OpKind;
use crate::transfer::{
    build_params, extract_bundle, load_checkpoint, save_checkpoint, Checkpoint, FreezePolicy, ModelKind, CONFIG_KEY,
};

pub const CONFIG_ECHO: &str = "config.txt";
pub const QA_TRAIN: &str = "qa_train.jsonl";
pub const QA_DEV: &str = "qa_dev.jsonl";
pub const PAIRS_TRAIN: &str = "pairs_train.tsv";
pub const PAIRS_DEV: &str = "pairs_dev.tsv";
pub const MC_CHECKPOINT: &str = "mc.ckpt";
pub const MC_LOG: &str = "mc_log.csv";
pub const S2S_CHECKPOINT: &str = "seq2seq.ckpt";
pub const S2S_LOG: &str = "train_log.csv";
pub const SWEEP_CSV: &str = "sweep.csv";
const HYPOTHESES: &str = "hypotheses.txt";
const METRICS: &str = "metrics.csv";
const GRADCHECK_REPORT: &str = "gradcheck.txt";

/// Held-out splits are drawn from a stream disjoint from training.
const DEV_STREAM: u64 = 0xd3e7_5eed;
pub const VOCAB_KEY: &str = "vocab";
pub const SRC_VOCAB_KEY: &str = "src_vocab";
pub const TGT_VOCAB_KEY: &str = "tgt_vocab";

/// How a successful command ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    ChecksFailed,
}

/// Creates the output directory, refusing to clobber `outputs` without
/// force, and writes the resolved config echo.
fn prepare_out(s: &Settings, outputs: &[&str]) -> Result<PathBuf> {
    let dir = s.out_dir();
    if !s.force {
        for name in outputs.iter().chain([&CONFIG_ECHO]) {
            let p = dir.join(name);
            if p.exists() {
                return Err(Error::Exists(p));
            }
        }
    }
    fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    let echo = dir.join(CONFIG_ECHO);
    fs::write(&echo, s.echo()).map_err(|e| Error::file(&echo, e))?;
    Ok(dir)
}

struct CsvLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl CsvLog {
    fn create(path: PathBuf, header: &str) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::file(&path, e))?;
        let mut log = CsvLog {
            path,
            out: BufWriter::new(f),
        };
        log.row(header)?;
        Ok(log)
    }

    fn row(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::file(&self.path, e))
    }
}

fn optimizer(s: &Settings) -> Result<OptimizerConfig> {
    let opt: OptimizerConfig = s.get("optimizer")?;
    Ok(match s.opt::<f64>("lr")? {
        Some(lr) if lr > 0.0 => opt.with_lr(lr),
        Some(lr) => return Err(Error::Config(format!("lr must be positive, got {lr}"))),
        None => opt,
    })
}

pub fn gen_data(s: &Settings) -> Result<Outcome> {
    let dir = prepare_out(s, &[QA_TRAIN, QA_DEV, PAIRS_TRAIN, PAIRS_DEV])?;
    let seed: u64 = s.get("seed")?;
    let qa = QaOptions {
        vocab_size: s.get("qa_vocab")?,
        min_passage: s.get("passage_min")?,
        max_passage: s.get("passage_max")?,
        value_len: s.get("value_len")?,
    };
    write_qa(&dir.join(QA_TRAIN), &gen_synth_qa(seed, s.get("qa_train")?, &qa)?)?;
    write_qa(
        &dir.join(QA_DEV),
        &gen_synth_qa(seed ^ DEV_STREAM, s.get("qa_dev")?, &qa)?,
    )?;

    let task: Task = s.get("task")?;
    let tr = TranslationOptions {
        vocab_size: s.get("pair_vocab")?,
        min_len: s.get("min_len")?,
        max_len: s.get("max_len")?,
        zipf: s.opt("zipf")?,
        cipher_key: s.get("cipher_key")?,
    };
    let train = gen_synth_translation(seed, s.get("pairs_train")?, task, &tr)?;
    let dev = gen_synth_translation(seed ^ DEV_STREAM, s.get("pairs_dev")?, task, &tr)?;
    write_parallel(&dir.join(PAIRS_TRAIN), &train)?;
    write_parallel(&dir.join(PAIRS_DEV), &dev)?;
    println!(
        "wrote {} QA and {} {task} pairs to {}",
        qa_len(s)?,
        train.len() + dev.len(),
        dir.display()
    );
    Ok(Outcome::Done)
}

fn qa_len(s: &Settings) -> Result<usize> {
    Ok(s.get::<usize>("qa_train")? + s.get::<usize>("qa_dev")?)
}

fn data_file(s: &Settings, name: &str) -> Result<PathBuf> {
    let dir = s
        .path("data")
        .ok_or_else(|| Error::Config("no data directory given".into()))?;
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::Data(format!("{} not found (run gen-data first?)", p.display())));
    }
    Ok(p)
}

fn qa_vocab(records: &[QaRecord]) -> Vocab {
    Vocab::build(
        records
            .iter()
            .flat_map(|r| r.passage.iter().chain(&r.question))
            .map(String::as_str),
    )
}

fn encode_qa(records: &[QaRecord], vocab: &Vocab) -> Result<Vec<QaExample>> {
    records.iter().map(|r| r.encode(vocab)).collect()
}

pub fn pretrain_mc(s: &Settings) -> Result<Outcome> {
    let train_recs = read_qa(&data_file(s, QA_TRAIN)?)?;
    let dev_recs = read_qa(&data_file(s, QA_DEV)?)?;
    let dir = prepare_out(s, &[MC_CHECKPOINT, MC_LOG])?;
    let seed: u64 = s.get("seed")?;
    let vocab = qa_vocab(&train_recs);
    let (train, dev) = (encode_qa(&train_recs, &vocab)?, encode_qa(&dev_recs, &vocab)?);
    let config = McConfig {
        vocab_size: vocab.len(),
        word_dim: s.get("word_dim")?,
        char_dim: s.get("char_dim")?,
        char_filters: s.get("char_filters")?,
        char_width: s.get("char_width")?,
        hidden: s.get("hidden")?,
        variant: s.get("variant")?,
        dropout: s.get("dropout")?,
        max_span: s.get("max_span")?,
    };
    let model = McModel::new(config)?;
    let mut ps = model.init(seed)?;
    let opts = McTrainOptions {
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        optimizer: optimizer(s)?,
        clip_norm: s.opt("clip")?,
        seed,
    };
    let mut log = CsvLog::create(dir.join(MC_LOG), mc::McEpochLog::CSV_HEADER)?;
    let mut io = Ok(());
    let logs = mc::train_mc(&model, &mut ps, &train, &dev, &opts, |l| {
        log::info!(
            "mc epoch {}: loss {:.4} dev em {:.4} f1 {:.4}",
            l.epoch,
            l.loss,
            l.em,
            l.f1
        );
        if io.is_ok() {
            io = log.row(&l.csv_row());
        }
    })?;
    io?;
    let ckpt = Checkpoint::new(ModelKind::Mc, ps)
        .with_meta(CONFIG_KEY, &model.config)?
        .with_meta(VOCAB_KEY, vocab.tokens())?
        .with_meta("seed", seed)?;
    save_checkpoint(&dir.join(MC_CHECKPOINT), &ckpt)?;
    if let Some(l) = logs.last() {
        println!("{}", mc::McEpochLog::CSV_HEADER);
        println!("{}", l.csv_row());
    }
    Ok(Outcome::Done)
}

fn pair_vocabs(pairs: &[ParallelPair]) -> (Vocab, Vocab) {
    let src = Vocab::build(pairs.iter().flat_map(|p| &p.source).map(String::as_str));
    let tgt = Vocab::build(pairs.iter().flat_map(|p| &p.target).map(String::as_str));
    (src, tgt)
}

fn encode_pairs(pairs: &[ParallelPair], src: &Vocab, tgt: &Vocab) -> Vec<(Vec<usize>, Vec<usize>)> {
    pairs
        .iter()
        .map(|p| (src.encode(&p.source), tgt.encode(&p.target)))
        .collect()
}

pub fn train_seq2seq(s: &Settings) -> Result<Outcome> {
    let train_pairs = read_parallel(&data_file(s, PAIRS_TRAIN)?)?;
    let dev_pairs = read_parallel(&data_file(s, PAIRS_DEV)?)?;
    let seed: u64 = s.get("seed")?;
    let mode: seq2seq::MacnetMode = s.get("macnet")?;
    let bundle = match (mode.needs_bundle(), s.path("mc")) {
        (false, _) => None,
        (true, None) => {
            return Err(Error::Config(format!(
                "macnet={mode} needs a pretrained comprehension checkpoint (--mc)"
            )))
        }
        (true, Some(p)) => {
            let freeze = FreezePolicy {
                encoder: s.get("freeze_encoder")?,
                modeling: s.get("freeze_modeling")?,
            };
            Some(extract_bundle(&load_checkpoint(&p)?, freeze)?)
        }
    };
    let dir = prepare_out(s, &[S2S_CHECKPOINT, S2S_LOG])?;
    let (src_vocab, tgt_vocab) = pair_vocabs(&train_pairs);
    let train = encode_pairs(&train_pairs, &src_vocab, &tgt_vocab);
    let dev = encode_pairs(&dev_pairs, &src_vocab, &tgt_vocab);
    let config = Seq2SeqConfig {
        src_vocab: src_vocab.len(),
        tgt_vocab: tgt_vocab.len(),
        emb_dim: s.get("emb_dim")?,
        hidden: s.get("hidden")?,
        macnet: mode,
        transplant: bundle.as_ref().map(|b| b.dims()),
        gamma: s.get("gamma")?,
        max_decode_len: s.get("max_decode_len")?,
        decode: s.get("decode")?,
        dropout: s.get("dropout")?,
    };
    let model = Seq2SeqModel::new(config)?;
    let mut ps = build_params(&model, bundle.as_ref(), seed)?;
    let opts = Seq2SeqTrainOptions {
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        optimizer: optimizer(s)?,
        clip_norm: s.opt("clip")?,
        seed,
    };
    let mut log = CsvLog::create(dir.join(S2S_LOG), seq2seq::Seq2SeqEpochLog::CSV_HEADER)?;
    let mut io = Ok(());
    let logs = seq2seq::train_seq2seq(&model, &mut ps, &train, &dev, &opts, |l| {
        log::info!("{mode} epoch {}: loss {:.4} dev bleu {:.4}", l.epoch, l.loss, l.bleu);
        if io.is_ok() {
            io = log.row(&l.csv_row());
        }
    })?;
    io?;
    let ckpt = Checkpoint::new(ModelKind::Seq2seq, ps)
        .with_meta(CONFIG_KEY, &model.config)?
        .with_meta(SRC_VOCAB_KEY, src_vocab.tokens())?
        .with_meta(TGT_VOCAB_KEY, tgt_vocab.tokens())?
        .with_meta("seed", seed)?;
    save_checkpoint(&dir.join(S2S_CHECKPOINT), &ckpt)?;
    if let Some(l) = logs.last() {
        println!("{}", seq2seq::Seq2SeqEpochLog::CSV_HEADER);
        println!("{}", l.csv_row());
    }
    Ok(Outcome::Done)
}

fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let text: String = lines.iter().map(|l| l.join(" ") + "\n").collect();
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn evaluate(s: &Settings) -> Result<Outcome> {
    let ckpt_path = s
        .path("checkpoint")
        .ok_or_else(|| Error::Config("evaluate needs --checkpoint".into()))?;
    let input = s
        .path("input")
        .ok_or_else(|| Error::Config("evaluate needs --input".into()))?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let dir = prepare_out(s, &[HYPOTHESES, METRICS])?;
    let (hyps, reports) = match ckpt.kind {
        ModelKind::Mc => {
            let model = McModel::new(ckpt.meta(CONFIG_KEY)?)?;
            let vocab = Vocab::from_tokens(ckpt.meta(VOCAB_KEY)?)?;
            let records = read_qa(&input)?;
            let spans = mc::predict(&model, &ckpt.params, &encode_qa(&records, &vocab)?)?;
            let preds: Vec<Vec<String>> = records
                .iter()
                .zip(&spans)
                .map(|(r, &(a, b))| r.passage[a..=b].to_vec())
                .collect();
            let golds: Vec<Vec<String>> = records.iter().map(|r| r.answer().to_vec()).collect();
            (preds.clone(), span_reports(&preds, &golds)?.to_vec())
        }
        ModelKind::Seq2seq => {
            let mut config: Seq2SeqConfig = ckpt.meta(CONFIG_KEY)?;
            if let Some(d) = s.opt::<DecodeMode>("decode")? {
                config.decode = d;
            }
            let model = Seq2SeqModel::new(config)?;
            let src = Vocab::from_tokens(ckpt.meta(SRC_VOCAB_KEY)?)?;
            let tgt = Vocab::from_tokens(ckpt.meta(TGT_VOCAB_KEY)?)?;
            let pairs = read_parallel(&input)?;
            let hyps = pairs
                .iter()
                .map(|p| Ok(tgt.decode(&seq2seq::decode(&model, &ckpt.params, &src.encode(&p.source))?)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.target.clone()).collect();
            let mut reports = vec![bleu(&hyps, &refs, 4)?];
            reports.extend(rouge(&hyps, &refs)?);
            (hyps, reports)
        }
        ModelKind::Bundle => {
            return Err(Error::Kind {
                expected: "mc or seq2seq".into(),
                found: ModelKind::Bundle.to_string(),
            })
        }
    };
    write_lines(&dir.join(HYPOTHESES), &hyps)?;
    write_reports(&dir.join(METRICS), &reports)?;
    println!("metric,score,n_examples");
    for r in &reports {
        println!("{}", r.csv_row());
    }
    Ok(Outcome::Done)
}

/// Settings of the training run for one focal exponent of a sweep.
fn sweep_run(s: &Settings, gamma: f64) -> Result<Settings> {
    let layer = keys("train-seq2seq")
        .iter()
        .map(|k| (k.name.to_string(), s.raw(k.name).to_string()))
        .collect();
    let mut run = Settings::resolve("train-seq2seq", &[layer], s.force)?;
    run = run.with("gamma", gamma)?;
    run.with("out", s.out_dir().join(format!("gamma_{gamma}")).display())
}

fn executable() -> Result<PathBuf> {
    match std::env::var_os("MACNET_EXE") {
        Some(p) => Ok(PathBuf::from(p)),
        None => Ok(std::env::current_exe()?),
    }
}

fn spawn(run: &Settings) -> Result<process::Child> {
    let mut cmd = process::Command::new(executable()?);
    cmd.arg(&run.command);
    for k in TRAIN_SEQ2SEQ.iter().chain(super::COMMON) {
        cmd.arg(format!("--{}", k.name.replace('_', "-"))).arg(run.raw(k.name));
    }
    if run.force {
        cmd.arg("--force");
    }
    cmd.stdout(process::Stdio::null());
    Ok(cmd.spawn()?)
}

fn last_log_row(path: &Path) -> Result<(f64, f64)> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let last = text
        .lines()
        .skip(1)
        .last()
        .ok_or_else(|| Error::Data(format!("{} has no epochs", path.display())))?;
    let cols: Vec<&str> = last.split(',').collect();
    let num = |i: usize| -> Result<f64> {
        cols.get(i)
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: malformed row {last}", path.display())))
    };
    Ok((num(1)?, num(2)?))
}

pub fn sweep_gamma(s: &Settings) -> Result<Outcome> {
    let gammas = s
        .raw("gammas")
        .split(',')
        .map(|g| {
            g.trim()
                .parse::<f64>()
                .ok()
                .filter(|g| *g >= 0.0 && g.is_finite())
                .ok_or_else(|| Error::Config(format!("gammas: {g} is not a finite value >= 0")))
        })
        .collect::<Result<Vec<_>>>()?;
    if gammas.is_empty() {
        return Err(Error::Config("gammas is empty".into()));
    }
    let dir = prepare_out(s, &[SWEEP_CSV])?;
    let runs = gammas.iter().map(|&g| sweep_run(s, g)).collect::<Result<Vec<_>>>()?;
    let workers: usize = s.get("parallel")?;
    if workers == 0 {
        for run in &runs {
            train_seq2seq(run)?;
        }
    } else {
        for chunk in runs.chunks(workers) {
            let children = chunk.iter().map(spawn).collect::<Result<Vec<_>>>()?;
            for (mut child, run) in children.into_iter().zip(chunk) {
                let status = child.wait()?;
                if !status.success() {
                    return Err(Error::Data(format!(
                        "training for gamma={} exited with {status}",
                        run.raw("gamma")
                    )));
                }
            }
        }
    }
    let mut csv = CsvLog::create(dir.join(SWEEP_CSV), "gamma,dev_bleu,train_loss")?;
    println!("gamma,dev_bleu,train_loss");
    for (g, run) in gammas.iter().zip(&runs) {
        let (loss, bleu) = last_log_row(&run.out_dir().join(S2S_LOG))?;
        let row = format!("{g},{bleu:.6},{loss:.6}");
        println!("{row}");
        csv.row(&row)?;
    }
    Ok(Outcome::Done)
}

fn parse_fault(spec: &str) -> Result<(OpKind, f64)> {
    let bad = || Error::Config(format!("fault {spec}: expected <op>:<factor>, e.g. sigmoid:1.3"));
    let (op, k) = spec.split_once(':').ok_or_else(bad)?;
    let kind = OpKind::parse(op).ok_or_else(bad)?;
    Ok((kind, k.parse().map_err(|_| bad())?))
}

pub fn gradcheck(s: &Settings) -> Result<Outcome> {
    let fault = match s.raw("fault") {
        "" | "none" => None,
        spec => Some(parse_fault(spec)?),
    };
    let dir = prepare_out(s, &[GRADCHECK_REPORT])?;
    let report = checks::run_all(&SuiteOptions {
        seed: s.get("seed")?,
        fault,
    })?;
    let lines = report.lines();
    for l in &lines {
        println!("{l}");
    }
    let failed = report.failures().count();
    let summary = format!(
        "{} checks, {failed} failed, {:.1}s",
        report.reports.len(),
        report.elapsed.as_secs_f64()
    );
    println!("{summary}");
    let path = dir.join(GRADCHECK_REPORT);
    fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::file(&path, e))?;
    Ok(if report.passed() {
        Outcome::Done
    } else {
        Outcome::ChecksFailed
    })
}
