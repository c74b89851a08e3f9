//! The `macnet` command line: every setting is a `key=value` pair resolved
//! from built-in defaults, then an optional config file, then flags.

mod commands;

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Arg, ArgAction, ArgMatches, Command};
use indexmap::IndexMap;

use crate::error::{Error, Result};

pub use commands::{
    evaluate, gen_data, gradcheck, pretrain_mc, sweep_gamma, train_seq2seq, Outcome, CONFIG_ECHO, MC_CHECKPOINT,
    MC_LOG, PAIRS_DEV, PAIRS_TRAIN, QA_DEV, QA_TRAIN, S2S_CHECKPOINT, S2S_LOG, SRC_VOCAB_KEY, SWEEP_CSV, TGT_VOCAB_KEY,
    VOCAB_KEY,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// A setting with its built-in default.
#[derive(Clone, Copy, Debug)]
pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { name, default, help }
}

const COMMON: &[Key] = &[
    key("seed", "0", "seed for data, initialization, shuffling and dropout"),
    key("out", "", "output directory [default: runs/<subcommand>]"),
];

const GEN_DATA: &[Key] = &[
    key("qa_train", "200", "QA training examples"),
    key("qa_dev", "50", "QA held-out examples"),
    key("qa_vocab", "60", "distinct QA content tokens"),
    key("passage_min", "8", "shortest passage"),
    key("passage_max", "16", "longest passage"),
    key("value_len", "2", "answer length in tokens"),
    key("pairs_train", "500", "parallel training pairs"),
    key("pairs_dev", "100", "parallel held-out pairs"),
    key("task", "copy", "copy | reverse | cipher"),
    key("pair_vocab", "20", "distinct source tokens"),
    key("min_len", "3", "shortest source sentence"),
    key("max_len", "8", "longest source sentence"),
    key(
        "zipf",
        "none",
        "Zipf exponent of token frequencies, or none for uniform",
    ),
    key("cipher_key", "0", "seed of the cipher substitution table"),
];

const PRETRAIN_MC: &[Key] = &[
    key(
        "data",
        "runs/gen-data",
        "directory holding qa_train.jsonl and qa_dev.jsonl",
    ),
    key("variant", "bidaf", "attention: bidaf | c2q | q2c"),
    key("word_dim", "32", "word embedding size"),
    key("char_dim", "8", "character embedding size"),
    key("char_filters", "16", "character CNN filters"),
    key("char_width", "5", "character CNN window"),
    key("hidden", "32", "LSTM hidden size"),
    key("dropout", "0.2", "dropout on layer inputs"),
    key("max_span", "8", "longest predicted answer"),
    key("epochs", "20", "training epochs"),
    key("batch_size", "16", "examples per update"),
    key("optimizer", "adadelta", "sgd | adagrad | adadelta"),
    key("lr", "default", "learning rate, or default for the optimizer's"),
    key("clip", "5", "global gradient-norm clip, or none"),
];

const TRAIN_SEQ2SEQ: &[Key] = &[
    key(
        "data",
        "runs/gen-data",
        "directory holding pairs_train.tsv and pairs_dev.tsv",
    ),
    key(
        "mc",
        "none",
        "pretrained comprehension checkpoint (needed unless macnet=off)",
    ),
    key("macnet", "off", "off | enc | model | full | random-init"),
    key("gamma", "0", "focal-loss exponent (0 is cross-entropy)"),
    key("emb_dim", "32", "word embedding size"),
    key("hidden", "32", "encoder/decoder state size"),
    key("dropout", "0", "dropout on embeddings"),
    key("decode", "greedy", "greedy | beam:K"),
    key("max_decode_len", "20", "longest decoded output"),
    key("freeze_encoder", "false", "hold the transplanted encoder fixed"),
    key("freeze_modeling", "false", "hold the transplanted modeling layer fixed"),
    key("epochs", "30", "training epochs"),
    key("batch_size", "16", "pairs per update"),
    key("optimizer", "adagrad", "sgd | adagrad | adadelta"),
    key("lr", "default", "learning rate, or default for the optimizer's"),
    key("clip", "5", "global gradient-norm clip, or none"),
];

const SWEEP: &[Key] = &[
    key("gammas", "0,1,2,3,4,5,6,7", "comma-separated focal exponents"),
    key(
        "parallel",
        "0",
        "run this many trainings at once as separate processes (0: serial)",
    ),
];

const EVALUATE: &[Key] = &[
    key(
        "checkpoint",
        "none",
        "checkpoint written by pretrain-mc or train-seq2seq",
    ),
    key("input", "none", "pairs .tsv or QA .jsonl file to evaluate on"),
    key("decode", "default", "greedy | beam:K, or default for the checkpoint's"),
];

const GRADCHECK: &[Key] = &[key(
    "fault",
    "none",
    "scale one op's backward rule, e.g. sigmoid:1.3 (harness self-test)",
)];

/// The keys a subcommand accepts, in echo order.
pub fn keys(command: &str) -> Vec<Key> {
    let own: &[&[Key]] = match command {
        "gen-data" => &[GEN_DATA],
        "pretrain-mc" => &[PRETRAIN_MC],
        "train-seq2seq" => &[TRAIN_SEQ2SEQ],
        "sweep-gamma" => &[TRAIN_SEQ2SEQ, SWEEP],
        "evaluate" => &[EVALUATE],
        "gradcheck" => &[GRADCHECK],
        _ => &[],
    };
    COMMON
        .iter()
        .chain(own.iter().flat_map(|k| k.iter()))
        .copied()
        .collect()
}

pub const COMMANDS: [(&str, &str); 6] = [
    ("gen-data", "write synthetic QA and parallel datasets"),
    ("pretrain-mc", "train the comprehension model and save its checkpoint"),
    (
        "train-seq2seq",
        "train a seq2seq model, optionally with transplanted layers",
    ),
    (
        "evaluate",
        "decode a dataset with a checkpoint and write metric reports",
    ),
    (
        "sweep-gamma",
        "train one seq2seq model per focal exponent and tabulate dev BLEU",
    ),
    ("gradcheck", "run every finite-difference gradient suite"),
];

/// Fully resolved settings of one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Settings {
    pub command: String,
    pub force: bool,
    values: IndexMap<String, String>,
}

impl Settings {
    /// Defaults for `command`, overlaid with `overrides` (unknown keys are
    /// configuration errors).
    pub fn resolve(command: &str, layers: &[IndexMap<String, String>], force: bool) -> Result<Self> {
        let keys = keys(command);
        if keys.is_empty() {
            return Err(Error::Config(format!("unknown subcommand {command}")));
        }
        let mut values: IndexMap<String, String> = keys
            .iter()
            .map(|k| (k.name.to_string(), k.default.to_string()))
            .collect();
        values["out"] = format!("runs/{command}");
        for layer in layers {
            for (k, v) in layer {
                match values.get_mut(k) {
                    Some(slot) => *slot = v.clone(),
                    None => return Err(Error::Config(format!("{command} has no setting {k}"))),
                }
            }
        }
        Ok(Settings {
            command: command.to_string(),
            force,
            values,
        })
    }

    pub fn defaults(command: &str) -> Result<Self> {
        Self::resolve(command, &[], false)
    }

    /// Returns a copy with `key` replaced.
    pub fn with(&self, key: &str, value: impl Display) -> Result<Self> {
        let mut s = self.clone();
        match s.values.get_mut(key) {
            Some(slot) => *slot = value.to_string(),
            None => return Err(Error::Config(format!("{} has no setting {key}", self.command))),
        }
        Ok(s)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map_or("", String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse().map_err(|e| Error::Config(format!("{key}={raw}: {e}")))
    }

    /// `none`/`default` (or empty) read as absent.
    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            "" | "none" | "default" => Ok(None),
            _ => self.get(key).map(Some),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        match self.raw(key) {
            "" | "none" => None,
            p => Some(PathBuf::from(p)),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// `key=value` lines; feeding them back through `--config` reproduces
    /// the run.
    pub fn echo(&self) -> String {
        let mut s = format!("# macnet {}\n", self.command);
        for (k, v) in &self.values {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}

/// Parses flat `key=value` lines; `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<IndexMap<String, String>> {
    let mut out = IndexMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
        let k = k.trim().replace('-', "_");
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("config line {}: {k} set twice", i + 1)));
        }
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<IndexMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_config(&text)
}

pub fn command() -> Command {
    let mut cmd = Command::new("macnet")
        .about("Comprehension-pretrained transfer into attentional seq2seq models")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in COMMANDS {
        let mut sub = Command::new(name)
            .about(about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("key=value settings file; flags take precedence"),
            )
            .arg(
                Arg::new("force")
                    .long("force")
                    .action(ArgAction::SetTrue)
                    .help("overwrite existing outputs"),
            );
        for k in keys(name) {
            let flag = k.name.replace('_', "-");
            let help = if k.default.is_empty() {
                k.help.to_string()
            } else {
                format!("{} [default: {}]", k.help, k.default)
            };
            sub = sub.arg(Arg::new(k.name).long(flag).value_name("VALUE").help(help));
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

/// Resolves the settings of a parsed subcommand.
pub fn settings_from_matches(name: &str, m: &ArgMatches) -> Result<Settings> {
    let file = match m.get_one::<String>("config") {
        Some(p) => read_config(Path::new(p))?,
        None => IndexMap::new(),
    };
    let flags: IndexMap<String, String> = keys(name)
        .iter()
        .filter_map(|k| m.get_one::<String>(k.name).map(|v| (k.name.to_string(), v.clone())))
        .collect();
    Settings::resolve(name, &[file, flags], m.get_flag("force"))
}

/// Exit status for an error: configuration, data or internal.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Exists(_) | Error::Wiring(_) | Error::Kind { .. } => EXIT_CONFIG,
        Error::Data(_)
        | Error::File { .. }
        | Error::Io(_)
        | Error::Json(_)
        | Error::Integrity(_)
        | Error::Version { .. }
        | Error::Extraction(_)
        | Error::EmptyInput(_) => EXIT_DATA,
        _ => EXIT_INTERNAL,
    }
}

pub fn run_settings(s: &Settings) -> Result<Outcome> {
    match s.command.as_str() {
        "gen-data" => gen_data(s),
        "pretrain-mc" => pretrain_mc(s),
        "train-seq2seq" => train_seq2seq(s),
        "evaluate" => evaluate(s),
        "sweep-gamma" => sweep_gamma(s),
        "gradcheck" => gradcheck(s),
        other => Err(Error::Config(format!("unknown subcommand {other}"))),
    }
}

/// Runs the command line and returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = settings_from_matches(name, sub).and_then(|s| run_settings(&s));
    match result {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::ChecksFailed) => EXIT_CHECK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
