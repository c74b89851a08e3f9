use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn macnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_macnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn macnet")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let out = macnet(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in [
        "gen-data",
        "pretrain-mc",
        "train-seq2seq",
        "evaluate",
        "sweep-gamma",
        "gradcheck",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let gen = ["gen-data", "--out", s(&data), "--qa-train", "20", "--pairs-train", "30"];
    assert_eq!(macnet(&gen).status.code(), Some(0));
    // refuses to clobber without --force
    assert_eq!(macnet(&gen).status.code(), Some(2));
    let mut forced = gen.to_vec();
    forced.push("--force");
    assert_eq!(macnet(&forced).status.code(), Some(0));

    assert_eq!(macnet(&["gen-data", "--qa-train", "many"]).status.code(), Some(2));
    let missing = tmp.path().join("nowhere");
    let out = tmp.path().join("s2s");
    assert_eq!(
        macnet(&["train-seq2seq", "--data", s(&missing), "--out", s(&out)])
            .status
            .code(),
        Some(3)
    );
    let out = tmp.path().join("full");
    let full = [
        "train-seq2seq",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--macnet",
        "full",
    ];
    assert_eq!(macnet(&full).status.code(), Some(2), "full mode without --mc");

    let gc = tmp.path().join("gc");
    let faulty = macnet(&["gradcheck", "--out", s(&gc), "--fault", "tanh:1.5"]);
    assert_eq!(faulty.status.code(), Some(4));
    let report = String::from_utf8_lossy(&faulty.stdout);
    let failing_ops: Vec<&str> = report
        .lines()
        .filter(|l| l.starts_with("op/") && l.contains(" FAIL "))
        .collect();
    assert_eq!(failing_ops.len(), 1, "{report}");
    assert!(failing_ops[0].starts_with("op/tanh "));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.conf");
    let out = tmp.path().join("data");
    fs::write(&cfg, "# small corpus\nqa-train = 12\npairs_train = 40\n").unwrap();
    let res = macnet(&["gen-data", "--config", s(&cfg), "--pairs-train", "25", "--out", s(&out)]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let count = |f: &str| fs::read_to_string(out.join(f)).unwrap().lines().count();
    assert_eq!(count("qa_train.jsonl"), 12);
    assert_eq!(count("pairs_train.tsv"), 25);
    let echo = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(
        echo.contains("pairs_train = 25") || echo.contains("pairs_train=25"),
        "{echo}"
    );
}

#[test]
fn parallel_sweep_matches_serial() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let gen = [
        "gen-data",
        "--out",
        s(&data),
        "--pairs-train",
        "60",
        "--pairs-dev",
        "10",
        "--task",
        "cipher",
    ];
    assert!(macnet(&gen).status.success());
    let sweep = |dir: &Path, parallel: &str| {
        let out = macnet(&[
            "sweep-gamma",
            "--data",
            s(&data),
            "--out",
            s(dir),
            "--gammas",
            "0,2,5",
            "--epochs",
            "2",
            "--parallel",
            parallel,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(dir.join("sweep.csv")).unwrap()
    };
    let serial = sweep(&tmp.path().join("serial"), "0");
    let parallel = sweep(&tmp.path().join("parallel"), "3");
    assert_eq!(serial.lines().count(), 4);
    assert_eq!(serial, parallel);
}
