use std::path::Path;
use std::process::{Command, Output};

fn relrnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relrnn")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn train_args(out: &Path) -> Vec<String> {
    [
        "train", "--model", "rel-rnn", "--task", "copy", "--seq-len", "12", "--hidden", "8", "--batch", "3", "--nu", "3",
        "--rho", "2", "--max-updates", "6", "--eval-every", "3", "--eval-batches", "1", "--seed", "5", "--out",
    ]
    .iter()
    .map(|s| s.to_string())
    .chain([out.display().to_string()])
    .collect()
}

fn run(args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    relrnn(&refs)
}

#[test]
fn train_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = run(&train_args(d));
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(ma).unwrap();
    assert_eq!(text.lines().count(), 7);
    for f in ["timing.csv", "checkpoint.json", "config.toml"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let echo = std::fs::read_to_string(a.join("config.toml")).unwrap();
    let cfg = relrnn::config::ExperimentConfig::from_toml(&echo).unwrap();
    assert_eq!((cfg.seq_len, cfg.nu, cfg.rho, cfg.seed), (12, 3, 2, 5));

    let out = relrnn(&[
        "eval",
        "--checkpoint",
        a.join("checkpoint.json").to_str().unwrap(),
        "--seq-len",
        "6,12,24",
        "--eval-batches",
        "1",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval = std::fs::read_to_string(a.join("eval.csv")).unwrap();
    assert_eq!(eval.lines().count(), 4);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "model = \"mem-rnn\"\nseq_len = 9\nhidden = 4\nbatch = 2\nmax_updates = 2\neval_every = 0\neval_batches = 1\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = relrnn(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--hidden",
        "6",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let echo = std::fs::read_to_string(out_dir.join("config.toml")).unwrap();
    let c = relrnn::config::ExperimentConfig::from_toml(&echo).unwrap();
    assert_eq!((c.model.name(), c.seq_len, c.hidden), ("mem-rnn", 9, 6));
}

#[test]
fn invalid_invocations_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    assert_eq!(code(&relrnn(&["train", "--model", "rel-rnn", "--nu", "0", "--out", o])), 1);
    assert_eq!(code(&relrnn(&["train", "--rho", "-1", "--out", o])), 1);
    assert_eq!(code(&relrnn(&["train", "--task", "denoise", "--seq-len", "5", "--out", o])), 1);
    assert_eq!(code(&relrnn(&["train", "--bogus"])), 1);
    assert_eq!(code(&relrnn(&["eval", "--checkpoint", "/nonexistent/ckpt.json", "--out", o])), 1);
    let heat = relrnn(&["analyze", "heatmap", "--model", "rnn", "--seq-len", "5", "--hidden", "4", "--out", o]);
    assert_eq!(code(&heat), 1);
}

#[test]
fn verify_reports_pass_and_fail() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let ok = relrnn(&["verify", "omega", "--out", o]);
    assert_eq!(code(&ok), 0);
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));
    let paths = relrnn(&["verify", "paths", "--trials", "5", "--out", o]);
    assert_eq!(code(&paths), 0);
    assert!(dir.path().join("verify.csv").exists());
    let thm = relrnn(&["verify", "theorem1", "--out", o]);
    assert_eq!(code(&thm), 2);
    assert!(String::from_utf8_lossy(&thm.stdout).contains("FAIL"));
    let bad = relrnn(&["verify", "theorem2", "--kappa", "0", "--out", o]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn analysis_commands_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = relrnn(&["analyze", "complexity", "--models", "mem-rnn,rel-rnn", "--seq-len", "10,20,40", "--out", o]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = std::fs::read_to_string(dir.path().join("complexity.csv")).unwrap();
    assert!(rows.lines().any(|l| l.starts_with("mem-rnn,40,820,")));
    assert!(dir.path().join("complexity_fit.csv").exists());

    let common = ["--model", "rel-rnn", "--seq-len", "8", "--hidden", "4", "--nu", "2", "--rho", "2", "--out", o];
    let out = relrnn(&[&["analyze", "heatmap"][..], &common].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let heat = std::fs::read_to_string(dir.path().join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 1 + 28);
    let out = relrnn(&[&["analyze", "grad-trace"][..], &common].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trace = std::fs::read_to_string(dir.path().join("gradtrace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 28);
}
