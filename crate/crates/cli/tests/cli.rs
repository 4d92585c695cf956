use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use olab::io::write_tensor;
use olab::Tensor;

const TINY: &str = r#"
steps = 12
batch_size = 4
seq_len = 8
tap_interval = 4
eval_batches = 2

[model]
depth = 2
width = 16
heads = 2
vocab_size = 16
context = 8
block = { kind = "pre-norm", norm = "layer-norm" }
entropy_reg = { kind = "none" }

[optimizer]
kind = "adamw"

[schedule]
kind = "linear-warmup-linear-decay"
max_lr = 1e-2
warmup_frac = 0.1

[dataset]
kind = "synthetic-markov"
states = 4
temperature = 0.5
vocab = 16
zipf = 1.0
length = 4000
"#;

fn olab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_olab"))
        .args(args)
        .env_remove("OLAB_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// Writes the tiny config and trains it into `dir/name`.
fn trained(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join(name);
    let set = format!("out_dir=\"{}\"", out.display());
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--set", &set];
    for e in extra {
        args.extend(["--set", e]);
    }
    let o = olab(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn value_after(text: &str, key: &str) -> f64 {
    let line = text.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no `{key}` in {text}"));
    line[key.len()..].split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn train_writes_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), "run", &[]);
    for f in ["manifest.json", "status.json", "metrics.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let status = std::fs::read_to_string(run.join("status.json")).unwrap();
    assert!(status.contains("\"completed\""));
}

#[test]
fn overrides_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), "run", &["optimizer.epsilon=1e-5", "steps=3"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["optimizer"]["epsilon"], 1e-5);
    assert_eq!(manifest["config"]["steps"], 3);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&olab(&["train", "--config", missing.to_str().unwrap()])), 2);

    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    assert_eq!(code(&olab(&["train", "--config", cfg.to_str().unwrap(), "--set", "model.width=15"])), 2);
    assert_eq!(code(&olab(&["train", "--config", cfg.to_str().unwrap(), "--set", "no_equals_sign"])), 2);
    assert_eq!(code(&olab(&["frobnicate"])), 2);

    let o = Command::new(env!("CARGO_BIN_EXE_olab"))
        .args(["oracle", "trace-identity", "--trials", "3"])
        .env("OLAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn analyze_reports_tensor_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = 8;
    let mut outlier = Tensor::<f64>::zeros(&[4, d]);
    for r in 0..4 {
        outlier.data_mut()[r * d + 2] = 5.0;
    }
    let p = dir.path().join("outlier.bin");
    write_tensor(&p, &outlier).unwrap();
    let o = olab(&["analyze", p.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(value_after(&stdout(&o), "kurtosis "), d as f64);
    assert!(stdout(&o).contains("mmr undefined"));

    let flat = Tensor::<f64>::full(&[3, d], -1.5);
    let p = dir.path().join("flat.bin");
    write_tensor(&p, &flat).unwrap();
    let o = olab(&["analyze", p.to_str().unwrap(), "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kurtosis"], 1.0);
    assert_eq!(v["mmr"], 1.0);

    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a tensor").unwrap();
    assert_eq!(code(&olab(&["analyze", junk.to_str().unwrap()])), 2);
}

#[test]
fn analyze_verifies_runs_and_catches_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), "run", &[]);
    let o = olab(&["analyze", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let path = run.join("metrics.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(rec["step"], 0);
    rec["kurtosis"] = serde_json::json!(rec["kurtosis"].as_f64().unwrap() + 0.5);
    lines[0] = rec.to_string();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let o = olab(&["analyze", run.to_str().unwrap()]);
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mismatch"));
}

#[test]
fn quantize_reports_losses() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), "run", &[]);
    let r = run.to_str().unwrap();

    let o = olab(&["quantize", r, "--bits", "31", "--seeds", "0", "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["summary"]["quantization_error"].as_f64().unwrap().abs() <= 1e-4);

    let o = olab(&["quantize", r, "--json"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["per_seed"].as_array().unwrap().len(), 3);
    assert!(v["summary"]["loss_w8a8_std"].as_f64().unwrap() >= 0.0);

    // The step-0 checkpoint is the untrained model.
    let o = olab(&["quantize", r, "--step", "0", "--seeds", "0"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("loss_w8a8"));

    assert_eq!(code(&olab(&["quantize", r, "--step", "5"])), 2);
    assert_eq!(code(&olab(&["quantize", r, "--bits", "1"])), 2);
}

#[test]
fn oracles_pass() {
    for args in [
        vec!["oracle", "trace-identity", "--trials", "100"],
        vec!["oracle", "decomposition", "--trials", "100"],
        vec!["oracle", "gaussian-prop", "--trials", "50"],
        vec!["oracle", "gradcheck", "--block", "pre-ln", "--d", "8", "--depth", "1"],
        vec!["oracle", "gradcheck", "--d", "8", "--depth", "1", "--entropy-reg", "tanh-cap"],
    ] {
        let o = olab(&args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stdout(&o));
        assert!(stdout(&o).lines().last().unwrap().starts_with("PASS"), "{args:?}");
    }
    // The OP block without entropy regulation is not a valid model.
    assert_eq!(code(&olab(&["oracle", "gradcheck", "--entropy-reg", "none"])), 2);
}

#[test]
fn compare_identical_runs_ties() {
    let dir = tempfile::tempdir().unwrap();
    let a = trained(dir.path(), "a", &[]);
    let b = trained(dir.path(), "b", &[]);
    let csv = dir.path().join("plot.csv");
    let o = olab(&["compare", a.to_str().unwrap(), b.to_str().unwrap(), "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for metric in ["peak kurtosis", "final loss"] {
        assert!(text.contains(&format!("{metric}: tie")), "{text}");
    }
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert!(rows.starts_with("run,step,layer,site,metric,value"));
}

#[test]
fn matrix_dry_run_lists_every_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.toml"), TINY).unwrap();
    let spec = dir.path().join("m.toml");
    std::fs::write(
        &spec,
        "base = \"base.toml\"\nout_dir = \"out\"\nseeds = [0, 1]\n\n[[variant]]\nname = \"a\"\n\n[[variant]]\nname = \"b\"\nset = { \"optimizer.epsilon\" = 1e-4 }\n",
    )
    .unwrap();
    let o = olab(&["matrix", spec.to_str().unwrap(), "--dry-run"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let names: Vec<String> = stdout(&o).lines().map(|l| l.split(' ').next().unwrap().to_string()).collect();
    assert_eq!(names, ["a-s0", "a-s1", "b-s0", "b-s1"]);
    assert!(!dir.path().join("out").exists());
}

#[test]
fn matrix_trains_concurrently() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.toml"), TINY.replace("steps = 12", "steps = 4")).unwrap();
    let out = dir.path().join("out");
    let spec = dir.path().join("m.toml");
    std::fs::write(
        &spec,
        format!("base = \"base.toml\"\nout_dir = \"{}\"\nseeds = [0, 1]\n\n[[variant]]\nname = \"a\"\n", out.display()),
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_olab"))
        .args(["matrix", spec.to_str().unwrap()])
        .env("OLAB_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["a-s0", "a-s1"] {
        assert!(out.join(name).join("status.json").is_file(), "{name}");
    }
}
