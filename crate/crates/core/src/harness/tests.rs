use std::path::Path;

use super::analysis::{analyze_tensor, plot_csv};
use super::config::apply_override_str;
use super::data::sample_windows;
use super::train::{site_activation, CHECKPOINTS, METRICS, PROBE, RUN_MANIFEST, STATUS};
use super::*;
use crate::metrics::{moments, read_jsonl};
use crate::model::{Model, TapSite};
use crate::optim::OptimizerConfig;
use crate::rng::Rng;
use crate::tensor::Tensor;

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
temperature = 1.0
vocab = 16
zipf = 1.0
length = 4000

[seeds]
model = 1
data = 2
aux = 3
"#;

fn tiny() -> RunConfig {
    RunConfig::from_toml_str(TINY).unwrap()
}

fn tiny_in(dir: &Path) -> RunConfig {
    let mut c = tiny();
    c.out_dir = dir.to_path_buf();
    c
}

fn markov(states: usize, temperature: f64, vocab: usize, zipf: f64) -> DatasetSpec {
    DatasetSpec::SyntheticMarkov {
        states,
        temperature,
        vocab,
        zipf,
        length: 0,
    }
}

#[test]
fn bytes_tokenize() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ab.txt");
    std::fs::write(&p, "AB").unwrap();
    assert_eq!(tokenize_bytes(&p).unwrap(), vec![65, 66]);
    let data: Vec<u8> = (0..=255u8).cycle().take(1000).collect();
    std::fs::write(&p, &data).unwrap();
    let toks = tokenize_bytes(&p).unwrap();
    assert_eq!(toks.len(), 1000);
    assert!(toks.iter().all(|&t| t < 256));
    std::fs::write(&p, "").unwrap();
    assert!(tokenize_bytes(&p).is_err());
    assert!(tokenize_bytes(&dir.path().join("missing")).is_err());
}

#[test]
fn zero_temperature_chain_is_predictable() {
    let mut rng = Rng::new(5, 0);
    let hmm = Hmm::new(6, 20, 0.0, 1.0, &mut rng).unwrap();
    let toks = hmm.sample(&mut rng, 500);
    assert_eq!(hmm.oracle_cross_entropy(&toks), 0.0);
    // Functional transition graph: the stream is eventually periodic.
    let tail = &toks[100..];
    let period = (1..=6).find(|&p| tail.iter().zip(&tail[p..]).all(|(a, b)| a == b)).unwrap();
    assert!(period <= 6);

    let mut rng = Rng::new(5, 0);
    let hmm = Hmm::new(6, 20, 1e-3, 1.0, &mut rng).unwrap();
    let toks = hmm.sample(&mut rng, 2000);
    assert!(hmm.oracle_cross_entropy(&toks) < 1e-3);
}

#[test]
fn uniform_chain_has_entropy_ln_v() {
    let mut rng = Rng::new(6, 0);
    let hmm = Hmm::new(1, 8, 1.0, 0.0, &mut rng).unwrap();
    let toks = hmm.sample(&mut rng, 40_000);
    assert!((hmm.oracle_cross_entropy(&toks) - 8f64.ln()).abs() < 1e-12);
    let mut counts = [0usize; 8];
    toks.iter().for_each(|&t| counts[t] += 1);
    for c in counts {
        // Binomial(40000, 1/8): sd ≈ 66.
        assert!((c as f64 - 5000.0).abs() < 400.0, "{counts:?}");
    }
}

#[test]
fn skewed_chain_has_signal() {
    let mut rng = Rng::new(7, 0);
    let hmm = Hmm::new(8, 32, 0.5, 1.5, &mut rng).unwrap();
    let toks = hmm.sample(&mut rng, 20_000);
    assert!(hmm.oracle_cross_entropy(&toks) < 32f64.ln() - 0.3);
}

#[test]
fn synthetic_corpus_is_deterministic() {
    let spec = markov(4, 0.7, 12, 1.1);
    let a = synth_corpus(&spec, &mut Rng::new(9, 0), 3000).unwrap();
    let b = synth_corpus(&spec, &mut Rng::new(9, 0), 3000).unwrap();
    let c = synth_corpus(&spec, &mut Rng::new(10, 0), 3000).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.iter().all(|&t| t < 12));
}

#[test]
fn windows_shift_targets() {
    let toks: Vec<usize> = (0..50).collect();
    let b = sample_windows(&toks, 3, 2, 5, &mut Rng::new(1, 0)).unwrap();
    assert_eq!(b.len(), 3);
    for batch in &b {
        for (x, y) in batch.tokens.iter().zip(&batch.targets) {
            assert_eq!(x + 1, *y);
        }
    }
    assert!(sample_windows(&toks[..4], 1, 1, 5, &mut Rng::new(1, 0)).is_err());
}

#[test]
fn config_parsing_and_overrides() {
    let c = tiny();
    assert_eq!(c.tap_interval, 4);
    assert_eq!(c.clip, 1.0);
    assert_eq!(c.schedule_spec().total_steps, 12);
    assert_eq!(c.precision, Precision::F64);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, TINY).unwrap();
    let c = RunConfig::load(&path, &["optimizer.epsilon=1e-5".into(), "steps = 3".into()]).unwrap();
    match c.optimizer {
        OptimizerConfig::Adamw { epsilon, .. } => assert_eq!(epsilon, 1e-5),
        ref o => panic!("{o:?}"),
    }
    assert_eq!(c.steps, 3);
    let c = RunConfig::load(&path, &["dataset.kind=file-bytes".into()]);
    assert!(c.is_err());
    assert!(RunConfig::load(&path, &["noequals".into()]).is_err());
    assert!(RunConfig::load(&path, &["optimizer.bogus=1".into()]).is_err());

    let mut v: toml::Value = toml::from_str(TINY).unwrap();
    apply_override_str(&mut v, "out_dir=runs/x").unwrap();
    assert_eq!(v["out_dir"].as_str(), Some("runs/x"));

    let bad = |o: &str| RunConfig::load(&path, &[o.to_string()]).is_err();
    assert!(bad("tap_interval=0"));
    assert!(bad("seq_len=9"));
    assert!(bad("dataset.vocab=17"));
    assert!(bad("clip=-1.0"));

    let err = RunConfig::from_toml_str("steps = [").unwrap_err().to_string();
    assert!(err.contains("line"), "{err}");
    let round = RunConfig::from_toml_str(&tiny().to_toml_string().unwrap()).unwrap();
    assert_eq!(round, tiny());
}

#[test]
fn zero_steps_write_manifest_and_init_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_in(dir.path());
    cfg.steps = 0;
    let status = train(&cfg).unwrap();
    assert_eq!(status.status, RunState::Completed);
    assert!(dir.path().join(RUN_MANIFEST).exists());
    let ck = dir.path().join(CHECKPOINTS);
    let entries: Vec<String> = std::fs::read_dir(&ck)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(entries, vec!["step-0".to_string()]);
    assert!(!dir.path().join(METRICS).exists());
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identical_configs_give_identical_run_directories() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = tiny_in(a.path());
    ca.checkpoint_interval = 5;
    let mut cb = ca.clone();
    cb.out_dir = b.path().to_path_buf();
    train(&ca).unwrap();
    train(&cb).unwrap();
    // The manifest names the output directory; everything else must match.
    let strip = |t: Vec<(String, Vec<u8>)>| t.into_iter().filter(|(n, _)| n != RUN_MANIFEST).collect::<Vec<_>>();
    let (ta, tb) = (strip(tree(a.path())), strip(tree(b.path())));
    assert_eq!(ta.len(), tb.len());
    assert!(ta == tb);
    let names: Vec<&str> = ta.iter().map(|(n, _)| n.as_str()).collect();
    for want in ["checkpoints/step-0/manifest.json", "checkpoints/step-5/optimizer.json", "checkpoints/step-10/unembed.oltens", "checkpoints/step-12/manifest.json", METRICS, STATUS] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }

    // Rerunning into the same directory replaces the logs.
    train(&ca).unwrap();
    assert!(strip(tree(a.path())) == tb);
}

#[test]
fn taps_do_not_perturb_training() {
    let mut dense = tiny();
    dense.tap_interval = 1;
    let mut sparse = tiny();
    sparse.tap_interval = 1000;
    let a = execute::<f64>(&dense, None).unwrap();
    let b = execute::<f64>(&sparse, None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.records.len(), 13 * 3);
    assert_eq!(b.records.len(), 2 * 3);
    assert_eq!(a.status.final_eval_loss, b.status.final_eval_loss);
}

#[test]
fn records_cover_attention_inputs_and_unembedding() {
    let out = execute::<f64>(&tiny(), None).unwrap();
    let steps: Vec<u64> = out.records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![0, 0, 0, 4, 4, 4, 8, 8, 8, 12, 12, 12]);
    for r in &out.records {
        match r.layer {
            0 | 1 => {
                assert_eq!(r.site, TapSite::AttnInput);
                assert!(r.attention_entropy.is_some());
            }
            _ => {
                assert_eq!((r.layer, r.site), (2, TapSite::UnembedInput));
                assert!(r.attention_entropy.is_none());
            }
        }
        assert!((1.0..=16.0).contains(&r.kurtosis));
    }
    assert_eq!(out.status.loss_curve.len(), 3);
}

#[test]
fn initial_loss_is_ln_v_on_uniform_data() {
    let mut cfg = tiny();
    cfg.model.vocab_size = 64;
    cfg.dataset = DatasetSpec::SyntheticMarkov {
        states: 1,
        temperature: 1.0,
        vocab: 64,
        zipf: 0.0,
        length: 4000,
    };
    cfg.validate().unwrap();
    let model = Model::new(cfg.model.clone()).unwrap();
    let params = model.init::<f64>(&Rng::new(0, 0));
    let corpus = Corpus::load(&cfg.dataset, 0, cfg.seq_len).unwrap();
    let b = sample_windows(&corpus.train, 1, 8, 8, &mut Rng::new(1, 0)).unwrap();
    let loss = model.loss(&params, &b[0]).unwrap();
    let ln_v = 64f64.ln();
    assert!((loss - ln_v).abs() <= 0.02 * ln_v, "{loss} vs {ln_v}");
}

#[test]
fn divergence_is_recorded_not_raised() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_in(dir.path());
    cfg.optimizer = OptimizerConfig::Sgdm {
        momentum: 0.9,
        weight_decay: 0.0,
    };
    cfg.clip = 0.0;
    cfg.schedule.max_lr = 1e12;
    cfg.schedule.warmup_frac = 0.0;
    cfg.steps = 200;
    let status = train(&cfg).unwrap();
    assert_eq!(status.status, RunState::Diverged);
    assert!(status.diverged_at.is_some());
    assert!(status.final_eval_loss.is_none());
    let run = read_run(dir.path()).unwrap();
    assert_eq!(run.status.status, RunState::Diverged);
}

#[test]
fn probe_with_zero_lr_is_zero() {
    let mut cfg = tiny();
    cfg.schedule.max_lr = 0.0;
    cfg.optimizer = OptimizerConfig::Adamw {
        beta1: 0.0,
        beta2: 0.999,
        epsilon: 1e-8,
        weight_decay: 0.1,
    };
    let (rows, warnings) = decomposition_probe(&cfg, 1, TapSite::AttnInput).unwrap();
    assert_eq!(rows.len(), 12);
    assert!(warnings.is_empty());
    for r in rows {
        let u = r.per_step;
        assert_eq!([u.u21, u.u22, u.u41, u.u42, u.u43, u.u44], [0.0; 6]);
    }
}

#[test]
fn probe_telescopes_and_warns_on_momentum() {
    let mut cfg = tiny();
    cfg.steps = 20;
    let (rows, warnings) = decomposition_probe(&cfg, 0, TapSite::MlpInput).unwrap();
    assert_eq!(warnings.len(), 1);
    let first = rows.first().unwrap();
    let last = rows.last().unwrap();
    let sum4: f64 = rows.iter().map(|r| r.per_step.m4_delta).sum();
    let sum2: f64 = rows.iter().map(|r| r.per_step.m2_delta).sum();
    assert!((sum4 - (last.m4_after - first.m4_before)).abs() <= 1e-9 * last.m4_after.abs().max(1.0));
    assert!((sum2 - (last.m2_after - first.m2_before)).abs() <= 1e-9 * last.m2_after.abs().max(1.0));
    assert!((last.cumulative.m4_delta - sum4).abs() <= 1e-12 * sum4.abs().max(1.0));
    for w in rows.windows(2) {
        assert_eq!(w[0].m4_after, w[1].m4_before);
    }
}

#[test]
fn probe_matches_direct_recomputation_on_hand_sized_model() {
    let mut cfg = tiny();
    cfg.model.width = 2;
    cfg.model.heads = 1;
    cfg.batch_size = 1;
    cfg.seq_len = 2;
    cfg.steps = 1;
    cfg.optimizer = OptimizerConfig::Adamw {
        beta1: 0.0,
        beta2: 0.999,
        epsilon: 1e-8,
        weight_decay: 0.0,
    };
    cfg.schedule.warmup_frac = 0.0;
    cfg.probe = Some(ProbeSpec {
        layer: 1,
        site: TapSite::AttnInput,
        strict: true,
    });
    let out = execute::<f64>(&cfg, None).unwrap();
    let row = &out.probe[0];

    let model = Model::new(cfg.model.clone()).unwrap();
    let init = model.init::<f64>(&Rng::new(cfg.seeds.model, 0));
    let corpus = Corpus::load(&cfg.dataset, cfg.seeds.data, cfg.seq_len).unwrap();
    let batch = train::probe_batch(&cfg, &corpus).unwrap();
    let x0 = site_activation(&model, &init, &batch, 1, TapSite::AttnInput).unwrap();
    let x1 = site_activation(&model, &out.params, &batch, 1, TapSite::AttnInput).unwrap();
    assert_eq!(x0.shape(), &[2, 2]);

    // Expand (x+Δ)² and ((x+Δ)²)² term by term for every neuron.
    let (n, d) = (2usize, 2usize);
    let mut u = [0.0f64; 6];
    for j in 0..d {
        let col = |t: &Tensor<f64>| (0..n).map(|i| t.at(i, j)).collect::<Vec<_>>();
        let (x, y) = (col(&x0), col(&x1));
        let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| b - a).collect();
        let a: f64 = x.iter().map(|v| v * v).sum();
        let b: f64 = x.iter().zip(&dx).map(|(p, q)| p * q).sum();
        let c: f64 = dx.iter().map(|v| v * v).sum();
        u[0] += 2.0 * b;
        u[1] += c;
        u[2] += 4.0 * a * b;
        u[3] += 2.0 * a * c + 4.0 * b * b;
        u[4] += 4.0 * b * c;
        u[5] += c * c;
    }
    let got = [row.per_step.u21, row.per_step.u22, row.per_step.u41, row.per_step.u42, row.per_step.u43, row.per_step.u44];
    for (g, w) in got.iter().zip(u) {
        assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-12), "{got:?} vs {u:?}");
    }
    let (m2a, m4a) = moments(&x1).unwrap();
    let (m2b, m4b) = moments(&x0).unwrap();
    assert!((row.per_step.m4_delta - (m4a - m4b)).abs() <= 1e-12 * m4a.abs().max(1.0));
    assert!((row.per_step.m2_delta - (m2a - m2b)).abs() <= 1e-12 * m2a.abs().max(1.0));
    // The probed record carries the update terms.
    let tagged = out.records.iter().find(|r| r.step == 1 && r.layer == 1).unwrap();
    assert_eq!(tagged.u44, Some(row.per_step.u44));
}

#[test]
fn probe_file_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_in(dir.path());
    cfg.probe = Some(ProbeSpec {
        layer: 2,
        site: TapSite::UnembedInput,
        strict: false,
    });
    train(&cfg).unwrap();
    let text = std::fs::read_to_string(dir.path().join(PROBE)).unwrap();
    assert_eq!(text.lines().count(), 12);
    let mut bad = tiny();
    bad.probe = Some(ProbeSpec {
        layer: 2,
        site: TapSite::AttnInput,
        strict: false,
    });
    assert!(bad.validate().is_err());
}

#[test]
fn verify_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    train(&tiny_in(dir.path())).unwrap();
    let run = read_run(dir.path()).unwrap();
    let rep = verify_run(&run).unwrap();
    assert_eq!(rep.steps, vec![0, 12]);
    assert!(rep.mismatches.is_empty(), "{:?}", rep.mismatches);
    assert!(rep.values_checked >= 2 * 3 * 7);

    let path = dir.path().join(METRICS);
    let mut recs = read_jsonl(&path).unwrap();
    let k = recs.iter().position(|r| r.step == 12).unwrap();
    recs[k].kurtosis += 1e-6;
    std::fs::remove_file(&path).unwrap();
    crate::metrics::append_jsonl(&path, &recs).unwrap();
    let rep = verify_run(&read_run(dir.path()).unwrap()).unwrap();
    assert_eq!(rep.mismatches.len(), 1);
    assert_eq!((rep.mismatches[0].step, rep.mismatches[0].field.as_str()), (12, "kurtosis"));
}

#[test]
fn f32_runs_verify() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_in(dir.path());
    cfg.precision = Precision::F32;
    train(&cfg).unwrap();
    let rep = verify_run(&read_run(dir.path()).unwrap()).unwrap();
    assert!(rep.mismatches.is_empty());
}

#[test]
fn compare_identical_and_diverged_runs() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&tiny_in(a.path())).unwrap();
    train(&tiny_in(b.path())).unwrap();
    let (ra, rb) = (read_run(a.path()).unwrap(), read_run(b.path()).unwrap());
    let rep = compare(&ra, &rb);
    assert!(rep.verdicts.iter().all(|v| v.relation == "tie"), "{:?}", rep.verdicts);
    assert!(rep.verdicts.len() >= 4);

    let mut cfg = tiny_in(c.path());
    cfg.clip = 0.0;
    cfg.optimizer = OptimizerConfig::Sgdm {
        momentum: 0.9,
        weight_decay: 0.0,
    };
    cfg.schedule.max_lr = 1e12;
    cfg.steps = 200;
    train(&cfg).unwrap();
    let rc = read_run(c.path()).unwrap();
    let rep = compare(&ra, &rc);
    assert_eq!(rep.status_b, RunState::Diverged);
    for v in &rep.verdicts {
        assert!(v.line.contains(&format!("{}", v.a)) && v.line.contains(&format!("{}", v.b)));
    }

    let csv = plot_csv(&[("a", &ra.records), ("b", &rb.records)]);
    assert!(csv.starts_with("run,step,layer,site,metric,value\n"));
    assert!(csv.lines().any(|l| l.starts_with("b,12,2,unembed-input,kurtosis,")));

    std::fs::remove_file(b.path().join(STATUS)).unwrap();
    assert!(read_run(b.path()).is_err());
}

#[test]
fn summary_takes_layer_means() {
    let out = execute::<f64>(&tiny(), None).unwrap();
    let s = summarize(&out.records, &out.status);
    let at = |step| {
        let v: Vec<f64> = out.records.iter().filter(|r| r.step == step).map(|r| r.kurtosis).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let peak = [0, 4, 8, 12].iter().map(|&s| at(s)).fold(f64::MIN, f64::max);
    assert_eq!(s.peak_mean_kurtosis, peak);
    assert_eq!(s.final_mean_kurtosis, at(12));
    assert_eq!(s.peak_layer_kurtosis.len(), 3);
    assert!(s.min_mean_entropy.unwrap() > 0.0);
    assert_eq!(s.final_loss, out.status.final_eval_loss);
}

#[test]
fn analyze_dump_examples() {
    // One outlier column among four: kurtosis d.
    let mut x = Tensor::<f64>::zeros(&[3, 4]);
    for i in 0..3 {
        x.set(i, 2, 1.0 + i as f64);
    }
    let a = analyze_tensor(&x).unwrap();
    assert_eq!(a.kurtosis, 4.0);
    assert_eq!((a.mmr, a.mmr_skipped_rows), (None, 3));
    x.set(0, 0, 1.0);
    x.set(0, 1, 1.0);
    let a = analyze_tensor(&x).unwrap();
    assert_eq!(a.mmr, Some(1.0));
    assert_eq!(a.mmr_skipped_rows, 2);
    let ones = Tensor::<f64>::full(&[5, 4], -2.0);
    assert_eq!(analyze_tensor(&ones).unwrap().kurtosis, 1.0);
    assert_eq!(analyze_tensor(&ones).unwrap().attention_entropy, None);
    let att = Tensor::<f64>::full(&[4, 4], 0.25);
    let e = analyze_tensor(&att).unwrap().attention_entropy.unwrap();
    assert!((e - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn matrix_expands_variants_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("base.toml"), TINY).unwrap();
    let m = dir.path().join("m.toml");
    std::fs::write(
        &m,
        r#"
base = "base.toml"
out_dir = "out"
seeds = [1, 2]

[[variant]]
name = "adam"

[[variant]]
name = "eps"
set = { "optimizer.epsilon" = 1e-4, steps = 3 }
"#,
    )
    .unwrap();
    let spec = MatrixSpec::load(&m).unwrap();
    let runs = spec.expand().unwrap();
    let names: Vec<&str> = runs.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, vec!["adam-s1", "adam-s2", "eps-s1", "eps-s2"]);
    assert_eq!(runs[3].1.steps, 3);
    assert_eq!(runs[3].1.seeds, Seeds { model: 2, data: 2, aux: 2 });
    assert_eq!(runs[3].1.out_dir, Path::new("out").join("eps-s2"));
    assert!(matches!(runs[2].1.optimizer, OptimizerConfig::Adamw { epsilon, .. } if epsilon == 1e-4));
}

#[test]
fn spearman_examples() {
    assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 25.0, 100.0]).unwrap() - 1.0).abs() < 1e-15);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
    // Ranks (1, 2.5, 2.5, 4) against (1, 2, 3, 4): r = 4.5/√(4.5·5).
    let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-15);
    assert!(spearman(&[1.0], &[1.0]).is_err());
    assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn byte_runs_train() {
    let dir = tempfile::tempdir().unwrap();
    let text = "the quick brown fox jumps over the lazy dog. ".repeat(40);
    let p = dir.path().join("corpus.txt");
    std::fs::write(&p, text).unwrap();
    let mut cfg = tiny();
    cfg.dataset = DatasetSpec::FileBytes { path: p };
    cfg.model.vocab_size = 256;
    cfg.steps = 4;
    let out = execute::<f64>(&cfg, None).unwrap();
    assert_eq!(out.status.status, RunState::Completed);
}
