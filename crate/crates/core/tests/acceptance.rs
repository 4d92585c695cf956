//! Acceptance criteria 1–9. Prints one PASS/FAIL line per criterion.
//!
//! Failing an exact check (criteria 1–5), an error or a blown time budget
//! makes the target exit nonzero. A directional outcome of the training
//! matrix (6–9) that misses is reported; it fails the target only when
//! `OLAB_ACCEPTANCE_STRICT` is set.
//!
//! Training runs go to a temporary directory unless `OLAB_ACCEPTANCE_DIR`
//! names a directory to keep them in; completed runs found there with an
//! identical config are reused. `OLAB_THREADS` sets how many runs train at
//! once (default 1).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use olab::harness::{quantize_run, read_run, spearman, summarize, train, verify_run, RunConfig, RunState, RunSummary, Seeds};
use olab::metrics::{attention_entropy, gaussian_exact, gaussian_feature_oracle, kurtosis, mmr, MmrAggregate};
use olab::model::config::{BlockKind, EntropyReg, NormKind};
use olab::model::gradcheck::gradcheck;
use olab::optim::{adafactor_step, adamw_step, shampoo_step, soap_step, AdamHp, ParamState, RotatedDiag, ShampooHp, SoapHp};
use olab::oracle::{decomposition_check, gradcheck_config, trace_check};
use olab::quant::{fake_quant, fit_activation_quantizer, fit_weight_quantizer};
use olab::{Model, Result, Rng, Tensor};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

const EXACT: u32 = 5;

struct Report {
    failed: Vec<u32>,
    broken: bool,
}

impl Report {
    fn line(&mut self, id: u32, name: &str, ok: bool, took: Duration, detail: &str) {
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("{tag} criterion {id}: {name} ({:.1} s) {detail}", took.as_secs_f64());
        if !ok {
            self.failed.push(id);
            self.broken |= id <= EXACT;
        }
    }

    fn run(&mut self, id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Result<(bool, String)>) {
        let t0 = Instant::now();
        let res = f();
        let took = t0.elapsed();
        match res {
            Ok((ok, detail)) => {
                let in_time = budget.is_none_or(|b| took <= b);
                self.broken |= !in_time;
                let detail = if in_time {
                    detail
                } else {
                    format!("{detail}; over the {:.0} s budget", budget.unwrap().as_secs_f64())
                };
                self.line(id, name, ok && in_time, took, &detail)
            }
            Err(e) => {
                self.broken = true;
                self.line(id, name, false, took, &format!("error: {e}"))
            }
        }
    }
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs())
}

fn c1() -> Result<(bool, String)> {
    let t = trace_check(500, 1)?;
    let d = decomposition_check(500, 2)?;
    let ok = t.trace <= 1e-9 && t.ledger <= 1e-9 && d <= 1e-12;
    Ok((ok, format!("trace {:.1e}, ledger {:.1e}, decomposition {d:.1e}", t.trace, t.ledger)))
}

fn c2() -> Result<(bool, String)> {
    let mut rng = Rng::new(7, 0);
    let mut in_range = true;
    for _ in 0..200 {
        let (n, d) = (1 + rng.below(16), 1 + rng.below(16));
        let scales: Vec<f64> = (0..d).map(|_| (3.0 * rng.normal()).exp()).collect();
        let x = Tensor::new(vec![n, d], (0..n * d).map(|k| scales[k % d] * rng.normal()).collect())?;
        if x.data().iter().all(|&v| v == 0.0) {
            continue;
        }
        let k = kurtosis(&x)?;
        in_range &= (1.0 - 1e-12..=d as f64 * (1.0 + 1e-12)).contains(&k);
    }
    let d = 32;
    let mut one = Tensor::zeros(&[4, d]);
    for r in 0..4 {
        one.data_mut()[r * d + 5] = 3.0;
    }
    let k_outlier = kurtosis(&one)?;
    let flat = Tensor::new(vec![4, d], (0..4 * d).map(|k| if k % 3 == 0 { -2.0 } else { 2.0 }).collect())?;
    let k_flat = kurtosis(&flat)?;
    let m_flat = mmr(&flat, MmrAggregate::Mean)?.value;
    let t = 8;
    let onehot = Tensor::new(vec![t, t], (0..t * t).map(|k| if k % t == 0 { 1.0 } else { 0.0 }).collect())?;
    let uniform = Tensor::full(&[t, t], 1.0 / t as f64);
    let (h0, hu) = (attention_entropy(&onehot)?, attention_entropy(&uniform)?);
    let ok = in_range
        && k_outlier == d as f64
        && k_flat == 1.0
        && m_flat == 1.0
        && h0 == 0.0
        && (hu - (t as f64).ln()).abs() <= 1e-12;
    Ok((
        ok,
        format!("range {in_range}, outlier {k_outlier}, equal-rms {k_flat}, mmr {m_flat}, entropy {h0}/{hu:.6}"),
    ))
}

fn c3() -> Result<(bool, String)> {
    let rms = NormKind::RmsNorm;
    let configs = [
        ("pre-ln", BlockKind::PreNorm { norm: NormKind::LayerNorm }, EntropyReg::None),
        ("post-ln", BlockKind::PostNorm { norm: NormKind::LayerNorm }, EntropyReg::None),
        ("pre-rms", BlockKind::PreNorm { norm: rms }, EntropyReg::None),
        ("pre-srms", BlockKind::PreNorm { norm: NormKind::SrmsNorm }, EntropyReg::None),
        ("op/qk-norm", BlockKind::Op, EntropyReg::QkNorm { norm: rms, trainable: true }),
        ("op/tanh-cap", BlockKind::Op, EntropyReg::TanhCap { max_attn_val: 1.5 }),
        ("op/clamp", BlockKind::Op, EntropyReg::Clamp { cap: 1.0 }),
        ("pre-ln/qk-norm", BlockKind::PreNorm { norm: NormKind::LayerNorm }, EntropyReg::QkNorm { norm: rms, trainable: true }),
        ("naive", BlockKind::UnnormalizedNaive, EntropyReg::None),
    ];
    let mut worst = (0.0f64, String::new());
    for (k, (name, block, reg)) in configs.iter().enumerate() {
        let model = Model::new(gradcheck_config(*block, *reg, 16, 2))?;
        let rep = gradcheck(&model, k as u64, 2, 5)?;
        if rep.max_rel_err >= worst.0 {
            worst = (rep.max_rel_err, format!("{name} {}", rep.worst_path));
        }
    }
    Ok((
        worst.0 <= 1e-5,
        format!("{} configs, worst {:.1e} at {}", configs.len(), worst.0, worst.1),
    ))
}

fn c4() -> Result<(bool, String)> {
    let o = gaussian_feature_oracle(0.5, 64, 256, 200, &mut Rng::new(4, 0))?;
    let z = (o.estimate - o.exact_finite_n) / o.stderr;
    let spot = o.exact_finite_n == 1.5234375;
    let limit = (gaussian_exact(0.5, 1 << 40) - 1.5).abs() < 1e-9;
    Ok((z.abs() <= 4.0 && spot && limit, format!("estimate {:.5}, exact {}, z {z:.2}", o.estimate, o.exact_finite_n)))
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn c5() -> Result<(bool, String)> {
    let adam = AdamHp {
        beta1: 0.9,
        beta2: 0.999,
        epsilon: 1e-8,
        weight_decay: 0.1,
    };
    let hp = SoapHp {
        adam,
        shampoo_beta: 0.95,
        precond_freq: 10,
        max_precond_dim: 10_000,
        diag: RotatedDiag::Adam,
        freeze_identity: true,
        refresh_sweeps: 1,
    };
    let mut rng = Rng::new(5, 0);
    let (mut sa, mut ss) = (ParamState::default(), ParamState::default());
    let mut wa = random(&[6, 5], &mut rng);
    let mut ws = wa.clone();
    let mut soap_gap = 0.0f64;
    for _ in 0..100 {
        let g = random(&[6, 5], &mut rng);
        adamw_step(&mut sa, &mut wa, &g, 1e-2, &adam)?;
        soap_step(&mut ss, &mut ws, &g, 1e-2, &hp, "w")?;
        for (a, b) in wa.data().iter().zip(ws.data()) {
            soap_gap = soap_gap.max((a - b).abs());
        }
    }

    let (mut sa, mut sf) = (ParamState::default(), ParamState::default());
    let (mut wa, mut wf) = (Tensor::full(&[1, 1], 0.3), Tensor::full(&[1, 1], 0.3));
    let mut ada_gap = 0.0f64;
    for _ in 0..100 {
        let g = Tensor::full(&[1, 1], rng.normal());
        adamw_step(&mut sa, &mut wa, &g, 1e-2, &adam)?;
        adafactor_step(&mut sf, &mut wf, &g, 1e-2, &adam)?;
        ada_gap = ada_gap.max((wa.data()[0] - wf.data()[0]).abs());
    }

    // One step on a scalar: M = (1−β1)g, L = R = (1−β)g², bias-corrected to
    // g and g², so the update is η·g·(g²)^{2p}.
    let mut shampoo_gap = 0.0f64;
    for (g, p) in [(3.0f64, -0.25), (-0.5, -0.25), (2.0, -0.5)] {
        let sh = ShampooHp {
            beta1: 0.9,
            shampoo_beta: 0.95,
            exponent: p,
            epsilon: 0.0,
            update_freq: 1,
            weight_decay: 0.0,
        };
        let mut st = ParamState::default();
        let mut w = Tensor::full(&[1, 1], 0.0);
        shampoo_step(&mut st, &mut w, &Tensor::full(&[1, 1], g), 0.1, &sh, "w")?;
        let want = -0.1 * g * (g * g).powf(2.0 * p);
        shampoo_gap = shampoo_gap.max(rel(w.data()[0], want));
    }
    let ok = soap_gap <= 1e-12 && ada_gap <= 1e-12 && shampoo_gap <= 1e-12;
    Ok((
        ok,
        format!("soap/adamw {soap_gap:.1e}, adafactor/adamw {ada_gap:.1e}, shampoo closed form {shampoo_gap:.1e}"),
    ))
}

struct Runs {
    root: PathBuf,
    configs: Vec<(String, RunConfig)>,
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

impl Runs {
    fn plan(root: PathBuf) -> Result<Self> {
        let pre_ln = configs_dir().join("pre_ln.toml");
        let op = configs_dir().join("op.toml");
        let srms = r#"model.block={kind="pre-norm",norm="srms-norm"}"#;
        let groups: Vec<(&str, &Path, Vec<&str>)> = vec![
            ("pre-ln", &pre_ln, vec![]),
            ("op", &op, vec![]),
            ("pre-ln-eps1e-4", &pre_ln, vec!["optimizer.epsilon=1e-4"]),
            ("pre-ln-lr3e-4", &pre_ln, vec!["schedule.max_lr=3e-4"]),
            ("pre-srms-adamw", &pre_ln, vec![srms]),
            ("pre-srms-soap", &pre_ln, vec![srms, r#"optimizer={kind="soap"}"#]),
            ("naive", &op, vec![r#"model.block={kind="unnormalized-naive"}"#, r#"model.entropy_reg={kind="none"}"#]),
        ];
        let mut configs = Vec::new();
        for (group, base, sets) in groups {
            let sets: Vec<String> = sets.into_iter().map(str::to_string).collect();
            for seed in SEEDS {
                let mut cfg = RunConfig::load(base, &sets)?;
                cfg.seeds = Seeds {
                    model: seed,
                    data: seed,
                    aux: seed,
                };
                let name = format!("{group}-s{seed}");
                cfg.out_dir = root.join(&name);
                configs.push((name, cfg));
            }
        }
        Ok(Self { root, configs })
    }

    fn reusable(cfg: &RunConfig) -> bool {
        match read_run(&cfg.out_dir) {
            Ok(run) => {
                run.manifest.config == *cfg
                    && (run.status.steps_completed == cfg.steps || run.status.status == RunState::Diverged)
            }
            Err(_) => false,
        }
    }

    /// Train every planned run that is not already on disk.
    fn train_all(&self, threads: usize) -> Result<()> {
        let todo: Vec<&RunConfig> = self.configs.iter().map(|c| &c.1).filter(|c| !Self::reusable(c)).collect();
        println!("  training {} of {} runs into {}", todo.len(), self.configs.len(), self.root.display());
        let queue = Mutex::new(todo.into_iter());
        let errors = Mutex::new(Vec::new());
        std::thread::scope(|s| {
            for _ in 0..threads {
                s.spawn(|| loop {
                    let next = queue.lock().unwrap().next();
                    let Some(cfg) = next else { break };
                    let _ = std::fs::remove_dir_all(&cfg.out_dir);
                    if let Err(e) = train(cfg) {
                        errors.lock().unwrap().push(format!("{}: {e}", cfg.out_dir.display()));
                    }
                });
            }
        });
        let errors = errors.into_inner().unwrap();
        if let Some(e) = errors.first() {
            return Err(olab::Error::Config(format!("training failed: {e}")));
        }
        Ok(())
    }

    fn dir(&self, group: &str, seed: u64) -> PathBuf {
        self.root.join(format!("{group}-s{seed}"))
    }

    fn summary(&self, group: &str, seed: u64) -> Result<RunSummary> {
        let run = read_run(&self.dir(group, seed))?;
        Ok(summarize(&run.records, &run.status))
    }

    fn summaries(&self, group: &str) -> Result<Vec<RunSummary>> {
        SEEDS.iter().map(|&s| self.summary(group, s)).collect()
    }
}

fn peaks(s: &[RunSummary]) -> String {
    s.iter().map(|r| format!("{:.3}", r.peak_mean_kurtosis)).collect::<Vec<_>>().join(" ")
}

/// Seeds where `a` has the larger peak layer-mean kurtosis.
fn wins(a: &[RunSummary], b: &[RunSummary]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x.peak_mean_kurtosis > y.peak_mean_kurtosis).count()
}

fn c6(runs: &Runs) -> Result<(bool, String)> {
    let (a, b) = (runs.summaries("pre-ln")?, runs.summaries("op")?);
    let w = wins(&a, &b);
    let mut worst_gap = 0.0f64;
    for (x, y) in a.iter().zip(&b) {
        match (x.final_loss, y.final_loss) {
            (Some(la), Some(lb)) => worst_gap = worst_gap.max(rel(la, lb)),
            _ => worst_gap = f64::INFINITY,
        }
    }
    let losses: Vec<String> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| format!("{:.3}/{:.3}", x.final_loss.unwrap_or(f64::NAN), y.final_loss.unwrap_or(f64::NAN)))
        .collect();
    println!("  pre-ln peak kurtosis {}", peaks(&a));
    println!("  op peak kurtosis     {}", peaks(&b));
    println!("  final loss pre-ln/op {}", losses.join(" "));
    Ok((
        w >= 4 && worst_gap <= 0.05,
        format!("pre-ln > op in {w}/5 seeds, worst loss gap {:.2}%", 100.0 * worst_gap),
    ))
}

fn c7(runs: &Runs) -> Result<(bool, String)> {
    let base = runs.summaries("pre-ln")?;
    let eps = runs.summaries("pre-ln-eps1e-4")?;
    let lr = runs.summaries("pre-ln-lr3e-4")?;
    let adamw = runs.summaries("pre-srms-adamw")?;
    let soap = runs.summaries("pre-srms-soap")?;
    let (a, b, c) = (wins(&base, &eps), wins(&base, &lr), wins(&adamw, &soap));
    println!("  pre-ln eps 1e-8      {}", peaks(&base));
    println!("  pre-ln eps 1e-4      {}", peaks(&eps));
    println!("  pre-ln lr 3e-4       {}", peaks(&lr));
    println!("  pre-srms adamw       {}", peaks(&adamw));
    println!("  pre-srms soap        {}", peaks(&soap));
    Ok((
        a >= 4 && b >= 4 && c >= 4,
        format!("(a) eps {a}/5, (b) lr {b}/5, (c) soap {c}/5"),
    ))
}

fn c8(runs: &Runs) -> Result<(bool, String)> {
    let (mut kurt, mut gap) = (Vec::new(), Vec::new());
    for (name, cfg) in &runs.configs {
        let run = read_run(&cfg.out_dir)?;
        if run.status.status != RunState::Completed {
            println!("  {name} skipped: diverged");
            continue;
        }
        let rep = quantize_run(&run, None, 8, &[0], 8)?;
        kurt.push(rep.summary.mean_kurtosis);
        gap.push(rep.summary.quantization_error);
    }
    let rho = spearman(&kurt, &gap)?;
    println!("  {} models, spearman {rho:.3}", kurt.len());

    let mut rng = Rng::new(8, 0);
    let (mut idempotent, mut half_scale) = (true, true);
    for k in 0..500 {
        let n = 1 + rng.below(64);
        let spread = (2.0 * rng.normal()).exp();
        let t = Tensor::vector((0..n).map(|_| spread * rng.normal()).collect());
        let bits = 2 + (k % 15) as u32;
        let s = if k % 2 == 0 {
            fit_weight_quantizer(&t, bits)?
        } else {
            fit_activation_quantizer(std::slice::from_ref(&t), bits)?
        };
        let once = fake_quant(&t, &s);
        idempotent &= fake_quant(&once, &s) == once;
        half_scale &= t
            .data()
            .iter()
            .zip(once.data())
            .all(|(x, q)| (x - q).abs() <= 0.5 * s.scale * (1.0 + 1e-12));
    }

    let run = read_run(&runs.dir("pre-ln", 0))?;
    let errs: Vec<f64> = [4, 8, 16]
        .iter()
        .map(|&bits| quantize_run(&run, None, bits, &[0], 8).map(|r| r.summary.quantization_error.abs()))
        .collect::<Result<_>>()?;
    let monotone = errs[0] >= errs[1] && errs[1] >= errs[2];
    println!("  |gap| at 4/8/16 bits {:.2e} {:.2e} {:.2e}", errs[0], errs[1], errs[2]);
    Ok((
        kurt.len() >= 8 && rho > 0.0 && idempotent && half_scale && monotone,
        format!("spearman {rho:.3} over {} models, idempotent {idempotent}, half-scale {half_scale}, monotone {monotone}", kurt.len()),
    ))
}

fn c9(runs: &Runs) -> Result<(bool, String)> {
    let op = runs.summaries("op")?;
    let naive = runs.summaries("naive")?;
    let seq = runs.configs[0].1.seq_len as f64;
    let floor = 0.1 * seq.ln();
    let above = op.iter().filter(|s| s.min_mean_entropy.is_some_and(|h| h > floor)).count();
    let never_diverged = op.iter().all(|s| s.status == RunState::Completed);
    let fmt = |s: &[RunSummary]| {
        s.iter()
            .map(|r| format!("{:.3}{}", r.min_mean_entropy.unwrap_or(f64::NAN), if r.status == RunState::Diverged { "(div)" } else { "" }))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let lower = naive
        .iter()
        .zip(&op)
        .filter(|(n, o)| match (n.min_mean_entropy, o.min_mean_entropy) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        })
        .count();
    println!("  op min entropy    {} (floor {floor:.3})", fmt(&op));
    println!("  naive min entropy {}", fmt(&naive));
    Ok((
        above >= 4 && never_diverged && lower >= 3,
        format!("op above floor in {above}/5, never diverged {never_diverged}, naive lower in {lower}/5"),
    ))
}

fn verify_all(runs: &Runs) -> Result<(bool, String)> {
    let mut bad = Vec::new();
    for (name, cfg) in &runs.configs {
        let rep = verify_run(&read_run(&cfg.out_dir)?)?;
        if !rep.mismatches.is_empty() {
            bad.push(name.clone());
        }
    }
    Ok((bad.is_empty(), format!("mismatching runs: {bad:?}")))
}

fn threads() -> usize {
    std::env::var("OLAB_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n > 0).unwrap_or(1)
}

fn main() -> ExitCode {
    let mut report = Report { failed: Vec::new(), broken: false };
    report.run(1, "exact identities", secs(10), c1);
    report.run(2, "metric bounds", secs(5), c2);
    report.run(3, "gradient fidelity", secs(120), c3);
    report.run(4, "gaussian oracle", secs(30), c4);
    report.run(5, "optimizer equivalences", secs(30), c5);

    let tmp;
    let root = match std::env::var_os("OLAB_ACCEPTANCE_DIR") {
        Some(d) => PathBuf::from(d),
        None => {
            tmp = tempfile::tempdir().expect("temporary directory");
            tmp.path().to_path_buf()
        }
    };
    let t0 = Instant::now();
    let trained = Runs::plan(root).and_then(|r| r.train_all(threads()).map(|_| r));
    println!("  training took {:.0} s", t0.elapsed().as_secs_f64());
    match trained {
        Ok(runs) => {
            report.run(6, "op block mitigates outliers", None, || c6(&runs));
            report.run(7, "optimizer choices", None, || c7(&runs));
            report.run(8, "quantization coupling", secs(600), || c8(&runs));
            report.run(9, "entropy regulation", None, || c9(&runs));
            match verify_all(&runs) {
                Ok((ok, detail)) => println!("  checkpoint verification {} {detail}", if ok { "ok" } else { "failed" }),
                Err(e) => println!("  checkpoint verification error: {e}"),
            }
        }
        Err(e) => {
            report.broken = true;
            for (id, name) in [
                (6, "op block mitigates outliers"),
                (7, "optimizer choices"),
                (8, "quantization coupling"),
                (9, "entropy regulation"),
            ] {
                report.line(id, name, false, Duration::ZERO, &format!("error: {e}"));
            }
        }
    }
    if report.failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    println!("failed criteria: {:?}", report.failed);
    if std::env::var_os("OLAB_ACCEPTANCE_STRICT").is_some() || report.broken {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
