use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use olab::harness::{
    analyze_tensor, compare, plot_csv, quantize_run, read_run, train, verify_run, MatrixSpec, RunConfig, RunState,
};
use olab::io::read_tensor;
use olab::metrics::{gaussian_exact, gaussian_feature_oracle};
use olab::model::config::{BlockKind, EntropyReg, NormKind};
use olab::model::gradcheck::gradcheck;
use olab::oracle::{decomposition_check, gradcheck_config, trace_check};
use olab::{Error, Model, ModelConfig, Rng, Tensor};

#[derive(Parser)]
#[command(name = "olab", version, about = "Outlier-feature laboratory for small transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dotted-path override, e.g. `optimizer.epsilon=1e-5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Metrics of an OLTENS1 dump, or verification of a run directory.
    Analyze {
        input: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Post-training fake quantization of a run's checkpoint.
    Quantize {
        run: PathBuf,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        /// Calibration seeds.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Calibration batches per seed.
        #[arg(long, default_value_t = 8)]
        batches: usize,
        /// Checkpoint step; defaults to the last one.
        #[arg(long)]
        step: Option<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Property checks with printed margins.
    Oracle {
        #[command(subcommand)]
        which: Oracle,
    },
    /// Compare two finished runs.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Write long-format plot data here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Train every variant × seed of an experiment matrix.
    Matrix {
        spec: PathBuf,
        /// List the runs without training.
        #[arg(long)]
        dry_run: bool,
    },
}

#[derive(Subcommand)]
enum Oracle {
    GaussianProp {
        #[arg(long, default_value_t = 0.5)]
        rho: f64,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    TraceIdentity {
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Decomposition {
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Gradcheck {
        #[arg(long, value_enum, default_value_t = BlockArg::Op)]
        block: BlockArg,
        /// Defaults to qk-norm for the OP block and none otherwise.
        #[arg(long, value_enum)]
        entropy_reg: Option<EntRegArg>,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BlockArg {
    PreLn,
    PostLn,
    PreRms,
    PreSrms,
    Op,
    Naive,
}

#[derive(Clone, Copy, ValueEnum)]
enum EntRegArg {
    None,
    QkNorm,
    TanhCap,
    Clamp,
}

/// Failure classes mapped onto exit codes 1 and 2.
enum Failure {
    Check(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse(_) | Error::Io { .. } | Error::Json(_) | Error::TensorFormat { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Check(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn threads() -> Result<usize, Failure> {
    match std::env::var("OLAB_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!("OLAB_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn cmd_train(config: &Path, overrides: &[String]) -> CmdResult {
    let cfg = RunConfig::load(config, overrides)?;
    let status = train(&cfg)?;
    println!("run {}", cfg.out_dir.display());
    print_status(&status);
    Ok(())
}

fn print_status(status: &olab::harness::RunStatus) {
    match status.status {
        RunState::Completed => println!("status completed after {} steps", status.steps_completed),
        RunState::Diverged => println!(
            "status diverged at step {} ({})",
            status.diverged_at.unwrap_or(0),
            status.reason.as_deref().unwrap_or("")
        ),
    }
    match status.final_eval_loss {
        Some(l) => println!("final loss {l:.6}"),
        None => println!("final loss n/a"),
    }
    for w in &status.warnings {
        eprintln!("warning: {w}");
    }
}

fn print_json<S: serde::Serialize>(v: &S) -> CmdResult {
    let text = serde_json::to_string_pretty(v).map_err(|e| Failure::Usage(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn cmd_analyze(input: &Path, json: bool) -> CmdResult {
    if input.is_dir() {
        let run = read_run(input)?;
        let rep = verify_run(&run)?;
        if json {
            print_json(&rep)?;
        } else {
            println!("steps {:?}", rep.steps);
            println!("values checked {}", rep.values_checked);
            println!("max abs diff {:e}", rep.max_abs_diff);
        }
        if let Some(m) = rep.mismatches.first() {
            for m in &rep.mismatches {
                eprintln!(
                    "mismatch at step {} layer {} {} {}: logged {:?} recomputed {:?}",
                    m.step,
                    m.layer,
                    m.site.as_str(),
                    m.field,
                    m.logged,
                    m.recomputed
                );
            }
            return Err(Failure::Check(format!("{} mismatches, first at step {}", rep.mismatches.len(), m.step)));
        }
        return Ok(());
    }
    let x: Tensor<f64> = read_tensor(input)?;
    let a = analyze_tensor(&x)?;
    if json {
        return print_json(&a);
    }
    println!("shape {}x{}", a.rows, a.cols);
    println!("kurtosis {}", a.kurtosis);
    match a.mmr {
        Some(m) => println!("mmr {m} (skipped rows {})", a.mmr_skipped_rows),
        None => println!("mmr undefined (every row has a zero median)"),
    }
    println!("sigprop mean offdiag {}", a.sigprop_mean_offdiag);
    println!("sigprop rms offdiag {}", a.sigprop_rms_offdiag);
    println!("feature corr rms {}", a.feature_corr_rms);
    println!("trace identity residual {:e}", a.trace_identity_residual);
    if let Some(h) = a.attention_entropy {
        println!("attention entropy {h}");
    }
    Ok(())
}

fn cmd_quantize(run: &Path, bits: u32, seeds: &[u64], batches: usize, step: Option<u64>, json: bool) -> CmdResult {
    let data = read_run(run)?;
    let rep = quantize_run(&data, step, bits, seeds, batches)?;
    if json {
        return print_json(&rep);
    }
    let s = &rep.summary;
    println!("bits {}", s.bits);
    println!("calibration seeds {:?}", s.calibration_seeds);
    println!("loss_fp {:.6}", s.loss_fp);
    println!("loss_w{0}a{0} {1:.6} (std {2:.2e})", s.bits, s.loss_w8a8, s.loss_w8a8_std);
    println!("quantization error {:.6} (std {:.2e})", s.quantization_error, s.quantization_error_std);
    println!("mean kurtosis {:.4}", s.mean_kurtosis);
    Ok(())
}

fn verdict(ok: bool, what: &str) -> CmdResult {
    if ok {
        println!("PASS {what}");
        Ok(())
    } else {
        println!("FAIL {what}");
        Err(Failure::Check(format!("{what} failed")))
    }
}

fn oracle_trace(trials: usize, seed: u64) -> CmdResult {
    let t = trace_check(trials, seed)?;
    println!("trials {trials}");
    println!("max trace residual (relative) {:e} (limit 1e-9)", t.trace);
    println!("max ledger residual (relative) {:e} (limit 1e-9)", t.ledger);
    verdict(t.trace <= 1e-9 && t.ledger <= 1e-9, "trace identity")
}

fn oracle_decomposition(trials: usize, seed: u64) -> CmdResult {
    let worst = decomposition_check(trials, seed)?;
    println!("trials {trials}");
    println!("max moment reconstruction error (relative) {worst:e} (limit 1e-12)");
    verdict(worst <= 1e-12, "moment-update decomposition")
}

fn oracle_gaussian(rho: f64, n: usize, d: usize, trials: usize, seed: u64) -> CmdResult {
    let o = gaussian_feature_oracle(rho, n, d, trials, &mut Rng::new(seed, 0))?;
    let z = (o.estimate - o.exact_finite_n) / o.stderr;
    println!("estimate {:.6} ± {:.6}", o.estimate, o.stderr);
    println!("exact (n={n}) {:.7}", o.exact_finite_n);
    println!("infinite-n limit {:.7}", gaussian_exact(rho, usize::MAX));
    println!("z {z:.3} (limit 4)");
    verdict(z.abs() <= 4.0, "gaussian feature oracle")
}

fn gradcheck_model(block: BlockArg, reg: Option<EntRegArg>, d: usize, depth: usize) -> ModelConfig {
    let reg = reg.unwrap_or(match block {
        BlockArg::Op => EntRegArg::QkNorm,
        _ => EntRegArg::None,
    });
    let block = match block {
        BlockArg::PreLn => BlockKind::PreNorm {
            norm: NormKind::LayerNorm,
        },
        BlockArg::PostLn => BlockKind::PostNorm {
            norm: NormKind::LayerNorm,
        },
        BlockArg::PreRms => BlockKind::PreNorm {
            norm: NormKind::RmsNorm,
        },
        BlockArg::PreSrms => BlockKind::PreNorm {
            norm: NormKind::SrmsNorm,
        },
        BlockArg::Op => BlockKind::Op,
        BlockArg::Naive => BlockKind::UnnormalizedNaive,
    };
    let reg = match reg {
        EntRegArg::None => EntropyReg::None,
        EntRegArg::QkNorm => EntropyReg::QkNorm {
            norm: NormKind::RmsNorm,
            trainable: true,
        },
        EntRegArg::TanhCap => EntropyReg::TanhCap { max_attn_val: 1.5 },
        EntRegArg::Clamp => EntropyReg::Clamp { cap: 1.0 },
    };
    gradcheck_config(block, reg, d, depth)
}

fn oracle_gradcheck(block: BlockArg, reg: Option<EntRegArg>, d: usize, depth: usize, seed: u64) -> CmdResult {
    let model = Model::new(gradcheck_model(block, reg, d, depth))?;
    let rep = gradcheck(&model, seed, 2, 5)?;
    println!("scalars checked {}", rep.checked);
    println!(
        "max relative error {:e} at {}[{}] (limit 1e-5)",
        rep.max_rel_err, rep.worst_path, rep.worst_index
    );
    verdict(rep.max_rel_err <= 1e-5, "gradient check")
}

fn cmd_compare(a: &Path, b: &Path, csv: Option<&Path>, json: bool) -> CmdResult {
    let (ra, rb) = (read_run(a)?, read_run(b)?);
    let rep = compare(&ra, &rb);
    if let Some(path) = csv {
        let text = plot_csv(&[("A", &ra.records), ("B", &rb.records)]);
        std::fs::write(path, text).map_err(|e| Failure::from(Error::io(path, e)))?;
    }
    if json {
        return print_json(&rep);
    }
    println!("A {} ({:?})", rep.run_a, rep.status_a);
    println!("B {} ({:?})", rep.run_b, rep.status_b);
    println!("peak layer kurtosis A {:?}", rep.peak_layer_kurtosis_a);
    println!("peak layer kurtosis B {:?}", rep.peak_layer_kurtosis_b);
    for v in &rep.verdicts {
        println!("{}", v.line);
    }
    Ok(())
}

fn cmd_matrix(spec: &Path, dry_run: bool) -> CmdResult {
    let runs = MatrixSpec::load(spec)?.expand()?;
    if dry_run {
        for (name, cfg) in &runs {
            println!("{name} {}", cfg.out_dir.display());
        }
        return Ok(());
    }
    let workers = threads()?.min(runs.len());
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<std::sync::Mutex<Option<olab::Result<olab::harness::RunStatus>>>> =
        runs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= runs.len() {
                    break;
                }
                *results[k].lock().unwrap() = Some(train(&runs[k].1));
            });
        }
    });
    let mut first_err = None;
    for ((name, _), r) in runs.iter().zip(results) {
        match r.into_inner().unwrap().expect("every run is attempted") {
            Ok(st) => println!(
                "{name} {:?} steps {} final loss {}",
                st.status,
                st.steps_completed,
                st.final_eval_loss.map_or("n/a".to_string(), |l| format!("{l:.6}"))
            ),
            Err(e) => {
                println!("{name} error: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> CmdResult {
    threads()?;
    match cli.command {
        Command::Train { config, overrides } => cmd_train(&config, &overrides),
        Command::Analyze { input, json } => cmd_analyze(&input, json),
        Command::Quantize {
            run,
            bits,
            seeds,
            batches,
            step,
            json,
        } => cmd_quantize(&run, bits, &seeds, batches, step, json),
        Command::Oracle { which } => match which {
            Oracle::GaussianProp { rho, n, d, trials, seed } => oracle_gaussian(rho, n, d, trials, seed),
            Oracle::TraceIdentity { trials, seed } => oracle_trace(trials, seed),
            Oracle::Decomposition { trials, seed } => oracle_decomposition(trials, seed),
            Oracle::Gradcheck {
                block,
                entropy_reg,
                d,
                depth,
                seed,
            } => oracle_gradcheck(block, entropy_reg, d, depth, seed),
        },
        Command::Compare { a, b, csv, json } => cmd_compare(&a, &b, csv.as_deref(), json),
        Command::Matrix { spec, dry_run } => cmd_matrix(&spec, dry_run),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
