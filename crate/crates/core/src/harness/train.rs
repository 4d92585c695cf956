use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::{Precision, ProbeSpec, RunConfig, Seeds};
use crate::harness::data::{sample_windows, Corpus};
use crate::metrics::{append_jsonl, moment_update_decomposition, moments, MetricRecord, MomentUpdate};
use crate::model::{checkpoint, Batch, Model, ParameterStore, TapSite};
use crate::optim::{clip_global_norm, lr_at, save_state, Optimizer, OptimizerConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const RUN_MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "metrics.jsonl";
pub const STATUS: &str = "status.json";
pub const PROBE: &str = "probe.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";

/// Consecutive steps above `10·ln V` that count as divergence.
pub const HIGH_LOSS_PATIENCE: u64 = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunState {
    Completed,
    Diverged,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    /// Mean training loss since the previous point.
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub status: RunState,
    pub steps_completed: u64,
    pub diverged_at: Option<u64>,
    pub reason: Option<String>,
    /// Mean training loss over the last (up to) 50 steps.
    pub final_train_loss: Option<f64>,
    /// Mean loss on the held-out evaluation batches.
    pub final_eval_loss: Option<f64>,
    pub loss_curve: Vec<LossPoint>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub seeds: Seeds,
    pub parameter_count: usize,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub step: u64,
    pub layer: usize,
    pub site: TapSite,
    pub lr: f64,
    pub m2_before: f64,
    pub m4_before: f64,
    pub m2_after: f64,
    pub m4_after: f64,
    pub per_step: MomentUpdate,
    pub cumulative: MomentUpdate,
}

pub struct RunOutcome<T> {
    pub status: RunStatus,
    pub records: Vec<MetricRecord>,
    pub probe: Vec<ProbeRow>,
    pub params: ParameterStore<T>,
    pub optimizer: Optimizer<T>,
}

/// Fixed batch from the held-out split on which metrics are measured.
pub fn probe_batch(cfg: &RunConfig, corpus: &Corpus) -> Result<Batch> {
    let mut rng = Rng::new(cfg.seeds.aux, 0x70be);
    Ok(sample_windows(&corpus.eval, 1, cfg.batch_size, cfg.seq_len, &mut rng)?.remove(0))
}

pub fn eval_batches(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Batch>> {
    let mut rng = Rng::new(cfg.seeds.aux, 0xe7a1);
    sample_windows(&corpus.eval, cfg.eval_batches, cfg.batch_size, cfg.seq_len, &mut rng)
}

/// Metric rows for the residual stream entering each block's attention and
/// the unembedding.
pub fn tap_records<T: Scalar>(model: &Model, params: &ParameterStore<T>, batch: &Batch, step: u64) -> Result<Vec<MetricRecord>> {
    let out = model.forward(params, &batch.tokens, batch.batch, batch.seq)?;
    out.taps
        .iter()
        .filter(|t| matches!(t.site, TapSite::AttnInput | TapSite::UnembedInput))
        .map(|t| MetricRecord::from_tap(step, t))
        .collect()
}

pub fn site_activation<T: Scalar>(
    model: &Model,
    params: &ParameterStore<T>,
    batch: &Batch,
    layer: usize,
    site: TapSite,
) -> Result<Tensor<T>> {
    let out = model.forward(params, &batch.tokens, batch.batch, batch.seq)?;
    out.taps
        .into_iter()
        .find(|t| t.layer == layer && t.site == site)
        .map(|t| t.x)
        .ok_or_else(|| Error::Config(format!("no tap at layer {layer} site {}", site.as_str())))
}

pub fn mean_loss<T: Scalar>(model: &Model, params: &ParameterStore<T>, batches: &[Batch]) -> Result<f64> {
    let mut s = 0.0;
    for b in batches {
        s += model.loss(params, b)?;
    }
    Ok(s / batches.len() as f64)
}

fn first_moment(cfg: &OptimizerConfig) -> f64 {
    match *cfg {
        OptimizerConfig::Sgdm { momentum, .. } => momentum,
        OptimizerConfig::Adamw { beta1, .. }
        | OptimizerConfig::Adafactor { beta1, .. }
        | OptimizerConfig::Shampoo { beta1, .. }
        | OptimizerConfig::Soap { beta1, .. } => beta1,
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<S> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn checkpoint_dir(run: &Path, step: u64) -> PathBuf {
    run.join(CHECKPOINTS).join(format!("step-{step}"))
}

fn save_checkpoint<T: Scalar>(run: &Path, step: u64, cfg: &RunConfig, params: &ParameterStore<T>, opt: &Optimizer<T>) -> Result<()> {
    let dir = checkpoint_dir(run, step);
    checkpoint::save(&dir, step, &cfg.model, params)?;
    save_state(&dir, opt)
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in [RUN_MANIFEST, METRICS, STATUS, PROBE] {
        let p = dir.join(f);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let ck = dir.join(CHECKPOINTS);
    if ck.exists() {
        std::fs::remove_dir_all(&ck).map_err(|e| Error::io(&ck, e))?;
    }
    Ok(())
}

/// Train per `cfg`, writing the run directory when `out` is given.
pub fn execute<T: Scalar>(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    let model = Model::new(cfg.model.clone())?;
    let mut params: ParameterStore<T> = model.init(&Rng::new(cfg.seeds.model, 0));
    let corpus = Corpus::load(&cfg.dataset, cfg.seeds.data, cfg.seq_len)?;
    let probe = probe_batch(cfg, &corpus)?;
    let evals = eval_batches(cfg, &corpus)?;
    let mut sampler = Rng::new(cfg.seeds.data, 1);
    let mut opt = Optimizer::<T>::new(cfg.optimizer.clone())?;
    let sched = cfg.schedule_spec();
    let ln_v = (cfg.model.vocab_size as f64).ln();

    let mut warnings = Vec::new();
    if let Some(p) = cfg.probe {
        if p.strict && first_moment(&cfg.optimizer) != 0.0 {
            warnings.push(format!(
                "decomposition probe with first-moment decay {} mixes updates from several steps",
                first_moment(&cfg.optimizer)
            ));
        }
    }

    if let Some(dir) = out {
        prepare_dir(dir)?;
        let manifest = RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: cfg.seeds,
            parameter_count: params.num_scalars(),
            config: cfg.clone(),
        };
        write_json(&dir.join(RUN_MANIFEST), &manifest)?;
        save_checkpoint(dir, 0, cfg, &params, &opt)?;
    }

    let mut records = Vec::new();
    let emit = |recs: Vec<MetricRecord>, records: &mut Vec<MetricRecord>| -> Result<()> {
        if let Some(dir) = out {
            append_jsonl(&dir.join(METRICS), &recs)?;
        }
        records.extend(recs);
        Ok(())
    };
    if cfg.steps > 0 {
        emit(tap_records(&model, &params, &probe, 0)?, &mut records)?;
    }

    let mut probe_rows = Vec::new();
    let mut probe_x = match cfg.probe {
        Some(ProbeSpec { layer, site, .. }) if cfg.steps > 0 => Some(site_activation(&model, &params, &probe, layer, site)?),
        _ => None,
    };
    let mut cumulative = MomentUpdate::default();

    let mut status = RunStatus {
        status: RunState::Completed,
        steps_completed: 0,
        diverged_at: None,
        reason: None,
        final_train_loss: None,
        final_eval_loss: None,
        loss_curve: Vec::new(),
        warnings,
    };
    let mut recent: Vec<f64> = Vec::new();
    let mut interval_sum = 0.0;
    let mut interval_n = 0u64;
    let mut high = 0u64;

    for t in 1..=cfg.steps {
        let batch = sample_windows(&corpus.train, 1, cfg.batch_size, cfg.seq_len, &mut sampler)?.remove(0);
        let report = model.backward(&mut params, &batch)?;
        if !report.finite {
            status.status = RunState::Diverged;
            status.diverged_at = Some(t);
            status.reason = Some("non-finite loss".into());
            break;
        }
        high = if report.loss > 10.0 * ln_v { high + 1 } else { 0 };
        recent.push(report.loss);
        if recent.len() > 50 {
            recent.remove(0);
        }
        interval_sum += report.loss;
        interval_n += 1;
        if cfg.clip > 0.0 {
            clip_global_norm(&mut params, cfg.clip)?;
        }
        let lr = lr_at(&sched, t - 1);
        opt.step(&mut params, lr)?;
        status.steps_completed = t;
        if !params.all_finite() {
            status.status = RunState::Diverged;
            status.diverged_at = Some(t);
            status.reason = Some("non-finite parameters".into());
            break;
        }
        if high >= HIGH_LOSS_PATIENCE {
            status.status = RunState::Diverged;
            status.diverged_at = Some(t);
            status.reason = Some(format!("loss above 10·ln V for {HIGH_LOSS_PATIENCE} consecutive steps"));
            break;
        }

        let mut update = None;
        if let (Some(p), Some(before)) = (cfg.probe, probe_x.as_ref()) {
            let after = site_activation(&model, &params, &probe, p.layer, p.site)?;
            let dx = after.zip_with(before, |a, b| a - b)?;
            let u = moment_update_decomposition(before, &dx)?;
            cumulative.add(&u);
            let (m2_before, m4_before) = moments(before)?;
            let (m2_after, m4_after) = moments(&after)?;
            let row = ProbeRow {
                step: t,
                layer: p.layer,
                site: p.site,
                lr,
                m2_before,
                m4_before,
                m2_after,
                m4_after,
                per_step: u,
                cumulative,
            };
            if let Some(dir) = out {
                let path = dir.join(PROBE);
                let mut line = serde_json::to_string(&row)?;
                line.push('\n');
                use std::io::Write;
                std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .and_then(|mut f| f.write_all(line.as_bytes()))
                    .map_err(|e| Error::io(&path, e))?;
            }
            probe_rows.push(row);
            probe_x = Some(after);
            update = Some((p, u));
        }

        if t % cfg.tap_interval == 0 || t == cfg.steps {
            let mut recs = match tap_records(&model, &params, &probe, t) {
                Ok(r) => r,
                Err(Error::Metric(msg)) => {
                    status.status = RunState::Diverged;
                    status.diverged_at = Some(t);
                    status.reason = Some(format!("degenerate activations: {msg}"));
                    break;
                }
                Err(e) => return Err(e),
            };
            if let Some((p, u)) = update {
                for r in recs.iter_mut().filter(|r| r.layer == p.layer && r.site == p.site) {
                    *r = r.clone().with_update(&u);
                }
            }
            emit(recs, &mut records)?;
            status.loss_curve.push(LossPoint {
                step: t,
                loss: interval_sum / interval_n as f64,
            });
            interval_sum = 0.0;
            interval_n = 0;
        }
        if let Some(dir) = out {
            if cfg.checkpoint_interval > 0 && t % cfg.checkpoint_interval == 0 && t != cfg.steps {
                save_checkpoint(dir, t, cfg, &params, &opt)?;
            }
        }
    }

    if !recent.is_empty() {
        status.final_train_loss = Some(recent.iter().sum::<f64>() / recent.len() as f64);
    }
    if status.status == RunState::Completed {
        let l = mean_loss(&model, &params, &evals)?;
        status.final_eval_loss = l.is_finite().then_some(l);
        if let Some(dir) = out {
            if cfg.steps > 0 {
                save_checkpoint(dir, cfg.steps, cfg, &params, &opt)?;
            }
        }
    }
    if let Some(dir) = out {
        write_json(&dir.join(STATUS), &status)?;
    }
    Ok(RunOutcome {
        status,
        records,
        probe: probe_rows,
        params,
        optimizer: opt,
    })
}

/// Train into `cfg.out_dir` at the configured precision.
pub fn train(cfg: &RunConfig) -> Result<RunStatus> {
    let dir = cfg.out_dir.clone();
    match cfg.precision {
        Precision::F64 => execute::<f64>(cfg, Some(&dir)).map(|o| o.status),
        Precision::F32 => execute::<f32>(cfg, Some(&dir)).map(|o| o.status),
    }
}

/// Run `cfg` in memory with a probe at (`layer`, `site`) and return the
/// per-step moment-update rows.
pub fn decomposition_probe(cfg: &RunConfig, layer: usize, site: TapSite) -> Result<(Vec<ProbeRow>, Vec<String>)> {
    let mut cfg = cfg.clone();
    cfg.probe = Some(ProbeSpec {
        layer,
        site,
        strict: cfg.probe.map(|p| p.strict).unwrap_or(true),
    });
    let out = match cfg.precision {
        Precision::F64 => {
            let o = execute::<f64>(&cfg, None)?;
            (o.probe, o.status.warnings)
        }
        Precision::F32 => {
            let o = execute::<f32>(&cfg, None)?;
            (o.probe, o.status.warnings)
        }
    };
    Ok(out)
}
