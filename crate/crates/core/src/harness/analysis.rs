use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::Precision;
use crate::harness::data::Corpus;
use crate::harness::train::{
    checkpoint_dir, eval_batches, probe_batch, read_json, tap_records, RunManifest, RunState, RunStatus, CHECKPOINTS, METRICS, RUN_MANIFEST,
    STATUS,
};
use crate::metrics::{attention_entropy, kurtosis, mmr, read_jsonl, sigprop, MetricRecord, MmrAggregate};
use crate::model::{checkpoint, Model, TapSite};
use crate::quant::{quantize_report, CalibrationPlan, QuantReport};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub struct RunData {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<MetricRecord>,
    pub status: RunStatus,
}

/// Load a finished run; a missing status file means the run is incomplete.
pub fn read_run(dir: &Path) -> Result<RunData> {
    let manifest: RunManifest = read_json(&dir.join(RUN_MANIFEST))?;
    let status_path = dir.join(STATUS);
    if !status_path.exists() {
        return Err(Error::Config(format!("run {} is incomplete (no {STATUS})", dir.display())));
    }
    let status: RunStatus = read_json(&status_path)?;
    let metrics = dir.join(METRICS);
    let records = if metrics.exists() { read_jsonl(&metrics)? } else { Vec::new() };
    Ok(RunData {
        dir: dir.to_path_buf(),
        manifest,
        records,
        status,
    })
}

/// Per-step mean of `field` over all records of that step that carry it.
pub fn layer_mean_series(records: &[MetricRecord], field: impl Fn(&MetricRecord) -> Option<f64>) -> Vec<(u64, f64)> {
    let mut acc: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let Some(v) = field(r) {
            let e = acc.entry(r.step).or_default();
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunState,
    pub steps: u64,
    /// Largest layer-mean kurtosis over tapped steps.
    pub peak_mean_kurtosis: f64,
    pub final_mean_kurtosis: f64,
    /// Peak kurtosis per layer index (the last entry is the unembedding input).
    pub peak_layer_kurtosis: Vec<f64>,
    pub peak_mean_offdiag: f64,
    pub min_mean_entropy: Option<f64>,
    pub final_loss: Option<f64>,
}

pub fn summarize(records: &[MetricRecord], status: &RunStatus) -> RunSummary {
    let kurt = layer_mean_series(records, |r| Some(r.kurtosis));
    let off = layer_mean_series(records, |r| Some(r.sigprop_mean_offdiag));
    let ent = layer_mean_series(records, |r| r.attention_entropy);
    let max = |s: &[(u64, f64)]| s.iter().map(|p| p.1).fold(f64::NAN, f64::max);
    let layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let mut peak_layer = vec![f64::NAN; layers];
    for r in records {
        peak_layer[r.layer] = peak_layer[r.layer].max(r.kurtosis);
    }
    RunSummary {
        status: status.status,
        steps: status.steps_completed,
        peak_mean_kurtosis: max(&kurt),
        final_mean_kurtosis: kurt.last().map(|p| p.1).unwrap_or(f64::NAN),
        peak_layer_kurtosis: peak_layer,
        peak_mean_offdiag: max(&off),
        min_mean_entropy: ent.iter().map(|p| p.1).reduce(f64::min),
        final_loss: status.final_eval_loss.or(status.final_train_loss),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `A > B`, `A < B` or `tie`.
    pub relation: String,
    pub line: String,
}

fn verdict(metric: &str, a: f64, b: f64) -> Verdict {
    let tol = 1e-12 * a.abs().max(b.abs()).max(1.0);
    let relation = if (a - b).abs() <= tol || (a.is_nan() && b.is_nan()) {
        "tie"
    } else if a > b {
        "A > B"
    } else if a < b {
        "A < B"
    } else {
        "incomparable"
    };
    let line = if relation == "tie" {
        format!("{metric}: tie ({a} vs {b})")
    } else {
        format!("{metric} {relation} ({a} vs {b})")
    };
    Verdict {
        metric: metric.to_string(),
        a,
        b,
        relation: relation.to_string(),
        line,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub run_a: String,
    pub run_b: String,
    pub status_a: RunState,
    pub status_b: RunState,
    pub peak_layer_kurtosis_a: Vec<f64>,
    pub peak_layer_kurtosis_b: Vec<f64>,
    pub mean_kurtosis_end_a: f64,
    pub mean_kurtosis_end_b: f64,
    pub peak_mean_offdiag_a: f64,
    pub peak_mean_offdiag_b: f64,
    pub final_loss_a: Option<f64>,
    pub final_loss_b: Option<f64>,
    pub verdicts: Vec<Verdict>,
}

pub fn compare(a: &RunData, b: &RunData) -> CompareReport {
    let (sa, sb) = (summarize(&a.records, &a.status), summarize(&b.records, &b.status));
    let mut verdicts = vec![
        verdict("peak kurtosis", sa.peak_mean_kurtosis, sb.peak_mean_kurtosis),
        verdict("final mean kurtosis", sa.final_mean_kurtosis, sb.final_mean_kurtosis),
        verdict("peak mean off-diagonal", sa.peak_mean_offdiag, sb.peak_mean_offdiag),
    ];
    if let (Some(x), Some(y)) = (sa.final_loss, sb.final_loss) {
        verdicts.push(verdict("final loss", x, y));
    }
    if let (Some(x), Some(y)) = (sa.min_mean_entropy, sb.min_mean_entropy) {
        verdicts.push(verdict("min attention entropy", x, y));
    }
    CompareReport {
        run_a: a.dir.display().to_string(),
        run_b: b.dir.display().to_string(),
        status_a: sa.status,
        status_b: sb.status,
        peak_layer_kurtosis_a: sa.peak_layer_kurtosis,
        peak_layer_kurtosis_b: sb.peak_layer_kurtosis,
        mean_kurtosis_end_a: sa.final_mean_kurtosis,
        mean_kurtosis_end_b: sb.final_mean_kurtosis,
        peak_mean_offdiag_a: sa.peak_mean_offdiag,
        peak_mean_offdiag_b: sb.peak_mean_offdiag,
        final_loss_a: sa.final_loss,
        final_loss_b: sb.final_loss,
        verdicts,
    }
}

/// Long-format rows `run,step,layer,site,metric,value` for external plotting.
pub fn plot_csv(runs: &[(&str, &[MetricRecord])]) -> String {
    let mut out = String::from("run,step,layer,site,metric,value\n");
    for (name, records) in runs {
        for r in records.iter() {
            for (metric, v) in r.fields() {
                if let Some(v) = v {
                    out.push_str(&format!("{name},{},{},{},{metric},{v:?}\n", r.step, r.layer, r.site.as_str()));
                }
            }
        }
    }
    out
}

/// Metrics of a raw `n×d` activation dump; entropy only for row-stochastic
/// square matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorAnalysis {
    pub rows: usize,
    pub cols: usize,
    pub kurtosis: f64,
    pub mmr: Option<f64>,
    pub mmr_skipped_rows: usize,
    pub sigprop_mean_offdiag: f64,
    pub sigprop_rms_offdiag: f64,
    pub feature_corr_rms: f64,
    pub trace_identity_residual: f64,
    pub attention_entropy: Option<f64>,
}

pub fn analyze_tensor<T: Scalar>(x: &Tensor<T>) -> Result<TensorAnalysis> {
    if x.rank() != 2 {
        return Err(Error::Shape(format!("analysis needs a matrix, got shape {:?}", x.shape())));
    }
    let sp = sigprop(x)?;
    // Undefined when every row has a zero median; the other metrics stand.
    let m = match mmr(x, MmrAggregate::Mean) {
        Ok(m) => Some(m),
        Err(Error::Metric(_)) => None,
        Err(e) => return Err(e),
    };
    let stochastic = x.rows() == x.cols()
        && (0..x.rows()).all(|i| {
            let row = x.row(i);
            row.iter().all(|v| v.as_f64() >= 0.0) && (row.iter().map(|v| v.as_f64()).sum::<f64>() - 1.0).abs() <= 1e-9
        });
    Ok(TensorAnalysis {
        rows: x.rows(),
        cols: x.cols(),
        kurtosis: kurtosis(x)?,
        mmr: m.as_ref().map(|m| m.value),
        mmr_skipped_rows: m.map_or(x.rows(), |m| m.skipped_rows),
        sigprop_mean_offdiag: sp.mean_offdiag,
        sigprop_rms_offdiag: sp.rms_offdiag,
        feature_corr_rms: sp.feature_corr_rms,
        trace_identity_residual: sp.trace_residual,
        attention_entropy: if stochastic { Some(attention_entropy(x)?) } else { None },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub step: u64,
    pub layer: usize,
    pub site: TapSite,
    pub field: String,
    pub logged: Option<f64>,
    pub recomputed: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    /// Checkpointed steps whose rows were recomputed.
    pub steps: Vec<u64>,
    pub values_checked: usize,
    pub max_abs_diff: f64,
    pub mismatches: Vec<Mismatch>,
}

/// Tolerance for logged-vs-recomputed metric values.
pub const VERIFY_TOL: f64 = 1e-9;

pub fn checkpoint_steps(run: &Path) -> Result<Vec<u64>> {
    let dir = run.join(CHECKPOINTS);
    let mut steps = Vec::new();
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if let Some(s) = entry.file_name().to_str().and_then(|n| n.strip_prefix("step-")).and_then(|n| n.parse().ok()) {
            steps.push(s);
        }
    }
    steps.sort_unstable();
    Ok(steps)
}

fn recompute<T: Scalar>(run: &RunData, model: &Model, step: u64) -> Result<Vec<MetricRecord>> {
    let cfg = &run.manifest.config;
    let corpus = Corpus::load(&cfg.dataset, cfg.seeds.data, cfg.seq_len)?;
    let batch = probe_batch(cfg, &corpus)?;
    let (_, params) = checkpoint::load::<T>(&checkpoint_dir(&run.dir, step))?;
    tap_records(model, &params, &batch, step)
}

/// Recompute the metric rows of every checkpointed step and compare them
/// with the log.
pub fn verify_run(run: &RunData) -> Result<VerifyReport> {
    let model = Model::new(run.manifest.config.model.clone())?;
    let mut report = VerifyReport {
        steps: Vec::new(),
        values_checked: 0,
        max_abs_diff: 0.0,
        mismatches: Vec::new(),
    };
    for step in checkpoint_steps(&run.dir)? {
        let logged: Vec<&MetricRecord> = run.records.iter().filter(|r| r.step == step).collect();
        if logged.is_empty() {
            continue;
        }
        let fresh = match run.manifest.config.precision {
            Precision::F64 => recompute::<f64>(run, &model, step)?,
            Precision::F32 => recompute::<f32>(run, &model, step)?,
        };
        report.steps.push(step);
        for f in &fresh {
            let Some(l) = logged.iter().find(|r| r.layer == f.layer && r.site == f.site) else {
                report.mismatches.push(Mismatch {
                    step,
                    layer: f.layer,
                    site: f.site,
                    field: "row".into(),
                    logged: None,
                    recomputed: None,
                });
                continue;
            };
            // u-terms come from the update, not the snapshot, so they are not recomputed.
            for ((name, a), (_, b)) in l.fields().into_iter().zip(f.fields()).filter(|((n, _), _)| !n.starts_with('u')) {
                report.values_checked += 1;
                let ok = match (a, b) {
                    (Some(a), Some(b)) => {
                        let d = (a - b).abs();
                        report.max_abs_diff = report.max_abs_diff.max(d);
                        d <= VERIFY_TOL * a.abs().max(1.0)
                    }
                    (None, None) => true,
                    _ => false,
                };
                if !ok {
                    report.mismatches.push(Mismatch {
                        step,
                        layer: f.layer,
                        site: f.site,
                        field: name.to_string(),
                        logged: a,
                        recomputed: b,
                    });
                }
            }
        }
    }
    Ok(report)
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape(format!("spearman needs two equal-length samples of ≥ 2, got {} and {}", a.len(), b.len())));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Metric("spearman of a constant sample".into()));
    }
    Ok(sab / (saa * sbb).sqrt())
}

fn quantize_at<T: Scalar>(run: &RunData, step: u64, bits: u32, seeds: &[u64], batches: usize) -> Result<QuantReport> {
    let cfg = &run.manifest.config;
    let dir = checkpoint_dir(&run.dir, step);
    if !dir.join(checkpoint::MANIFEST).exists() {
        return Err(Error::Config(format!("no checkpoint at {}", dir.display())));
    }
    let (manifest, params) = checkpoint::load::<T>(&dir)?;
    let model = Model::new(manifest.config)?;
    let corpus = Corpus::load(&cfg.dataset, cfg.seeds.data, cfg.seq_len)?;
    let eval = eval_batches(cfg, &corpus)?;
    let plan = CalibrationPlan::new(batches, cfg.batch_size, cfg.seq_len, 0)?;
    quantize_report(&model, &params, &corpus.train, &plan, seeds, &eval, bits)
}

/// Post-training quantization of a run's checkpoint (the last one unless
/// `step` is given), calibrated on the training split once per seed and
/// scored on the run's evaluation batches.
pub fn quantize_run(run: &RunData, step: Option<u64>, bits: u32, seeds: &[u64], batches: usize) -> Result<QuantReport> {
    let step = match step {
        Some(s) => s,
        None => *checkpoint_steps(&run.dir)?
            .last()
            .ok_or_else(|| Error::Config(format!("run {} has no checkpoints", run.dir.display())))?,
    };
    match run.manifest.config.precision {
        Precision::F64 => quantize_at::<f64>(run, step, bits, seeds, batches),
        Precision::F32 => quantize_at::<f32>(run, step, bits, seeds, batches),
    }
}
