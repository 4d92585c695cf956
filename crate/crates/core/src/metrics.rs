//! Outlier-feature, signal-propagation, attention-entropy and
//! moment-decomposition measurements.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::model::{ActivationTap, TapSite};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{abs_median, Tensor};

fn require_matrix<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if x.rank() != 2 || x.rows() == 0 || x.cols() == 0 {
        return Err(Error::Shape(format!("{what} needs a non-empty n×d matrix, got {:?}", x.shape())));
    }
    Ok((x.rows(), x.cols()))
}

/// Per-neuron RMS `s_j = sqrt(mean_α x²_{αj})`.
pub fn neuron_rms<T: Scalar>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, d) = require_matrix(x, "neuron_rms")?;
    let mut s = vec![0.0; d];
    for r in 0..n {
        for (acc, v) in s.iter_mut().zip(x.row(r)) {
            let v = v.as_f64();
            *acc += v * v;
        }
    }
    Ok(s.into_iter().map(|v| (v / n as f64).sqrt()).collect())
}

/// `mean_j s_j⁴ / (mean_j s_j²)²` over neuron RMS values; uncentred unless
/// `centred`, in which case column means are removed first.
pub fn kurtosis_with<T: Scalar>(x: &Tensor<T>, centred: bool) -> Result<f64> {
    let (n, d) = require_matrix(x, "kurtosis")?;
    let mut ms = vec![0.0; d];
    if centred {
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for r in 0..n {
            for ((acc, v), m) in ms.iter_mut().zip(x.row(r)).zip(&mean) {
                let c = v.as_f64() - m;
                *acc += c * c;
            }
        }
        ms.iter_mut().for_each(|v| *v /= n as f64);
    } else {
        ms = neuron_rms(x)?.into_iter().map(|s| s * s).collect();
    }
    let m2 = ms.iter().sum::<f64>() / d as f64;
    let m4 = ms.iter().map(|v| v * v).sum::<f64>() / d as f64;
    if !(m2 > 0.0) {
        return Err(Error::Metric("kurtosis of an all-zero activation matrix".into()));
    }
    Ok(m4 / (m2 * m2))
}

pub fn kurtosis<T: Scalar>(x: &Tensor<T>) -> Result<f64> {
    kurtosis_with(x, false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MmrAggregate {
    #[default]
    Mean,
    Median,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mmr {
    pub value: f64,
    /// Rows skipped because their absolute median is zero.
    pub skipped_rows: usize,
}

/// Max-median ratio per row, aggregated across rows.
pub fn mmr<T: Scalar>(x: &Tensor<T>, aggregate: MmrAggregate) -> Result<Mmr> {
    let (n, _) = require_matrix(x, "mmr")?;
    let mut ratios = Vec::with_capacity(n);
    let mut skipped = 0;
    let mut buf: Vec<f64> = Vec::new();
    for r in 0..n {
        buf.clear();
        buf.extend(x.row(r).iter().map(|v| v.as_f64()));
        let max = buf.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let med = abs_median(&mut buf);
        if med > 0.0 {
            ratios.push(max / med);
        } else {
            skipped += 1;
        }
    }
    if ratios.is_empty() {
        return Err(Error::Metric("every row has a zero absolute median".into()));
    }
    let value = match aggregate {
        MmrAggregate::Mean => ratios.iter().sum::<f64>() / ratios.len() as f64,
        MmrAggregate::Max => ratios.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v)),
        MmrAggregate::Median => {
            ratios.sort_by(f64::total_cmp);
            let m = ratios.len();
            if m % 2 == 1 {
                ratios[m / 2]
            } else {
                0.5 * (ratios[m / 2 - 1] + ratios[m / 2])
            }
        }
    };
    Ok(Mmr {
        value,
        skipped_rows: skipped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigProp {
    pub mean_offdiag: f64,
    pub rms_offdiag: f64,
    pub feature_corr_rms: f64,
    pub trace_residual: f64,
}

/// Gram matrices of `x` (row-major `n×d`): `XXᵀ` and `XᵀX`.
pub fn grams(x: &[f64], n: usize, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut si = vec![0.0; n * n];
    let mut sf = vec![0.0; d * d];
    gemm(n, d, n, 1.0, x, false, x, true, 0.0, &mut si);
    gemm(d, n, d, 1.0, x, true, x, false, 0.0, &mut sf);
    (si, sf)
}

/// `Tr(S²)` for symmetric `S`, i.e. the sum of squared entries.
fn sq_sum(s: &[f64]) -> f64 {
    s.iter().map(|v| v * v).sum()
}

fn offdiag_sq_sum(s: &[f64], k: usize) -> f64 {
    sq_sum(s) - (0..k).map(|i| s[i * k + i].powi(2)).sum::<f64>()
}

/// Signal-propagation statistics after rescaling `x` to unit second moment.
pub fn sigprop<T: Scalar>(x: &Tensor<T>) -> Result<SigProp> {
    let (n, d) = require_matrix(x, "sigprop")?;
    let raw: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let m2 = raw.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64;
    if !(m2 > 0.0) {
        return Err(Error::Metric("sigprop of an all-zero activation matrix".into()));
    }
    let inv = 1.0 / m2.sqrt();
    let xs: Vec<f64> = raw.iter().map(|v| v * inv).collect();
    let (si, sf) = grams(&xs, n, d);
    let (mean_offdiag, rms_offdiag) = if n > 1 {
        let pairs = (n * (n - 1)) as f64;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    let v = si[a * n + b] / d as f64;
                    s += v;
                    s2 += v * v;
                }
            }
        }
        (s / pairs, (s2 / pairs).sqrt())
    } else {
        (0.0, 0.0)
    };
    let feature_corr_rms = if d > 1 {
        (offdiag_sq_sum(&sf, d) / (d * (d - 1)) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SigProp {
        mean_offdiag,
        rms_offdiag,
        feature_corr_rms,
        trace_residual: (sq_sum(&sf) - sq_sum(&si)).abs(),
    })
}

/// Terms of the kurtosis ledger `n²d·Kurt + Σ_{i≠j}(Σ_F)²_{ij} = Σ(Σ_I)²`
/// after normalising `x` to unit second moment: `(lhs, rhs)`.
pub fn kurtosis_ledger<T: Scalar>(x: &Tensor<T>) -> Result<(f64, f64)> {
    let (n, d) = require_matrix(x, "kurtosis_ledger")?;
    let raw: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let m2 = raw.iter().map(|v| v * v).sum::<f64>() / (n * d) as f64;
    if !(m2 > 0.0) {
        return Err(Error::Metric("ledger of an all-zero activation matrix".into()));
    }
    let inv = 1.0 / m2.sqrt();
    let xs: Vec<f64> = raw.iter().map(|v| v * inv).collect();
    let (si, sf) = grams(&xs, n, d);
    let k = kurtosis(&Tensor::new(vec![n, d], xs)?)?;
    let lhs = (n * n * d) as f64 * k + offdiag_sq_sum(&sf, d);
    Ok((lhs, sq_sum(&si)))
}

/// `−(1/T) Σ a ln a`, with `0·ln 0 = 0`.
pub fn attention_entropy<T: Scalar>(a: &Tensor<T>) -> Result<f64> {
    let (t, _) = require_matrix(a, "attention_entropy")?;
    let mut h = 0.0;
    for r in 0..t {
        let row = a.row(r);
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Metric(format!("attention row {r} sums to {sum}")));
        }
        for v in row {
            let v = v.as_f64();
            if v < 0.0 {
                return Err(Error::Metric(format!("negative attention weight in row {r}")));
            }
            if v > 0.0 {
                h -= v * v.ln();
            }
        }
    }
    Ok(h / t as f64)
}

/// Moment-update decomposition of `x → x + dx`.
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MomentUpdate {
    pub u21: f64,
    pub u22: f64,
    pub u41: f64,
    pub u42: f64,
    pub u43: f64,
    pub u44: f64,
    pub m2_delta: f64,
    pub m4_delta: f64,
}

impl MomentUpdate {
    pub fn add(&mut self, o: &MomentUpdate) {
        self.u21 += o.u21;
        self.u22 += o.u22;
        self.u41 += o.u41;
        self.u42 += o.u42;
        self.u43 += o.u43;
        self.u44 += o.u44;
        self.m2_delta += o.m2_delta;
        self.m4_delta += o.m4_delta;
    }
}

/// Second moment `m₂ = mean x²` and fourth moment `m₄ = mean_j s_j⁴`.
pub fn moments<T: Scalar>(x: &Tensor<T>) -> Result<(f64, f64)> {
    let (n, d) = require_matrix(x, "moments")?;
    let s = neuron_rms(x)?;
    let m2 = s.iter().map(|v| v * v).sum::<f64>() / d as f64;
    let m4 = s.iter().map(|v| v.powi(4)).sum::<f64>() / d as f64;
    let _ = n;
    Ok((m2, m4))
}

/// Split the change in `m₂` and `m₄` caused by `dx` by order in `dx`.
///
/// With column sums `a_j = Σ x²`, `b_j = Σ x·Δ`, `c_j = Σ Δ²`:
/// `u21 = 2Σb`, `u22 = Σc`, `u41 = Σ4ab`, `u42 = Σ(2ac + 4b²)`,
/// `u43 = Σ4bc`, `u44 = Σc²`.
pub fn moment_update_decomposition<T: Scalar>(x: &Tensor<T>, dx: &Tensor<T>) -> Result<MomentUpdate> {
    let (n, d) = require_matrix(x, "moment_update_decomposition")?;
    if dx.shape() != x.shape() {
        return Err(Error::Shape(format!("x {:?} vs dx {:?}", x.shape(), dx.shape())));
    }
    let (mut a, mut b, mut c) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for r in 0..n {
        for (j, (xv, dv)) in x.row(r).iter().zip(dx.row(r)).enumerate() {
            let (xv, dv) = (xv.as_f64(), dv.as_f64());
            a[j] += xv * xv;
            b[j] += xv * dv;
            c[j] += dv * dv;
        }
    }
    let mut u = MomentUpdate::default();
    for j in 0..d {
        u.u21 += 2.0 * b[j];
        u.u22 += c[j];
        u.u41 += 4.0 * a[j] * b[j];
        u.u42 += 2.0 * a[j] * c[j] + 4.0 * b[j] * b[j];
        u.u43 += 4.0 * b[j] * c[j];
        u.u44 += c[j] * c[j];
    }
    u.m2_delta = (u.u21 + u.u22) / (n * d) as f64;
    u.m4_delta = (u.u41 + u.u42 + u.u43 + u.u44) / (n * n * d) as f64;
    Ok(u)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianOracle {
    pub estimate: f64,
    pub stderr: f64,
    pub exact_finite_n: f64,
}

/// `E[(Σ_F)²_{11}] = (1+2ρ²) + (2(1−ρ)² + 4ρ(1−ρ))/n` for `Σ_F = XᵀX/n`.
pub fn gaussian_exact(rho: f64, n: usize) -> f64 {
    let n = n as f64;
    (1.0 + 2.0 * rho * rho) + (2.0 * (1.0 - rho).powi(2) + 4.0 * rho * (1.0 - rho)) / n
}

/// Monte Carlo estimate of the expected squared diagonal entry of the
/// feature Gram matrix for correlated Gaussian inputs.
pub fn gaussian_feature_oracle(rho: f64, n: usize, d: usize, trials: usize, rng: &mut Rng) -> Result<GaussianOracle> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Contract(format!("rho {rho} outside [0, 1)")));
    }
    if n < 2 || trials == 0 || d == 0 {
        return Err(Error::Contract("need n ≥ 2, d ≥ 1 and trials ≥ 1".into()));
    }
    let (a, b) = ((1.0 - rho).sqrt(), rho.sqrt());
    let mut per_trial = Vec::with_capacity(trials);
    let mut v = vec![0.0; d];
    let mut diag = vec![0.0; d];
    for _ in 0..trials {
        v.iter_mut().for_each(|x| *x = rng.normal());
        diag.iter_mut().for_each(|x| *x = 0.0);
        for _ in 0..n {
            for j in 0..d {
                let x = a * rng.normal() + b * v[j];
                diag[j] += x * x;
            }
        }
        let mean_sq = diag.iter().map(|s| (s / n as f64).powi(2)).sum::<f64>() / d as f64;
        per_trial.push(mean_sq);
    }
    let m = trials as f64;
    let estimate = per_trial.iter().sum::<f64>() / m;
    let var = if trials > 1 {
        per_trial.iter().map(|v| (v - estimate).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(GaussianOracle {
        estimate,
        stderr: (var / m).sqrt(),
        exact_finite_n: gaussian_exact(rho, n),
    })
}

/// One metric row per (step, layer, site).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub layer: usize,
    pub site: TapSite,
    pub kurtosis: f64,
    pub mmr: f64,
    pub activation_rms: f64,
    pub sigprop_mean_offdiag: f64,
    pub sigprop_rms_offdiag: f64,
    pub feature_corr_rms: f64,
    pub trace_identity_residual: f64,
    pub attention_entropy: Option<f64>,
    #[serde(default)]
    pub u21: Option<f64>,
    #[serde(default)]
    pub u22: Option<f64>,
    #[serde(default)]
    pub u41: Option<f64>,
    #[serde(default)]
    pub u42: Option<f64>,
    #[serde(default)]
    pub u43: Option<f64>,
    #[serde(default)]
    pub u44: Option<f64>,
}

pub const CSV_HEADER: &str = "step,layer,site,kurtosis,mmr,activation_rms,sigprop_mean_offdiag,sigprop_rms_offdiag,feature_corr_rms,trace_identity_residual,attention_entropy,u21,u22,u41,u42,u43,u44";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricRecord {
    /// Full record for one tap. Rows with a zero median are left out of MMR;
    /// an all-zero tap yields a `Metric` error.
    pub fn from_tap<T: Scalar>(step: u64, tap: &ActivationTap<T>) -> Result<Self> {
        let x = &tap.x;
        let sp = sigprop(x)?;
        let entropy = if tap.attention.is_empty() {
            None
        } else {
            let mut h = 0.0;
            for a in &tap.attention {
                h += attention_entropy(a)?;
            }
            Some(h / tap.attention.len() as f64)
        };
        let rms = (x.sum_sq().as_f64() / x.len() as f64).sqrt();
        Ok(Self {
            step,
            layer: tap.layer,
            site: tap.site,
            kurtosis: kurtosis(x)?,
            mmr: mmr(x, MmrAggregate::Mean)?.value,
            activation_rms: rms,
            sigprop_mean_offdiag: sp.mean_offdiag,
            sigprop_rms_offdiag: sp.rms_offdiag,
            feature_corr_rms: sp.feature_corr_rms,
            trace_identity_residual: sp.trace_residual,
            attention_entropy: entropy,
            u21: None,
            u22: None,
            u41: None,
            u42: None,
            u43: None,
            u44: None,
        })
    }

    pub fn with_update(mut self, u: &MomentUpdate) -> Self {
        self.u21 = Some(u.u21);
        self.u22 = Some(u.u22);
        self.u41 = Some(u.u41);
        self.u42 = Some(u.u42);
        self.u43 = Some(u.u43);
        self.u44 = Some(u.u44);
        self
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{},{},{},{},{},{},{}",
            self.step,
            self.layer,
            self.site.as_str(),
            self.kurtosis,
            self.mmr,
            self.activation_rms,
            self.sigprop_mean_offdiag,
            self.sigprop_rms_offdiag,
            self.feature_corr_rms,
            self.trace_identity_residual,
            opt(self.attention_entropy),
            opt(self.u21),
            opt(self.u22),
            opt(self.u41),
            opt(self.u42),
            opt(self.u43),
            opt(self.u44),
        )
    }

    /// Numeric fields paired with their names, for comparisons.
    pub fn fields(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("kurtosis", Some(self.kurtosis)),
            ("mmr", Some(self.mmr)),
            ("activation_rms", Some(self.activation_rms)),
            ("sigprop_mean_offdiag", Some(self.sigprop_mean_offdiag)),
            ("sigprop_rms_offdiag", Some(self.sigprop_rms_offdiag)),
            ("feature_corr_rms", Some(self.feature_corr_rms)),
            ("trace_identity_residual", Some(self.trace_identity_residual)),
            ("attention_entropy", self.attention_entropy),
            ("u21", self.u21),
            ("u22", self.u22),
            ("u41", self.u41),
            ("u42", self.u42),
            ("u43", self.u43),
            ("u44", self.u44),
        ]
    }
}

pub fn append_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
