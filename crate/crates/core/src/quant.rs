//! Per-tensor fake quantization of linear weights and linear-layer inputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::sample_windows;
use crate::metrics::kurtosis;
use crate::model::{Batch, LinearInputHook, Model, ParameterStore, TapSite};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest scale handed out for degenerate ranges.
pub const SCALE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    SymmetricWeight,
    AsymmetricActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub mode: QuantMode,
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
    pub q_min: i64,
    pub q_max: i64,
}

fn check_bits(bits: u32) -> Result<()> {
    if (2..=31).contains(&bits) {
        Ok(())
    } else {
        Err(Error::Config(format!("bits {bits} outside 2..=31")))
    }
}

impl QuantizerSpec {
    pub fn symmetric(bits: u32, scale: f64) -> Result<Self> {
        check_bits(bits)?;
        let q_max = (1i64 << (bits - 1)) - 1;
        let spec = Self {
            mode: QuantMode::SymmetricWeight,
            bits,
            scale,
            zero_point: 0,
            q_min: -q_max,
            q_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Asymmetric quantizer over `[min, max]`; the range is widened to
    /// contain zero so that zero stays exactly representable.
    pub fn asymmetric_from_range(bits: u32, min: f64, max: f64) -> Result<Self> {
        check_bits(bits)?;
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::Contract(format!("invalid activation range [{min}, {max}]")));
        }
        let (lo, hi) = (min.min(0.0), max.max(0.0));
        let q_max = (1i64 << bits) - 1;
        let mut scale = (hi - lo) / q_max as f64;
        if scale <= SCALE_FLOOR || !scale.is_normal() {
            scale = SCALE_FLOOR;
        }
        let zero_point = ((-lo / scale).round_ties_even() as i64).clamp(0, q_max);
        let spec = Self {
            mode: QuantMode::AsymmetricActivation,
            bits,
            scale,
            zero_point,
            q_min: 0,
            q_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Contract(format!("scale {} must be positive", self.scale)));
        }
        let ok = match self.mode {
            QuantMode::SymmetricWeight => self.zero_point == 0 && self.q_min == -self.q_max && self.q_max == (1i64 << (self.bits - 1)) - 1,
            QuantMode::AsymmetricActivation => {
                self.q_min == 0 && self.q_max == (1i64 << self.bits) - 1 && (0..=self.q_max).contains(&self.zero_point)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("inconsistent quantizer {self:?}")))
        }
    }

    pub fn quantize(&self, x: f64) -> i64 {
        let q = (x / self.scale).round_ties_even();
        // Saturate before the integer cast so huge inputs clamp cleanly.
        let q = q.clamp((self.q_min - self.zero_point) as f64, (self.q_max - self.zero_point) as f64);
        q as i64 + self.zero_point
    }

    pub fn dequantize(&self, q: i64) -> f64 {
        (q - self.zero_point) as f64 * self.scale
    }

    pub fn fake_quant_scalar(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }

    pub fn fake_quant_slice<T: Scalar>(&self, x: &mut [T]) {
        for v in x {
            *v = T::of(self.fake_quant_scalar(v.as_f64()));
        }
    }
}

/// `scale = max|w| / q_max`, zero point 0.
pub fn fit_weight_quantizer<T: Scalar>(w: &Tensor<T>, bits: u32) -> Result<QuantizerSpec> {
    if w.is_empty() {
        return Err(Error::Contract("weight tensor is empty".into()));
    }
    check_bits(bits)?;
    let q_max = ((1i64 << (bits - 1)) - 1) as f64;
    let m = w.max_abs().as_f64();
    let scale = if m > 0.0 { (m / q_max).max(SCALE_FLOOR) } else { SCALE_FLOOR };
    QuantizerSpec::symmetric(bits, scale)
}

/// Running extrema over calibration batches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeObserver {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for RangeObserver {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            count: 0,
        }
    }
}

impl RangeObserver {
    pub fn observe<T: Scalar>(&mut self, x: &[T]) {
        for v in x {
            let v = v.as_f64();
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.count += x.len();
    }

    pub fn fit(&self, bits: u32) -> Result<QuantizerSpec> {
        if self.count == 0 {
            return Err(Error::Contract("no calibration values observed".into()));
        }
        QuantizerSpec::asymmetric_from_range(bits, self.min, self.max)
    }
}

/// Asymmetric quantizer from the running min/max over `batches`.
pub fn fit_activation_quantizer<T: Scalar>(batches: &[Tensor<T>], bits: u32) -> Result<QuantizerSpec> {
    let mut obs = RangeObserver::default();
    for b in batches {
        obs.observe(b.data());
    }
    obs.fit(bits)
}

pub fn fake_quant<T: Scalar>(x: &Tensor<T>, spec: &QuantizerSpec) -> Tensor<T> {
    x.map(|v| T::of(spec.fake_quant_scalar(v.as_f64())))
}

/// Whether `path` names a weight that is fake-quantized. Embeddings, the
/// unembedding, norms and residual scalars stay in full precision.
pub fn is_quantized_weight(path: &str) -> bool {
    path.starts_with("block.")
        && [".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo", ".mlp.w_in", ".mlp.w_out"]
            .iter()
            .any(|s| path.ends_with(s))
}

/// Hook keys of the linear inputs feeding quantized weights.
pub fn activation_keys(model: &Model) -> Vec<String> {
    let c = model.config();
    let mut keys = Vec::new();
    for i in 0..c.depth {
        if !c.mlp_only {
            keys.push(format!("block.{i}.attn.qkv"));
            keys.push(format!("block.{i}.attn.wo"));
        }
        keys.push(format!("block.{i}.mlp.w_in"));
        keys.push(format!("block.{i}.mlp.w_out"));
    }
    keys
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    pub batches: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Seed of the stream that picks calibration windows.
    pub seed: u64,
}

impl CalibrationPlan {
    pub fn new(batches: usize, batch_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let plan = Self {
            batches,
            batch_size,
            seq_len,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batches == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config(format!("calibration plan needs positive sizes, got {self:?}")));
        }
        Ok(())
    }

    /// Random windows of `tokens` (inputs and shifted targets).
    pub fn sample(&self, tokens: &[usize]) -> Result<Vec<Batch>> {
        self.validate()?;
        sample_windows(tokens, self.batches, self.batch_size, self.seq_len, &mut Rng::new(self.seed, 0x9ca1))
    }
}

/// Weight and activation quantizers keyed by parameter path / hook key.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSet {
    pub weights: BTreeMap<String, QuantizerSpec>,
    pub activations: BTreeMap<String, QuantizerSpec>,
}

struct Observe<'a>(&'a mut BTreeMap<String, RangeObserver>);

impl<T: Scalar> LinearInputHook<T> for Observe<'_> {
    fn on_input(&mut self, key: &str, x: &mut [T]) {
        self.0.entry(key.to_string()).or_default().observe(x);
    }
}

struct Apply<'a> {
    specs: &'a BTreeMap<String, QuantizerSpec>,
    missing: Option<String>,
}

impl<T: Scalar> LinearInputHook<T> for Apply<'_> {
    fn on_input(&mut self, key: &str, x: &mut [T]) {
        match self.specs.get(key) {
            Some(s) => s.fake_quant_slice(x),
            None => {
                self.missing.get_or_insert_with(|| key.to_string());
            }
        }
    }
}

/// Fit weight quantizers from `params` and activation quantizers from the
/// full-precision forward passes over `calibration`.
pub fn calibrate<T: Scalar>(
    model: &Model,
    params: &ParameterStore<T>,
    calibration: &[Batch],
    bits: u32,
) -> Result<QuantizerSet> {
    if calibration.is_empty() {
        return Err(Error::Contract("calibration needs at least one batch".into()));
    }
    let mut set = QuantizerSet::default();
    for (path, w) in params.values() {
        if is_quantized_weight(path) {
            set.weights.insert(path.clone(), fit_weight_quantizer(w, bits)?);
        }
    }
    let mut obs = BTreeMap::new();
    for b in calibration {
        model.forward_with_hook(params, &b.tokens, b.batch, b.seq, &mut Observe(&mut obs))?;
    }
    for (key, o) in obs {
        set.activations.insert(key, o.fit(bits)?);
    }
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantEval {
    pub loss_fp: f64,
    pub loss_w8a8: f64,
    pub quantization_error: f64,
    /// Kurtosis at each residual-stream site (attn-input per layer, then
    /// unembed-input), on the full-precision model.
    pub layer_kurtosis: Vec<f64>,
    pub mean_kurtosis: f64,
}

/// Copy of `params` with every quantized weight replaced by its fake quantization.
pub fn quantize_weights<T: Scalar>(params: &ParameterStore<T>, set: &QuantizerSet) -> Result<ParameterStore<T>> {
    let mut q = params.clone();
    for (path, w) in params.values() {
        if is_quantized_weight(path) {
            let spec = set.weights.get(path).ok_or_else(|| Error::MissingQuantizer(path.clone()))?;
            *q.get_mut(path)? = fake_quant(w, spec);
        }
    }
    Ok(q)
}

/// Mean loss over `eval` with full-precision and fake-quantized weights and
/// linear inputs, plus residual-stream kurtosis.
pub fn quantized_eval<T: Scalar>(
    model: &Model,
    params: &ParameterStore<T>,
    set: &QuantizerSet,
    eval: &[Batch],
) -> Result<QuantEval> {
    if eval.is_empty() {
        return Err(Error::Contract("evaluation needs at least one batch".into()));
    }
    for key in activation_keys(model) {
        if !set.activations.contains_key(&key) {
            return Err(Error::MissingQuantizer(key));
        }
    }
    let qparams = quantize_weights(params, set)?;
    let (mut fp, mut q) = (0.0, 0.0);
    let mut sums: Vec<f64> = Vec::new();
    for b in eval {
        let out = model.forward(params, &b.tokens, b.batch, b.seq)?;
        let ks: Vec<f64> = out
            .taps
            .iter()
            .filter(|t| matches!(t.site, TapSite::AttnInput | TapSite::UnembedInput))
            .map(|t| kurtosis(&t.x))
            .collect::<Result<_>>()?;
        if sums.is_empty() {
            sums = vec![0.0; ks.len()];
        }
        for (s, k) in sums.iter_mut().zip(ks) {
            *s += k;
        }
        fp += model.loss(params, b)?;
        let mut hook = Apply {
            specs: &set.activations,
            missing: None,
        };
        q += model.loss_with_hook(&qparams, b, &mut hook)?;
        if let Some(key) = hook.missing {
            return Err(Error::MissingQuantizer(key));
        }
    }
    let n = eval.len() as f64;
    let layer_kurtosis: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let mean_kurtosis = layer_kurtosis.iter().sum::<f64>() / layer_kurtosis.len().max(1) as f64;
    let (loss_fp, loss_w8a8) = (fp / n, q / n);
    Ok(QuantEval {
        loss_fp,
        loss_w8a8,
        quantization_error: loss_w8a8 - loss_fp,
        layer_kurtosis,
        mean_kurtosis,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub path: String,
    pub mode: QuantMode,
    pub scale: f64,
    pub zero_point: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub bits: u32,
    pub loss_fp: f64,
    pub loss_w8a8: f64,
    pub quantization_error: f64,
    pub mean_kurtosis: f64,
    /// Standard deviation of `loss_w8a8` over calibration seeds.
    pub loss_w8a8_std: f64,
    pub quantization_error_std: f64,
    pub calibration_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    /// Quantizers from the first calibration seed.
    pub tensors: Vec<TensorEntry>,
    pub per_seed: Vec<QuantEval>,
    pub summary: QuantSummary,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Calibrate once per seed in `seeds` (windows drawn from `calib_tokens`)
/// and evaluate on the fixed `eval` batches.
pub fn quantize_report<T: Scalar>(
    model: &Model,
    params: &ParameterStore<T>,
    calib_tokens: &[usize],
    plan: &CalibrationPlan,
    seeds: &[u64],
    eval: &[Batch],
    bits: u32,
) -> Result<QuantReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one calibration seed is required".into()));
    }
    let mut per_seed = Vec::new();
    let mut tensors = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        let p = CalibrationPlan { seed, ..plan.clone() };
        let set = calibrate(model, params, &p.sample(calib_tokens)?, bits)?;
        if k == 0 {
            let entry = |(path, s): (&String, &QuantizerSpec)| TensorEntry {
                path: path.clone(),
                mode: s.mode,
                scale: s.scale,
                zero_point: s.zero_point,
            };
            tensors.extend(set.weights.iter().map(entry));
            tensors.extend(set.activations.iter().map(entry));
        }
        per_seed.push(quantized_eval(model, params, &set, eval)?);
    }
    let (loss_w8a8, loss_w8a8_std) = mean_std(&per_seed.iter().map(|e| e.loss_w8a8).collect::<Vec<_>>());
    let (quantization_error, quantization_error_std) =
        mean_std(&per_seed.iter().map(|e| e.quantization_error).collect::<Vec<_>>());
    let summary = QuantSummary {
        bits,
        loss_fp: per_seed[0].loss_fp,
        loss_w8a8,
        quantization_error,
        mean_kurtosis: per_seed[0].mean_kurtosis,
        loss_w8a8_std,
        quantization_error_std,
        calibration_seeds: seeds.to_vec(),
    };
    Ok(QuantReport {
        tensors,
        per_seed,
        summary,
    })
}
