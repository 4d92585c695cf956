//! Diagonal and rotated preconditioning optimizers, learning-rate schedules
//! and global-norm gradient clipping.
//!
//! Every rule is available as a free function on one parameter (`*_step`)
//! and through [`Optimizer`], which owns per-path state.

mod schedule;
mod state_io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, sym_eig, sym_eig_warm_positional, SymEig};
use crate::model::ParameterStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use schedule::{lr_at, ScheduleKind, ScheduleSpec};
pub use state_io::{load_state, save_state};

/// Axes longer than this are never rotated.
pub const MAX_ROTATED_DIM: usize = 1024;

fn d_09() -> f64 {
    0.9
}
fn d_095() -> f64 {
    0.95
}
fn d_0999() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.1
}
fn d_exp() -> f64 {
    -0.25
}
fn d_sweeps() -> usize {
    1
}
fn d_freq() -> u64 {
    10
}
fn d_max_dim() -> usize {
    MAX_ROTATED_DIM
}

/// Diagonal rule used inside SOAP's rotated space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RotatedDiag {
    #[default]
    Adam,
    /// AdaFactor in the eigenbasis (akin to Shampoo).
    Adafactor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgdm {
        #[serde(default = "d_09")]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adamw {
        #[serde(default = "d_09")]
        beta1: f64,
        #[serde(default = "d_0999")]
        beta2: f64,
        #[serde(default = "d_eps")]
        epsilon: f64,
        #[serde(default = "d_wd")]
        weight_decay: f64,
    },
    Adafactor {
        #[serde(default = "d_09")]
        beta1: f64,
        #[serde(default = "d_0999")]
        beta2: f64,
        #[serde(default = "d_eps")]
        epsilon: f64,
        #[serde(default = "d_wd")]
        weight_decay: f64,
    },
    Shampoo {
        #[serde(default = "d_09")]
        beta1: f64,
        /// Second-moment decay for the AdamW fallback on vectors.
        #[serde(default = "d_0999")]
        beta2: f64,
        #[serde(default = "d_095")]
        shampoo_beta: f64,
        /// Per-side power applied to `L + εI` and `R + εI`.
        #[serde(default = "d_exp")]
        exponent: f64,
        #[serde(default = "d_eps")]
        epsilon: f64,
        #[serde(default = "d_freq")]
        update_freq: u64,
        #[serde(default = "d_wd")]
        weight_decay: f64,
    },
    Soap {
        #[serde(default = "d_095")]
        beta1: f64,
        #[serde(default = "d_095")]
        beta2: f64,
        #[serde(default = "d_eps")]
        epsilon: f64,
        #[serde(default = "d_wd")]
        weight_decay: f64,
        #[serde(default = "d_095")]
        shampoo_beta: f64,
        #[serde(default = "d_freq")]
        precond_freq: u64,
        #[serde(default = "d_max_dim")]
        max_precond_dim: usize,
        #[serde(default)]
        diag: RotatedDiag,
        /// Keep identity eigenbases forever (reduces to the diagonal rule).
        #[serde(default)]
        freeze_identity: bool,
        /// Jacobi sweeps per warm-started refresh; 0 runs to convergence.
        /// The first refresh always converges.
        #[serde(default = "d_sweeps")]
        refresh_sweeps: usize,
    },
}

impl OptimizerConfig {
    pub fn adamw() -> Self {
        OptimizerConfig::Adamw {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.1,
        }
    }

    pub fn soap() -> Self {
        OptimizerConfig::Soap {
            beta1: 0.95,
            beta2: 0.95,
            epsilon: 1e-8,
            weight_decay: 0.1,
            shampoo_beta: 0.95,
            precond_freq: 10,
            max_precond_dim: MAX_ROTATED_DIM,
            diag: RotatedDiag::Adam,
            freeze_identity: false,
            refresh_sweeps: 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerConfig::Sgdm { .. } => "sgdm",
            OptimizerConfig::Adamw { .. } => "adamw",
            OptimizerConfig::Adafactor { .. } => "adafactor",
            OptimizerConfig::Shampoo { .. } => "shampoo",
            OptimizerConfig::Soap { .. } => "soap",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} outside [0, 1)")))
            }
        };
        let pos = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} must be positive")))
            }
        };
        match *self {
            OptimizerConfig::Sgdm { momentum, .. } => unit("momentum", momentum),
            OptimizerConfig::Adamw { beta1, beta2, epsilon, .. }
            | OptimizerConfig::Adafactor { beta1, beta2, epsilon, .. } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                pos("epsilon", epsilon)
            }
            OptimizerConfig::Shampoo {
                beta1,
                beta2,
                shampoo_beta,
                exponent,
                epsilon,
                update_freq,
                ..
            } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                unit("shampoo_beta", shampoo_beta)?;
                pos("epsilon", epsilon)?;
                if ![-1.0, -0.5, -0.25].contains(&exponent) {
                    return Err(Error::Config(format!("exponent {exponent} not one of -1, -1/2, -1/4")));
                }
                if update_freq == 0 {
                    return Err(Error::Config("update_freq must be at least 1".into()));
                }
                Ok(())
            }
            OptimizerConfig::Soap {
                beta1,
                beta2,
                epsilon,
                shampoo_beta,
                precond_freq,
                ..
            } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                unit("shampoo_beta", shampoo_beta)?;
                pos("epsilon", epsilon)?;
                if precond_freq == 0 {
                    return Err(Error::Config("precond_freq must be at least 1".into()));
                }
                Ok(())
            }
        }
    }
}

/// Moments and preconditioner state for one parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamState<T> {
    pub step: u64,
    pub m: Option<Tensor<T>>,
    pub v: Option<Tensor<T>>,
    /// AdaFactor row and column accumulators.
    pub row: Option<Tensor<T>>,
    pub col: Option<Tensor<T>>,
    /// Kronecker factors.
    pub l: Option<Tensor<T>>,
    pub r: Option<Tensor<T>>,
    /// Eigenbases of `l` and `r`.
    pub ql: Option<Tensor<T>>,
    pub qr: Option<Tensor<T>>,
    /// Cached matrix powers (Shampoo).
    pub pl: Option<Tensor<T>>,
    pub pr: Option<Tensor<T>>,
}

impl<T: Scalar> ParamState<T> {
    pub(crate) fn fields(&self) -> [(&'static str, &Option<Tensor<T>>); 10] {
        [
            ("m", &self.m),
            ("v", &self.v),
            ("row", &self.row),
            ("col", &self.col),
            ("l", &self.l),
            ("r", &self.r),
            ("ql", &self.ql),
            ("qr", &self.qr),
            ("pl", &self.pl),
            ("pr", &self.pr),
        ]
    }

    pub(crate) fn field_mut(&mut self, name: &str) -> Option<&mut Option<Tensor<T>>> {
        Some(match name {
            "m" => &mut self.m,
            "v" => &mut self.v,
            "row" => &mut self.row,
            "col" => &mut self.col,
            "l" => &mut self.l,
            "r" => &mut self.r,
            "ql" => &mut self.ql,
            "qr" => &mut self.qr,
            "pl" => &mut self.pl,
            "pr" => &mut self.pr,
            _ => return None,
        })
    }
}

fn check_shapes<T: Scalar>(w: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::Shape(format!("parameter {:?} vs gradient {:?}", w.shape(), g.shape())));
    }
    Ok(())
}

fn zeros_like<'a, T: Scalar>(slot: &'a mut Option<Tensor<T>>, shape: &[usize]) -> &'a mut Tensor<T> {
    if slot.as_ref().is_none_or(|t| t.shape() != shape) {
        *slot = Some(Tensor::zeros(shape));
    }
    slot.as_mut().unwrap()
}

fn decay<T: Scalar>(w: &mut Tensor<T>, lr: f64, weight_decay: f64) {
    if weight_decay != 0.0 {
        let k = T::of(1.0 - lr * weight_decay);
        w.data_mut().iter_mut().for_each(|v| *v *= k);
    }
}

/// Global L2 norm of several gradient slices.
pub fn global_norm<T: Scalar>(grads: &[&[T]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0, |a, v| a + v.as_f64() * v.as_f64())
        .sqrt()
}

/// Rescale all gradients so their global norm is at most `max_norm`; returns
/// the factor applied.
pub fn clip_global_norm<T: Scalar>(params: &mut ParameterStore<T>, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return Err(Error::Contract(format!("max_norm {max_norm} must be positive")));
    }
    let norm = params.grad_norm().as_f64();
    if norm > max_norm {
        let s = max_norm / norm;
        let st = T::of(s);
        for (_, _, g) in params.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= st);
        }
        Ok(s)
    } else {
        Ok(1.0)
    }
}

/// `M ← μM + g`, `W ← W − ηM` (with optional decoupled decay).
pub fn sgdm_step<T: Scalar>(
    state: &mut ParamState<T>,
    w: &mut Tensor<T>,
    g: &Tensor<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes(w, g)?;
    state.step += 1;
    decay(w, lr, weight_decay);
    let m = zeros_like(&mut state.m, w.shape());
    let (mu, eta) = (T::of(momentum), T::of(lr));
    for ((wv, mv), &gv) in w.data_mut().iter_mut().zip(m.data_mut()).zip(g.data()) {
        *mv = mu * *mv + gv;
        *wv -= eta * *mv;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHp {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamHp {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Corr<T> {
    b1: T,
    b2: T,
    c1: T,
    c2: T,
    eps: T,
    eta: T,
}

impl<T: Scalar> Corr<T> {
    fn new(hp: &AdamHp, lr: f64, t: u64) -> Self {
        let t = t as i32;
        Self {
            b1: T::of(hp.beta1),
            b2: T::of(hp.beta2),
            c1: T::of(1.0 - hp.beta1.powi(t)),
            c2: T::of(1.0 - hp.beta2.powi(t)),
            eps: T::of(hp.epsilon),
            eta: T::of(lr),
        }
    }

    #[inline]
    fn moment1(&self, m: T, g: T) -> T {
        self.b1 * m + (T::one() - self.b1) * g
    }

    #[inline]
    fn moment2(&self, v: T, g: T) -> T {
        self.b2 * v + (T::one() - self.b2) * g * g
    }

    /// `η·m̂/(√v̂ + ε)`.
    #[inline]
    fn update(&self, m: T, v: T) -> T {
        self.eta * (m / self.c1) / ((v / self.c2).sqrt() + self.eps)
    }
}

/// AdamW with bias correction and decoupled weight decay.
pub fn adamw_step<T: Scalar>(state: &mut ParamState<T>, w: &mut Tensor<T>, g: &Tensor<T>, lr: f64, hp: &AdamHp) -> Result<()> {
    check_shapes(w, g)?;
    state.step += 1;
    let c = Corr::new(hp, lr, state.step);
    decay(w, lr, hp.weight_decay);
    zeros_like(&mut state.m, w.shape());
    zeros_like(&mut state.v, w.shape());
    let m = state.m.as_mut().unwrap().data_mut();
    let v = state.v.as_mut().unwrap().data_mut();
    for (i, (wv, &gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
        m[i] = c.moment1(m[i], gv);
        v[i] = c.moment2(v[i], gv);
        *wv -= c.update(m[i], v[i]);
    }
    Ok(())
}

/// Factored second moment `V' = outer(row, col)/sum(row)`.
fn factored_v<T: Scalar>(row: &[T], col: &[T]) -> Vec<T> {
    let total = row.iter().fold(T::zero(), |a, &v| a + v);
    let mut out = vec![T::zero(); row.len() * col.len()];
    if total > T::zero() {
        for (i, &r) in row.iter().enumerate() {
            for (j, &c) in col.iter().enumerate() {
                out[i * col.len() + j] = r * c / total;
            }
        }
    }
    out
}

/// Update `row`/`col` accumulators with `g²` (an `a×b` matrix) and return
/// the factored estimate.
fn factored_update<T: Scalar>(row: &mut [T], col: &mut [T], g: &[T], b2: T) -> Vec<T> {
    let (a, b) = (row.len(), col.len());
    let one_m = T::one() - b2;
    let mut rs = vec![T::zero(); a];
    let mut cs = vec![T::zero(); b];
    for i in 0..a {
        for j in 0..b {
            let s = g[i * b + j] * g[i * b + j];
            rs[i] += s;
            cs[j] += s;
        }
    }
    row.iter_mut().zip(&rs).for_each(|(r, &s)| *r = b2 * *r + one_m * s);
    col.iter_mut().zip(&cs).for_each(|(c, &s)| *c = b2 * *c + one_m * s);
    factored_v(row, col)
}

/// AdaFactor (rank-1 second moment, AdamW-style first moment, no
/// parameter-norm scaling). Rank-1 parameters use the diagonal rule.
pub fn adafactor_step<T: Scalar>(
    state: &mut ParamState<T>,
    w: &mut Tensor<T>,
    g: &Tensor<T>,
    lr: f64,
    hp: &AdamHp,
) -> Result<()> {
    check_shapes(w, g)?;
    if w.rank() != 2 {
        return adamw_step(state, w, g, lr, hp);
    }
    state.step += 1;
    let c = Corr::new(hp, lr, state.step);
    decay(w, lr, hp.weight_decay);
    let (a, b) = (w.rows(), w.cols());
    zeros_like(&mut state.m, w.shape());
    zeros_like(&mut state.row, &[a]);
    zeros_like(&mut state.col, &[b]);
    let vf = factored_update(
        state.row.as_mut().unwrap().data_mut(),
        state.col.as_mut().unwrap().data_mut(),
        g.data(),
        c.b2,
    );
    let m = state.m.as_mut().unwrap().data_mut();
    for (i, (wv, &gv)) in w.data_mut().iter_mut().zip(g.data()).enumerate() {
        m[i] = c.moment1(m[i], gv);
        *wv -= c.update(m[i], vf[i]);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShampooHp {
    pub beta1: f64,
    pub shampoo_beta: f64,
    pub exponent: f64,
    pub epsilon: f64,
    pub update_freq: u64,
    pub weight_decay: f64,
}

fn ema_gram<T: Scalar>(acc: &mut Tensor<T>, g: &[T], rows: usize, cols: usize, left: bool, beta: T) {
    let k = if left { rows } else { cols };
    let mut gg = vec![T::zero(); k * k];
    if left {
        gemm(rows, cols, rows, T::one(), g, false, g, true, T::zero(), &mut gg);
    } else {
        gemm(cols, rows, cols, T::one(), g, true, g, false, T::zero(), &mut gg);
    }
    let one_m = T::one() - beta;
    for (a, &v) in acc.data_mut().iter_mut().zip(&gg) {
        *a = beta * *a + one_m * v;
    }
}

fn checked_eig<T: Scalar>(a: &Tensor<T>, path: &str, warm: Option<&Tensor<T>>, max_sweeps: usize) -> Result<SymEig<T>> {
    let e = match warm {
        Some(q) => sym_eig_warm_positional(a, q, max_sweeps),
        None => sym_eig(a),
    }
    .map_err(|e| Error::Eigen {
        path: path.to_string(),
        reason: e.to_string(),
    })?;
    if e.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen {
            path: path.to_string(),
            reason: "non-finite eigenvalue".into(),
        });
    }
    let scale = e.values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    let min = e.values.iter().copied().fold(T::infinity(), T::min);
    if min < -T::of(1e-10) * scale.max(T::one()) {
        return Err(Error::NotPsd {
            path: path.to_string(),
            min_eig: min.as_f64(),
        });
    }
    Ok(e)
}

fn power<T: Scalar>(e: &SymEig<T>, exponent: f64, eps: f64) -> Tensor<T> {
    crate::linalg::spectral_apply(e, |l| T::of((l.as_f64().max(0.0) + eps).powf(exponent)))
}

fn matmul3<T: Scalar>(a: &[T], ta: bool, b: &[T], c: &[T], tc: bool, m: usize, n: usize) -> Vec<T> {
    // a: m×m (or its transpose), b: m×n, c: n×n (or transpose)
    let mut tmp = vec![T::zero(); m * n];
    gemm(m, m, n, T::one(), a, ta, b, false, T::zero(), &mut tmp);
    let mut out = vec![T::zero(); m * n];
    gemm(m, n, n, T::one(), &tmp, false, c, tc, T::zero(), &mut out);
    out
}

/// Shampoo: `W ← W − η (L̂+εI)^p M̂ (R̂+εI)^p` with EMA factors `L`, `R`,
/// bias-corrected, and powers refreshed every `update_freq` steps.
pub fn shampoo_step<T: Scalar>(
    state: &mut ParamState<T>,
    w: &mut Tensor<T>,
    g: &Tensor<T>,
    lr: f64,
    hp: &ShampooHp,
    path: &str,
) -> Result<()> {
    check_shapes(w, g)?;
    if w.rank() != 2 {
        return Err(Error::Contract(format!("shampoo needs a matrix parameter at `{path}`")));
    }
    state.step += 1;
    let t = state.step;
    let (a, b) = (w.rows(), w.cols());
    let beta = T::of(hp.shampoo_beta);
    decay(w, lr, hp.weight_decay);
    ema_gram(zeros_like(&mut state.l, &[a, a]), g.data(), a, b, true, beta);
    ema_gram(zeros_like(&mut state.r, &[b, b]), g.data(), a, b, false, beta);
    let b1 = T::of(hp.beta1);
    let m = zeros_like(&mut state.m, w.shape());
    for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
        *mv = b1 * *mv + (T::one() - b1) * gv;
    }
    if state.pl.is_none() || (t - 1) % hp.update_freq == 0 {
        let corr = T::one() / T::of(1.0 - hp.shampoo_beta.powi(t as i32));
        let side = |acc: &Tensor<T>, k: usize| -> Result<Tensor<T>> {
            if k > MAX_ROTATED_DIM {
                return Ok(Tensor::identity(k));
            }
            let e = checked_eig(&acc.scale(corr), path, None, 0)?;
            Ok(power(&e, hp.exponent, hp.epsilon))
        };
        state.pl = Some(side(state.l.as_ref().unwrap(), a)?);
        state.pr = Some(side(state.r.as_ref().unwrap(), b)?);
    }
    let c1 = T::of(1.0 - hp.beta1.powi(t as i32));
    let mhat: Vec<T> = state.m.as_ref().unwrap().data().iter().map(|&v| v / c1).collect();
    let upd = matmul3(
        state.pl.as_ref().unwrap().data(),
        false,
        &mhat,
        state.pr.as_ref().unwrap().data(),
        false,
        a,
        b,
    );
    let eta = T::of(lr);
    for (wv, u) in w.data_mut().iter_mut().zip(upd) {
        *wv -= eta * u;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoapHp {
    pub adam: AdamHp,
    pub shampoo_beta: f64,
    pub precond_freq: u64,
    pub max_precond_dim: usize,
    pub diag: RotatedDiag,
    pub freeze_identity: bool,
    pub refresh_sweeps: usize,
}

/// SOAP: the diagonal rule (Adam by default) run in the eigenbasis of
/// Shampoo's factors. `M` lives in the original space and is projected each
/// step; `V` lives in the rotated space. Eigenbases are refreshed on steps
/// 1, 1 + f, 1 + 2f, … with warm-started Jacobi, tracking the basis a few
/// sweeps at a time.
pub fn soap_step<T: Scalar>(
    state: &mut ParamState<T>,
    w: &mut Tensor<T>,
    g: &Tensor<T>,
    lr: f64,
    hp: &SoapHp,
    path: &str,
) -> Result<()> {
    check_shapes(w, g)?;
    if w.rank() != 2 {
        return adamw_step(state, w, g, lr, &hp.adam);
    }
    state.step += 1;
    let t = state.step;
    let (a, b) = (w.rows(), w.cols());
    let rot_l = !hp.freeze_identity && a <= hp.max_precond_dim;
    let rot_r = !hp.freeze_identity && b <= hp.max_precond_dim;
    let beta = T::of(hp.shampoo_beta);
    if rot_l {
        ema_gram(zeros_like(&mut state.l, &[a, a]), g.data(), a, b, true, beta);
    }
    if rot_r {
        ema_gram(zeros_like(&mut state.r, &[b, b]), g.data(), a, b, false, beta);
    }
    if (t - 1) % hp.precond_freq == 0 || state.ql.is_none() || state.qr.is_none() {
        let refresh = |acc: Option<&Tensor<T>>, prev: Option<&Tensor<T>>, k: usize, on: bool| -> Result<Tensor<T>> {
            match (on, acc) {
                (true, Some(acc)) => Ok(checked_eig(acc, path, prev.filter(|q| q.shape() == [k, k]), hp.refresh_sweeps)?.vectors),
                _ => Ok(Tensor::identity(k)),
            }
        };
        state.ql = Some(refresh(state.l.as_ref(), state.ql.as_ref(), a, rot_l)?);
        state.qr = Some(refresh(state.r.as_ref(), state.qr.as_ref(), b, rot_r)?);
    }
    let c = Corr::new(&hp.adam, lr, t);
    decay(w, lr, hp.adam.weight_decay);
    let ql = state.ql.as_ref().unwrap().data();
    let qr = state.qr.as_ref().unwrap().data();
    let m = zeros_like(&mut state.m, w.shape());
    for (mv, &gv) in m.data_mut().iter_mut().zip(g.data()) {
        *mv = c.moment1(*mv, gv);
    }
    let g_rot = matmul3(ql, true, g.data(), qr, false, a, b);
    let m_rot = matmul3(ql, true, state.m.as_ref().unwrap().data(), qr, false, a, b);
    let mut u_rot = vec![T::zero(); a * b];
    match hp.diag {
        RotatedDiag::Adam => {
            let v = zeros_like(&mut state.v, w.shape()).data_mut();
            for i in 0..a * b {
                v[i] = c.moment2(v[i], g_rot[i]);
                u_rot[i] = c.update(m_rot[i], v[i]);
            }
        }
        RotatedDiag::Adafactor => {
            zeros_like(&mut state.row, &[a]);
            zeros_like(&mut state.col, &[b]);
            let vf = factored_update(
                state.row.as_mut().unwrap().data_mut(),
                state.col.as_mut().unwrap().data_mut(),
                &g_rot,
                c.b2,
            );
            for i in 0..a * b {
                u_rot[i] = c.update(m_rot[i], vf[i]);
            }
        }
    }
    let upd = matmul3(ql, false, &u_rot, qr, true, a, b);
    for (wv, u) in w.data_mut().iter_mut().zip(upd) {
        *wv -= u;
    }
    Ok(())
}

/// Per-parameter optimizer state keyed by parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub states: BTreeMap<String, ParamState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            states: BTreeMap::new(),
        })
    }

    /// One update of every parameter from its stored gradient. Weight decay
    /// applies to matrices only.
    pub fn step(&mut self, params: &mut ParameterStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let cfg = self.config.clone();
        for (path, w, g) in params.iter_mut() {
            let st = self.states.entry(path.to_string()).or_default();
            let matrix = w.rank() == 2;
            let wd_of = |wd: f64| if matrix { wd } else { 0.0 };
            match cfg {
                OptimizerConfig::Sgdm { momentum, weight_decay } => {
                    sgdm_step(st, w, g, lr, momentum, wd_of(weight_decay))?
                }
                OptimizerConfig::Adamw {
                    beta1,
                    beta2,
                    epsilon,
                    weight_decay,
                } => {
                    let hp = AdamHp {
                        beta1,
                        beta2,
                        epsilon,
                        weight_decay: wd_of(weight_decay),
                    };
                    adamw_step(st, w, g, lr, &hp)?
                }
                OptimizerConfig::Adafactor {
                    beta1,
                    beta2,
                    epsilon,
                    weight_decay,
                } => {
                    let hp = AdamHp {
                        beta1,
                        beta2,
                        epsilon,
                        weight_decay: wd_of(weight_decay),
                    };
                    adafactor_step(st, w, g, lr, &hp)?
                }
                OptimizerConfig::Shampoo {
                    beta1,
                    beta2,
                    shampoo_beta,
                    exponent,
                    epsilon,
                    update_freq,
                    weight_decay,
                } => {
                    if matrix {
                        let hp = ShampooHp {
                            beta1,
                            shampoo_beta,
                            exponent,
                            epsilon,
                            update_freq,
                            weight_decay,
                        };
                        shampoo_step(st, w, g, lr, &hp, path)?
                    } else {
                        let hp = AdamHp {
                            beta1,
                            beta2,
                            epsilon,
                            weight_decay: 0.0,
                        };
                        adamw_step(st, w, g, lr, &hp)?
                    }
                }
                OptimizerConfig::Soap {
                    beta1,
                    beta2,
                    epsilon,
                    weight_decay,
                    shampoo_beta,
                    precond_freq,
                    max_precond_dim,
                    diag,
                    freeze_identity,
                    refresh_sweeps,
                } => {
                    let hp = SoapHp {
                        adam: AdamHp {
                            beta1,
                            beta2,
                            epsilon,
                            weight_decay: wd_of(weight_decay),
                        },
                        shampoo_beta,
                        precond_freq,
                        max_precond_dim,
                        diag,
                        freeze_identity,
                        refresh_sweeps,
                    };
                    soap_step(st, w, g, lr, &hp, path)?
                }
            }
        }
        Ok(())
    }
}
