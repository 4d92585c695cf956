//! Causal multi-head self-attention with optional entropy regulation
//! (QK-Norm, tanh soft-capping, clamping) and Value-SkipInit shaping.

use crate::linalg::{gemm_view, View};
use crate::model::config::{AttentionShaping, EntropyReg, NormKind};
use crate::model::norm::{norm_backward, norm_forward, NormCache};
use crate::model::ops::{linear, linear_grad_w, linear_grad_x};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnShape {
    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

pub struct AttnParams<'a, T> {
    pub wq: &'a [T],
    pub wk: &'a [T],
    pub wv: &'a [T],
    pub q_gain: Option<&'a [T]>,
    pub q_bias: Option<&'a [T]>,
    pub k_gain: Option<&'a [T]>,
    pub k_bias: Option<&'a [T]>,
}

#[derive(Debug, Default)]
pub struct AttnGrads<T> {
    pub wq: Vec<T>,
    pub wk: Vec<T>,
    pub wv: Vec<T>,
    pub q_gain: Vec<T>,
    pub q_bias: Vec<T>,
    pub k_gain: Vec<T>,
    pub k_bias: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Normalised queries/keys under QK-Norm.
    qk_normed: Option<(Vec<T>, Vec<T>, NormCache<T>, NormCache<T>)>,
    /// Capped (or clamped) logits before masking, `[B, H, T, T]`.
    logits: Vec<T>,
    /// Post-softmax probabilities before shaping, `[B, H, T, T]`.
    pub probs: Vec<T>,
}

fn qk_norm_kind(reg: EntropyReg) -> Option<(NormKind, bool)> {
    match reg {
        EntropyReg::QkNorm { norm, trainable } => Some((norm, trainable)),
        _ => None,
    }
}

fn cap_logit<T: Scalar>(reg: EntropyReg, raw: T) -> T {
    match reg {
        EntropyReg::TanhCap { max_attn_val } => {
            let c = T::of(max_attn_val);
            c * (raw / c).tanh()
        }
        EntropyReg::Clamp { cap } => {
            let c = T::of(cap);
            raw.max(-c).min(c)
        }
        _ => raw,
    }
}

/// Derivative of the cap, expressed through its output. A clamped logit sits
/// exactly on `±cap`, an unclamped one strictly inside.
fn cap_grad<T: Scalar>(reg: EntropyReg, capped: T) -> T {
    match reg {
        EntropyReg::TanhCap { max_attn_val } => {
            let r = capped / T::of(max_attn_val);
            T::one() - r * r
        }
        EntropyReg::Clamp { cap } => {
            if capped.abs() < T::of(cap) {
                T::one()
            } else {
                T::zero()
            }
        }
        _ => T::one(),
    }
}

/// Returns the concatenated head outputs (before the output projection).
pub fn attention_forward<T: Scalar>(
    x: &[T],
    p: &AttnParams<'_, T>,
    s: AttnShape,
    reg: EntropyReg,
    shaping: Option<AttentionShaping>,
) -> (Vec<T>, AttnCache<T>) {
    let (n, d, h, t) = (s.rows(), s.width, s.heads, s.seq);
    let dk = s.head_dim();
    let q = linear(x, p.wq, n, d, d);
    let k = linear(x, p.wk, n, d, d);
    let v = linear(x, p.wv, n, d, d);
    let qk_normed = qk_norm_kind(reg).map(|(kind, _)| {
        let (qn, qc) = norm_forward(&q, dk, kind, p.q_gain, p.q_bias);
        let (kn, kc) = norm_forward(&k, dk, kind, p.k_gain, p.k_bias);
        (qn, kn, qc, kc)
    });
    let (qs, ks): (&[T], &[T]) = match &qk_normed {
        Some((qn, kn, _, _)) => (qn, kn),
        None => (&q, &k),
    };
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let tt = t * t;
    let mut logits = vec![T::zero(); s.batch * h * tt];
    let mut probs = vec![T::zero(); s.batch * h * tt];
    let mut o = vec![T::zero(); n * d];
    let (alpha, beta) = shaping.map_or((T::zero(), T::one()), |sh| (T::of(sh.alpha), T::of(sh.beta)));
    for b in 0..s.batch {
        for hh in 0..h {
            let base = (b * h + hh) * tt;
            let off = b * t * d + hh * dk;
            gemm_view(
                scale,
                View::new(qs, off, t, dk, d),
                false,
                View::new(ks, off, t, dk, d),
                true,
                T::zero(),
                &mut logits,
                base,
                t,
            );
            for i in 0..t {
                let row = &mut logits[base + i * t..base + (i + 1) * t];
                for val in row.iter_mut().take(i + 1) {
                    *val = cap_logit(reg, *val);
                }
                let prow = &mut probs[base + i * t..base + (i + 1) * t];
                let max = row[..=i]
                    .iter()
                    .copied()
                    .fold(T::neg_infinity(), |a, v| if v > a { v } else { a });
                let mut total = T::zero();
                for j in 0..=i {
                    let e = (row[j] - max).exp();
                    prow[j] = e;
                    total += e;
                }
                let inv = T::one() / total;
                for pv in prow.iter_mut().take(i + 1) {
                    *pv *= inv;
                }
            }
            gemm_view(
                beta,
                View::new(&probs, base, t, t, t),
                false,
                View::new(&v, off, t, dk, d),
                false,
                T::zero(),
                &mut o,
                off,
                d,
            );
            if alpha != T::zero() {
                for i in 0..t {
                    for c in 0..dk {
                        let idx = off + i * d + c;
                        o[idx] += alpha * v[idx];
                    }
                }
            }
        }
    }
    (
        o.clone(),
        AttnCache {
            q,
            k,
            v,
            qk_normed,
            logits,
            probs,
        },
    )
}

/// Reverse pass from the gradient of the concatenated head outputs `d_o`;
/// returns `dx` and parameter gradients.
pub fn attention_backward<T: Scalar>(
    x: &[T],
    d_o: &[T],
    p: &AttnParams<'_, T>,
    cache: &AttnCache<T>,
    s: AttnShape,
    reg: EntropyReg,
    shaping: Option<AttentionShaping>,
) -> (Vec<T>, AttnGrads<T>) {
    let (n, d, h, t) = (s.rows(), s.width, s.heads, s.seq);
    let dk = s.head_dim();
    let tt = t * t;
    debug_assert_eq!(d_o.len(), n * d);
    let mut g = AttnGrads {
        wq: vec![T::zero(); d * d],
        wk: vec![T::zero(); d * d],
        wv: vec![T::zero(); d * d],
        ..Default::default()
    };

    let (qs, ks): (&[T], &[T]) = match &cache.qk_normed {
        Some((qn, kn, _, _)) => (qn, kn),
        None => (&cache.q, &cache.k),
    };
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let (alpha, beta) = shaping.map_or((T::zero(), T::one()), |sh| (T::of(sh.alpha), T::of(sh.beta)));
    let mut dqs = vec![T::zero(); n * d];
    let mut dks = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let mut dp = vec![T::zero(); tt];
    for b in 0..s.batch {
        for hh in 0..h {
            let base = (b * h + hh) * tt;
            let off = b * t * d + hh * dk;
            // dA = β · dO Vᵀ
            gemm_view(
                beta,
                View::new(&d_o, off, t, dk, d),
                false,
                View::new(&cache.v, off, t, dk, d),
                true,
                T::zero(),
                &mut dp,
                0,
                t,
            );
            // dV = β · Aᵀ dO + α · dO
            gemm_view(
                beta,
                View::new(&cache.probs, base, t, t, t),
                true,
                View::new(&d_o, off, t, dk, d),
                false,
                T::zero(),
                &mut dv,
                off,
                d,
            );
            if alpha != T::zero() {
                for i in 0..t {
                    for c in 0..dk {
                        let idx = off + i * d + c;
                        dv[idx] += alpha * d_o[idx];
                    }
                }
            }
            // softmax and cap reverse, in place on dp
            for i in 0..t {
                let a = &cache.probs[base + i * t..base + (i + 1) * t];
                let lg = &cache.logits[base + i * t..base + (i + 1) * t];
                let row = &mut dp[i * t..(i + 1) * t];
                let dot = (0..=i).fold(T::zero(), |acc, j| acc + row[j] * a[j]);
                for j in 0..=i {
                    let ds = a[j] * (row[j] - dot);
                    row[j] = ds * cap_grad(reg, lg[j]);
                }
                for val in row.iter_mut().skip(i + 1) {
                    *val = T::zero();
                }
            }
            // dQ = scale · dS K ; dK = scale · dSᵀ Q
            gemm_view(
                scale,
                View::new(&dp, 0, t, t, t),
                false,
                View::new(ks, off, t, dk, d),
                false,
                T::zero(),
                &mut dqs,
                off,
                d,
            );
            gemm_view(
                scale,
                View::new(&dp, 0, t, t, t),
                true,
                View::new(qs, off, t, dk, d),
                false,
                T::zero(),
                &mut dks,
                off,
                d,
            );
        }
    }
    let (dq, dk_) = match (&cache.qk_normed, qk_norm_kind(reg)) {
        (Some((_, _, qc, kc)), Some((kind, trainable))) => {
            let mut qg = vec![T::zero(); dk];
            let mut qb = vec![T::zero(); dk];
            let mut kg = vec![T::zero(); dk];
            let mut kb = vec![T::zero(); dk];
            let has_g = kind.has_gain() && trainable;
            let has_b = kind.has_bias() && trainable;
            let dq = norm_backward(
                &dqs,
                dk,
                kind,
                qc,
                p.q_gain,
                has_g.then_some(&mut qg[..]),
                has_b.then_some(&mut qb[..]),
            );
            let dkk = norm_backward(
                &dks,
                dk,
                kind,
                kc,
                p.k_gain,
                has_g.then_some(&mut kg[..]),
                has_b.then_some(&mut kb[..]),
            );
            if has_g {
                g.q_gain = qg;
                g.k_gain = kg;
            }
            if has_b {
                g.q_bias = qb;
                g.k_bias = kb;
            }
            (dq, dkk)
        }
        _ => (dqs, dks),
    };
    linear_grad_w(x, &dq, &mut g.wq, n, d, d);
    linear_grad_w(x, &dk_, &mut g.wk, n, d, d);
    linear_grad_w(x, &dv, &mut g.wv, n, d, d);
    let mut dx = vec![T::zero(); n * d];
    linear_grad_x(&dq, p.wq, &mut dx, n, d, d, false);
    linear_grad_x(&dk_, p.wk, &mut dx, n, d, d, true);
    linear_grad_x(&dv, p.wv, &mut dx, n, d, d, true);
    (dx, g)
}
