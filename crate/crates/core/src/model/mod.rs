//! Configurable toy transformer with an explicit forward pass, residual-stream
//! taps, and hand-written reverse-mode gradients.
//!
//! Activations are flattened to `n = batch·seq` rows of width `d`.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod gradcheck;
pub mod norm;
pub mod ops;
pub mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use attention::{attention_backward, attention_forward, AttnCache, AttnParams, AttnShape};
pub use config::{
    Activation, AttentionShaping, BlockKind, EntropyReg, ModelConfig, NormKind, ResidualScaling,
};
use norm::{norm_backward, norm_forward, NormCache};
use ops::{activate, activate_grad, add_assign, linear, linear_grad_w, linear_grad_x};
pub use params::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapSite {
    AttnInput,
    MlpInput,
    UnembedInput,
}

impl TapSite {
    pub fn as_str(self) -> &'static str {
        match self {
            TapSite::AttnInput => "attn-input",
            TapSite::MlpInput => "mlp-input",
            TapSite::UnembedInput => "unembed-input",
        }
    }
}

/// A copy of the residual stream at one site.
#[derive(Clone, Debug)]
pub struct ActivationTap<T> {
    /// Block index; the unembedding input uses `depth`.
    pub layer: usize,
    pub site: TapSite,
    /// `n×d`, batch and sequence flattened.
    pub x: Tensor<T>,
    /// Softmax attention per (batch element, head), each `T×T`. Empty
    /// except at `AttnInput`.
    pub attention: Vec<Tensor<T>>,
}

/// Token ids for `batch` sequences of length `seq`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl Batch {
    pub fn new(tokens: Vec<usize>, targets: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if tokens.len() != batch * seq || targets.len() != batch * seq {
            return Err(Error::Shape(format!(
                "batch {batch}×{seq} needs {} tokens and targets, got {} and {}",
                batch * seq,
                tokens.len(),
                targets.len()
            )));
        }
        Ok(Self {
            tokens,
            targets,
            batch,
            seq,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Intercepts the input of every linear layer whose weight may be quantised.
///
/// Keys are `block.{i}.attn.qkv`, `block.{i}.attn.wo`, `block.{i}.mlp.w_in`
/// and `block.{i}.mlp.w_out`.
pub trait LinearInputHook<T> {
    fn on_input(&mut self, key: &str, x: &mut [T]);
}

/// Hook that leaves inputs untouched.
pub struct NoHook;

impl<T> LinearInputHook<T> for NoHook {
    fn on_input(&mut self, _key: &str, _x: &mut [T]) {}
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// `false` when the loss is NaN or infinite (divergence signal).
    pub finite: bool,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    /// `n×V`.
    pub logits: Tensor<T>,
    pub taps: Vec<ActivationTap<T>>,
}

enum Gain<'a, T> {
    One,
    Scalar(T, bool),
    Vector(&'a [T]),
}

impl<T: Scalar> Gain<'_, T> {
    fn add_scaled(&self, dst: &mut [T], branch: &[T], d: usize) {
        match self {
            Gain::One => add_assign(dst, branch),
            Gain::Scalar(b, _) => dst.iter_mut().zip(branch).for_each(|(o, &v)| *o += *b * v),
            Gain::Vector(g) => {
                for (r, (orow, brow)) in dst.chunks_mut(d).zip(branch.chunks(d)).enumerate() {
                    let _ = r;
                    for j in 0..d {
                        orow[j] += g[j] * brow[j];
                    }
                }
            }
        }
    }

    /// Gradient flowing into the branch, plus the gain gradient if trainable.
    fn backward(&self, dy: &[T], branch: &[T], d: usize) -> (Vec<T>, Option<Vec<T>>) {
        match self {
            Gain::One => (dy.to_vec(), None),
            Gain::Scalar(b, trainable) => {
                let db = trainable.then(|| {
                    vec![dy.iter().zip(branch).fold(T::zero(), |a, (&g, &v)| a + g * v)]
                });
                (dy.iter().map(|&g| g * *b).collect(), db)
            }
            Gain::Vector(gv) => {
                let mut db = vec![T::zero(); d];
                let mut out = vec![T::zero(); dy.len()];
                for (i, (&g, &v)) in dy.iter().zip(branch).enumerate() {
                    let j = i % d;
                    db[j] += g * v;
                    out[i] = g * gv[j];
                }
                (out, Some(db))
            }
        }
    }
}

struct BlockParams<'a, T> {
    attn: Option<AttnParams<'a, T>>,
    wo: &'a [T],
    norm1: (Option<&'a [T]>, Option<&'a [T]>),
    norm2: (Option<&'a [T]>, Option<&'a [T]>),
    w_in: &'a [T],
    w_out: &'a [T],
    beta_attn: Gain<'a, T>,
    beta_mlp: Gain<'a, T>,
}

struct BlockCache<T> {
    x_in: Vec<T>,
    /// Attention input (the normalised stream for pre-norm blocks).
    a_in: Option<Vec<T>>,
    norm1: Option<NormCache<T>>,
    attn: Option<AttnCache<T>>,
    /// Concatenated heads (after any input hook), input to `wo`.
    heads_out: Vec<T>,
    attn_out: Vec<T>,
    x_hat: Vec<T>,
    norm2: Option<NormCache<T>>,
    m_in: Option<Vec<T>>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
    mlp_out: Vec<T>,
}

pub(crate) struct ForwardCache<T> {
    batch: usize,
    seq: usize,
    blocks: Vec<BlockCache<T>>,
    x_last: Vec<T>,
    final_norm: Option<NormCache<T>>,
    xf: Vec<T>,
    logits: Vec<T>,
}

/// Reverse-mode-capable transformer defined by a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    mlp_alpha: f64,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn block_norm(kind: BlockKind) -> Option<NormKind> {
    match kind {
        BlockKind::PreNorm { norm } | BlockKind::PostNorm { norm } => Some(norm),
        _ => None,
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mlp_alpha = config.mlp_alpha();
        Ok(Self { config, mlp_alpha })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn is_pre(&self) -> bool {
        matches!(self.config.block, BlockKind::PreNorm { .. })
    }

    fn is_post(&self) -> bool {
        matches!(self.config.block, BlockKind::PostNorm { .. })
    }

    /// Every parameter path with its shape, in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = &self.config;
        let (d, v, dk) = (c.width, c.vocab_size, c.head_dim());
        let mut out = vec![
            ("embed.tokens".to_string(), vec![v, d]),
            ("embed.positions".to_string(), vec![c.context, d]),
        ];
        if !c.tie_embeddings {
            out.push(("unembed".into(), vec![d, v]));
        }
        let norm_params = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str, kind: NormKind, dim| {
            if kind.has_gain() {
                out.push((format!("{prefix}.gain"), vec![dim]));
            }
            if kind.has_bias() {
                out.push((format!("{prefix}.bias"), vec![dim]));
            }
        };
        for i in 0..c.depth {
            let p = format!("block.{i}");
            if !c.mlp_only {
                for w in ["wq", "wk", "wv", "wo"] {
                    out.push((format!("{p}.attn.{w}"), vec![d, d]));
                }
                if let EntropyReg::QkNorm { norm, trainable: true } = c.entropy_reg {
                    norm_params(&mut out, &format!("{p}.attn.q_norm"), norm, dk);
                    norm_params(&mut out, &format!("{p}.attn.k_norm"), norm, dk);
                }
            }
            if let Some(nk) = block_norm(c.block) {
                if !c.mlp_only {
                    norm_params(&mut out, &format!("{p}.norm1"), nk, d);
                }
                norm_params(&mut out, &format!("{p}.norm2"), nk, d);
            }
            out.push((format!("{p}.mlp.w_in"), vec![d, c.hidden()]));
            out.push((format!("{p}.mlp.w_out"), vec![c.hidden(), d]));
            let beta_shape = match c.residual {
                ResidualScaling::TrainableScalar { .. } => Some(vec![1]),
                ResidualScaling::TrainableVector { .. } => Some(vec![d]),
                _ => None,
            };
            if let Some(shape) = beta_shape {
                if !c.mlp_only {
                    out.push((format!("{p}.attn.beta"), shape.clone()));
                }
                out.push((format!("{p}.mlp.beta"), shape));
            }
        }
        if let Some(nk) = c.final_norm {
            norm_params(&mut out, "final_norm", nk, d);
        }
        out
    }

    /// Draw initial parameters. Each path gets its own child stream of `rng`,
    /// so draws do not depend on parameter order.
    pub fn init<T: Scalar>(&self, rng: &Rng) -> ParameterStore<T> {
        let c = &self.config;
        let mut store = ParameterStore::new();
        for (path, shape) in self.parameter_shapes() {
            let len: usize = shape.iter().product();
            let mut data = vec![T::zero(); len];
            if path.ends_with(".gain") {
                data.iter_mut().for_each(|v| *v = T::one());
            } else if path.ends_with(".bias") {
            } else if path.ends_with(".beta") {
                let b = match c.residual {
                    ResidualScaling::TrainableScalar { beta }
                    | ResidualScaling::TrainableVector { beta } => beta,
                    _ => 1.0,
                };
                data.iter_mut().for_each(|v| *v = T::of(b));
            } else {
                let mut r = rng.split(fnv1a(&path));
                let scale = if path == "embed.tokens" {
                    c.embedding_upweight
                } else {
                    1.0
                };
                r.fill_normal(&mut data, 0.0, c.init_std * scale);
            }
            store.insert(path, Tensor::new(shape, data).expect("shape from parameter table"));
        }
        store
    }

    fn fixed_gain<'a, T: Scalar>(&self, params: &'a ParameterStore<T>, path: &str) -> Result<Gain<'a, T>> {
        Ok(match self.config.residual {
            ResidualScaling::Implicit => Gain::One,
            ResidualScaling::Fixed { beta } => Gain::Scalar(T::of(beta), false),
            ResidualScaling::TrainableScalar { .. } => Gain::Scalar(params.get(path)?.data()[0], true),
            ResidualScaling::TrainableVector { .. } => Gain::Vector(params.get(path)?.data()),
        })
    }

    fn block_params<'a, T: Scalar>(&self, params: &'a ParameterStore<T>, i: usize) -> Result<BlockParams<'a, T>> {
        let p = format!("block.{i}");
        let get = |name: &str| params.get(&format!("{p}.{name}")).map(Tensor::data);
        let opt = |name: &str| params.values().get(&format!("{p}.{name}")).map(Tensor::data);
        let attn = if self.config.mlp_only {
            None
        } else {
            Some(AttnParams {
                wq: get("attn.wq")?,
                wk: get("attn.wk")?,
                wv: get("attn.wv")?,
                q_gain: opt("attn.q_norm.gain"),
                q_bias: opt("attn.q_norm.bias"),
                k_gain: opt("attn.k_norm.gain"),
                k_bias: opt("attn.k_norm.bias"),
            })
        };
        Ok(BlockParams {
            attn,
            wo: if self.config.mlp_only { &[] } else { get("attn.wo")? },
            norm1: (opt("norm1.gain"), opt("norm1.bias")),
            norm2: (opt("norm2.gain"), opt("norm2.bias")),
            w_in: get("mlp.w_in")?,
            w_out: get("mlp.w_out")?,
            beta_attn: if self.config.mlp_only {
                Gain::One
            } else {
                self.fixed_gain(params, &format!("{p}.attn.beta"))?
            },
            beta_mlp: self.fixed_gain(params, &format!("{p}.mlp.beta"))?,
        })
    }

    fn check_tokens(&self, tokens: &[usize], seq: usize) -> Result<()> {
        if seq == 0 || seq > self.config.context {
            return Err(Error::Contract(format!(
                "sequence length {seq} outside 1..={}",
                self.config.context
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn block_forward<T: Scalar>(
        &self,
        bp: &BlockParams<'_, T>,
        x_in: Vec<T>,
        shape: AttnShape,
        layer: usize,
        hook: &mut dyn LinearInputHook<T>,
    ) -> (Vec<T>, BlockCache<T>) {
        let c = &self.config;
        let (n, d, hid) = (shape.rows(), c.width, c.hidden());
        let nk = block_norm(c.block).unwrap_or(NormKind::None);
        let (pre, post) = (self.is_pre(), self.is_post());

        let mut a_in = None;
        let mut norm1 = None;
        let mut attn = None;
        let mut heads_out = Vec::new();
        let mut attn_out = Vec::new();
        let mut z1 = x_in.clone();
        if let Some(ap) = &bp.attn {
            let mut src = if pre {
                let (y, cache) = norm_forward(&x_in, d, nk, bp.norm1.0, bp.norm1.1);
                norm1 = Some(cache);
                y
            } else {
                x_in.clone()
            };
            hook.on_input(&format!("block.{layer}.attn.qkv"), &mut src);
            let (mut o, cache) = attention_forward(&src, ap, shape, c.entropy_reg, c.attention_shaping);
            hook.on_input(&format!("block.{layer}.attn.wo"), &mut o);
            attn_out = linear(&o, bp.wo, n, d, d);
            bp.beta_attn.add_scaled(&mut z1, &attn_out, d);
            heads_out = o;
            attn = Some(cache);
            a_in = Some(src);
        }
        let x_hat = if post && bp.attn.is_some() {
            let (y, cache) = norm_forward(&z1, d, nk, bp.norm1.0, bp.norm1.1);
            norm1 = Some(cache);
            y
        } else {
            z1
        };

        let (mut m_src, norm2, m_in_pre) = if pre {
            let (y, cache) = norm_forward(&x_hat, d, nk, bp.norm2.0, bp.norm2.1);
            (y, Some(cache), true)
        } else {
            (x_hat.clone(), None, false)
        };
        hook.on_input(&format!("block.{layer}.mlp.w_in"), &mut m_src);
        let mut h_pre = linear(&m_src, bp.w_in, n, d, hid);
        let alpha = T::of(self.mlp_alpha);
        if alpha != T::one() {
            h_pre.iter_mut().for_each(|v| *v *= alpha);
        }
        let mut h_act: Vec<T> = h_pre.iter().map(|&v| activate(c.activation, v)).collect();
        hook.on_input(&format!("block.{layer}.mlp.w_out"), &mut h_act);
        let mlp_out = linear(&h_act, bp.w_out, n, hid, d);
        let mut z2 = x_hat.clone();
        bp.beta_mlp.add_scaled(&mut z2, &mlp_out, d);
        let (out, norm2) = if post {
            let (y, cache) = norm_forward(&z2, d, nk, bp.norm2.0, bp.norm2.1);
            (y, Some(cache))
        } else {
            (z2, norm2)
        };
        let _ = m_in_pre;
        (
            out,
            BlockCache {
                x_in,
                a_in,
                norm1,
                attn,
                heads_out,
                attn_out,
                x_hat,
                norm2,
                m_in: Some(m_src),
                h_pre,
                h_act,
                mlp_out,
            },
        )
    }

    pub(crate) fn forward_cached<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        hook: &mut dyn LinearInputHook<T>,
    ) -> Result<ForwardCache<T>> {
        if tokens.len() != batch * seq {
            return Err(Error::Shape(format!(
                "{} tokens for a {batch}×{seq} batch",
                tokens.len()
            )));
        }
        self.check_tokens(tokens, seq)?;
        let c = &self.config;
        let (d, v) = (c.width, c.vocab_size);
        let n = batch * seq;
        let emb = params.get("embed.tokens")?.data();
        let pos = params.get("embed.positions")?.data();
        let mut x = vec![T::zero(); n * d];
        for (r, &tok) in tokens.iter().enumerate() {
            let p = r % seq;
            for j in 0..d {
                x[r * d + j] = emb[tok * d + j] + pos[p * d + j];
            }
        }
        let shape = AttnShape {
            batch,
            seq,
            width: d,
            heads: c.heads,
        };
        let mut blocks = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            let bp = self.block_params(params, i)?;
            let (out, cache) = self.block_forward(&bp, x, shape, i, hook);
            blocks.push(cache);
            x = out;
        }
        let (xf, final_norm) = match c.final_norm {
            Some(nk) => {
                let g = params.values().get("final_norm.gain").map(Tensor::data);
                let b = params.values().get("final_norm.bias").map(Tensor::data);
                let (y, cache) = norm_forward(&x, d, nk, g, b);
                (y, Some(cache))
            }
            None => (x.clone(), None),
        };
        let mut logits = vec![T::zero(); n * v];
        if c.tie_embeddings {
            gemm(n, d, v, T::one(), &xf, false, emb, true, T::zero(), &mut logits);
        } else {
            let wu = params.get("unembed")?.data();
            gemm(n, d, v, T::one(), &xf, false, wu, false, T::zero(), &mut logits);
        }
        Ok(ForwardCache {
            batch,
            seq,
            blocks,
            x_last: x,
            final_norm,
            xf,
            logits,
        })
    }

    pub(crate) fn taps_from<T: Scalar>(&self, cache: &ForwardCache<T>) -> Vec<ActivationTap<T>> {
        let c = &self.config;
        let (d, h, t) = (c.width, c.heads, cache.seq);
        let n = cache.batch * t;
        let mat = |v: &[T]| Tensor::new(vec![n, d], v.to_vec()).expect("n×d activations");
        let mut taps = Vec::with_capacity(2 * c.depth + 1);
        for (i, b) in cache.blocks.iter().enumerate() {
            let attention = b
                .attn
                .as_ref()
                .map(|a| {
                    a.probs
                        .chunks(t * t)
                        .take(cache.batch * h)
                        .map(|p| Tensor::new(vec![t, t], p.to_vec()).expect("T×T"))
                        .collect()
                })
                .unwrap_or_default();
            taps.push(ActivationTap {
                layer: i,
                site: TapSite::AttnInput,
                x: mat(&b.x_in),
                attention,
            });
            taps.push(ActivationTap {
                layer: i,
                site: TapSite::MlpInput,
                x: mat(&b.x_hat),
                attention: Vec::new(),
            });
        }
        taps.push(ActivationTap {
            layer: c.depth,
            site: TapSite::UnembedInput,
            x: mat(&cache.x_last),
            attention: Vec::new(),
        });
        taps
    }

    /// Forward pass over `batch` sequences of length `seq` (tokens row-major).
    pub fn forward<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<ForwardOutput<T>> {
        self.forward_with_hook(params, tokens, batch, seq, &mut NoHook)
    }

    pub fn forward_with_hook<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        hook: &mut dyn LinearInputHook<T>,
    ) -> Result<ForwardOutput<T>> {
        let cache = self.forward_cached(params, tokens, batch, seq, hook)?;
        let taps = self.taps_from(&cache);
        let logits = Tensor::new(vec![batch * seq, self.config.vocab_size], cache.logits)?;
        Ok(ForwardOutput { logits, taps })
    }

    /// Mean next-token cross-entropy without gradients.
    pub fn loss<T: Scalar>(&self, params: &ParameterStore<T>, batch: &Batch) -> Result<f64> {
        self.loss_with_hook(params, batch, &mut NoHook)
    }

    pub fn loss_with_hook<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        batch: &Batch,
        hook: &mut dyn LinearInputHook<T>,
    ) -> Result<f64> {
        self.check_tokens(&batch.targets, batch.seq)?;
        let cache = self.forward_cached(params, &batch.tokens, batch.batch, batch.seq, hook)?;
        Ok(cross_entropy(&cache.logits, &batch.targets, self.config.vocab_size, None).as_f64())
    }

    /// Loss and exact gradients (written into `params`' gradient slots).
    pub fn backward<T: Scalar>(&self, params: &mut ParameterStore<T>, batch: &Batch) -> Result<LossReport> {
        self.backward_with_taps(params, batch, false).map(|(r, _)| r)
    }

    /// As [`Model::backward`], optionally also returning residual-stream taps
    /// captured during the same forward pass.
    pub fn backward_with_taps<T: Scalar>(
        &self,
        params: &mut ParameterStore<T>,
        batch: &Batch,
        capture: bool,
    ) -> Result<(LossReport, Option<Vec<ActivationTap<T>>>)> {
        self.check_tokens(&batch.targets, batch.seq)?;
        let cache = self.forward_cached(params, &batch.tokens, batch.batch, batch.seq, &mut NoHook)?;
        let taps = capture.then(|| self.taps_from(&cache));
        let c = &self.config;
        let (d, v) = (c.width, c.vocab_size);
        let n = batch.rows();
        let mut dlogits = vec![T::zero(); n * v];
        let loss = cross_entropy(&cache.logits, &batch.targets, v, Some(&mut dlogits)).as_f64();

        params.zero_grads();
        let (values, grads) = params.split_mut();
        let acc = |grads: &mut std::collections::BTreeMap<String, Tensor<T>>, path: &str, g: &[T]| {
            if let Some(t) = grads.get_mut(path) {
                add_assign(t.data_mut(), g);
            }
        };
        let emb = values["embed.tokens"].data();

        // unembedding
        let mut dxf = vec![T::zero(); n * d];
        if c.tie_embeddings {
            let mut de = vec![T::zero(); v * d];
            gemm(v, n, d, T::one(), &dlogits, true, &cache.xf, false, T::zero(), &mut de);
            acc(grads, "embed.tokens", &de);
            gemm(n, v, d, T::one(), &dlogits, false, emb, false, T::zero(), &mut dxf);
        } else {
            let wu = values["unembed"].data();
            let mut dwu = vec![T::zero(); d * v];
            linear_grad_w(&cache.xf, &dlogits, &mut dwu, n, d, v);
            acc(grads, "unembed", &dwu);
            linear_grad_x(&dlogits, wu, &mut dxf, n, d, v, false);
        }
        let mut dx = match (c.final_norm, &cache.final_norm) {
            (Some(nk), Some(nc)) => {
                let g = values.get("final_norm.gain").map(Tensor::data);
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let dx = norm_backward(
                    &dxf,
                    d,
                    nk,
                    nc,
                    g,
                    nk.has_gain().then_some(&mut dg[..]),
                    nk.has_bias().then_some(&mut db[..]),
                );
                acc(grads, "final_norm.gain", &dg);
                acc(grads, "final_norm.bias", &db);
                dx
            }
            _ => dxf,
        };

        let shape = AttnShape {
            batch: batch.batch,
            seq: batch.seq,
            width: d,
            heads: c.heads,
        };
        for i in (0..c.depth).rev() {
            // `values` and `grads` are disjoint fields of the store.
            let view = ParamView(values);
            let bp = self.block_params_from(&view, i)?;
            dx = self.block_backward(&bp, &cache.blocks[i], &dx, shape, i, grads, &acc);
        }

        // embeddings
        let mut de = vec![T::zero(); v * d];
        let mut dp = vec![T::zero(); c.context * d];
        for (r, &tok) in batch.tokens.iter().enumerate() {
            let p = r % batch.seq;
            for j in 0..d {
                de[tok * d + j] += dx[r * d + j];
                dp[p * d + j] += dx[r * d + j];
            }
        }
        acc(grads, "embed.tokens", &de);
        acc(grads, "embed.positions", &dp);
        Ok((
            LossReport {
                loss,
                finite: loss.is_finite(),
            },
            taps,
        ))
    }

    fn block_params_from<'a, T: Scalar>(&self, view: &ParamView<'a, T>, i: usize) -> Result<BlockParams<'a, T>> {
        let p = format!("block.{i}");
        let values = view.0;
        let get = |name: &str| -> Result<&'a [T]> {
            values
                .get(&format!("{p}.{name}"))
                .map(Tensor::data)
                .ok_or_else(|| Error::Contract(format!("unknown parameter `{p}.{name}`")))
        };
        let opt = |name: &str| values.get(&format!("{p}.{name}")).map(Tensor::data);
        let gain = |name: &str| -> Result<Gain<'a, T>> {
            Ok(match self.config.residual {
                ResidualScaling::Implicit => Gain::One,
                ResidualScaling::Fixed { beta } => Gain::Scalar(T::of(beta), false),
                ResidualScaling::TrainableScalar { .. } => Gain::Scalar(get(name)?[0], true),
                ResidualScaling::TrainableVector { .. } => Gain::Vector(get(name)?),
            })
        };
        let mlp_only = self.config.mlp_only;
        Ok(BlockParams {
            attn: if mlp_only {
                None
            } else {
                Some(AttnParams {
                    wq: get("attn.wq")?,
                    wk: get("attn.wk")?,
                    wv: get("attn.wv")?,
                    q_gain: opt("attn.q_norm.gain"),
                    q_bias: opt("attn.q_norm.bias"),
                    k_gain: opt("attn.k_norm.gain"),
                    k_bias: opt("attn.k_norm.bias"),
                })
            },
            wo: if mlp_only { &[] } else { get("attn.wo")? },
            norm1: (opt("norm1.gain"), opt("norm1.bias")),
            norm2: (opt("norm2.gain"), opt("norm2.bias")),
            w_in: get("mlp.w_in")?,
            w_out: get("mlp.w_out")?,
            beta_attn: if mlp_only { Gain::One } else { gain("attn.beta")? },
            beta_mlp: gain("mlp.beta")?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_backward<T: Scalar>(
        &self,
        bp: &BlockParams<'_, T>,
        bc: &BlockCache<T>,
        d_out: &[T],
        shape: AttnShape,
        layer: usize,
        grads: &mut std::collections::BTreeMap<String, Tensor<T>>,
        acc: &dyn Fn(&mut std::collections::BTreeMap<String, Tensor<T>>, &str, &[T]),
    ) -> Vec<T> {
        let c = &self.config;
        let (n, d, hid) = (shape.rows(), c.width, c.hidden());
        let nk = block_norm(c.block).unwrap_or(NormKind::None);
        let (pre, post) = (self.is_pre(), self.is_post());
        let p = format!("block.{layer}");
        let norm_grads = |grads: &mut std::collections::BTreeMap<String, Tensor<T>>,
                          which: &str,
                          dy: &[T],
                          cache: &NormCache<T>,
                          gain: Option<&[T]>|
         -> Vec<T> {
            let mut dg = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            let dx = norm_backward(
                dy,
                d,
                nk,
                cache,
                gain,
                nk.has_gain().then_some(&mut dg[..]),
                nk.has_bias().then_some(&mut db[..]),
            );
            if nk.has_gain() {
                acc(grads, &format!("{p}.{which}.gain"), &dg);
            }
            if nk.has_bias() {
                acc(grads, &format!("{p}.{which}.bias"), &db);
            }
            dx
        };

        // MLP sub-block
        let d_z2 = if post {
            norm_grads(grads, "norm2", d_out, bc.norm2.as_ref().expect("post norm2"), bp.norm2.0)
        } else {
            d_out.to_vec()
        };
        let mut d_x_hat = d_z2.clone();
        let (d_mlp_out, d_beta) = bp.beta_mlp.backward(&d_z2, &bc.mlp_out, d);
        if let Some(db) = d_beta {
            acc(grads, &format!("{p}.mlp.beta"), &db);
        }
        let mut dw = vec![T::zero(); hid * d];
        linear_grad_w(&bc.h_act, &d_mlp_out, &mut dw, n, hid, d);
        acc(grads, &format!("{p}.mlp.w_out"), &dw);
        let mut d_h = vec![T::zero(); n * hid];
        linear_grad_x(&d_mlp_out, bp.w_out, &mut d_h, n, hid, d, false);
        let alpha = T::of(self.mlp_alpha);
        for (g, &h) in d_h.iter_mut().zip(&bc.h_pre) {
            *g = *g * activate_grad(c.activation, h) * alpha;
        }
        let m_in = bc.m_in.as_ref().expect("mlp input cached");
        let mut dw = vec![T::zero(); d * hid];
        linear_grad_w(m_in, &d_h, &mut dw, n, d, hid);
        acc(grads, &format!("{p}.mlp.w_in"), &dw);
        let mut d_m = vec![T::zero(); n * d];
        linear_grad_x(&d_h, bp.w_in, &mut d_m, n, d, hid, false);
        if pre {
            let dm = norm_grads(grads, "norm2", &d_m, bc.norm2.as_ref().expect("pre norm2"), bp.norm2.0);
            add_assign(&mut d_x_hat, &dm);
        } else {
            add_assign(&mut d_x_hat, &d_m);
        }

        // attention sub-block
        let Some(ap) = &bp.attn else {
            return d_x_hat;
        };
        let d_z1 = if post {
            norm_grads(grads, "norm1", &d_x_hat, bc.norm1.as_ref().expect("post norm1"), bp.norm1.0)
        } else {
            d_x_hat
        };
        let mut d_x_in = d_z1.clone();
        let (d_attn_out, d_beta) = bp.beta_attn.backward(&d_z1, &bc.attn_out, d);
        if let Some(db) = d_beta {
            acc(grads, &format!("{p}.attn.beta"), &db);
        }
        let mut dwo = vec![T::zero(); d * d];
        linear_grad_w(&bc.heads_out, &d_attn_out, &mut dwo, n, d, d);
        acc(grads, &format!("{p}.attn.wo"), &dwo);
        let mut d_heads = vec![T::zero(); n * d];
        linear_grad_x(&d_attn_out, bp.wo, &mut d_heads, n, d, d, false);
        let a_in = bc.a_in.as_ref().expect("attention input cached");
        let (d_a_in, ag) = attention_backward(
            a_in,
            &d_heads,
            ap,
            bc.attn.as_ref().expect("attention cache"),
            shape,
            c.entropy_reg,
            c.attention_shaping,
        );
        acc(grads, &format!("{p}.attn.wq"), &ag.wq);
        acc(grads, &format!("{p}.attn.wk"), &ag.wk);
        acc(grads, &format!("{p}.attn.wv"), &ag.wv);
        for (name, g) in [
            ("q_norm.gain", &ag.q_gain),
            ("q_norm.bias", &ag.q_bias),
            ("k_norm.gain", &ag.k_gain),
            ("k_norm.bias", &ag.k_bias),
        ] {
            if !g.is_empty() {
                acc(grads, &format!("{p}.attn.{name}"), g);
            }
        }
        if pre {
            let da = norm_grads(grads, "norm1", &d_a_in, bc.norm1.as_ref().expect("pre norm1"), bp.norm1.0);
            add_assign(&mut d_x_in, &da);
        } else {
            add_assign(&mut d_x_in, &d_a_in);
        }
        let _ = &bc.x_in;
        d_x_in
    }

    /// Forward a single block on a `T×d` input (one sequence).
    pub fn block_forward_single<T: Scalar>(
        &self,
        params: &ParameterStore<T>,
        layer: usize,
        x_in: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<ActivationTap<T>>)> {
        let c = &self.config;
        if x_in.rank() != 2 || x_in.cols() != c.width || x_in.rows() > c.context {
            return Err(Error::Shape(format!(
                "block input must be T×{} with T ≤ {}, got {:?}",
                c.width,
                c.context,
                x_in.shape()
            )));
        }
        let t = x_in.rows();
        let shape = AttnShape {
            batch: 1,
            seq: t,
            width: c.width,
            heads: c.heads,
        };
        let bp = self.block_params(params, layer)?;
        let (out, cache) = self.block_forward(&bp, x_in.data().to_vec(), shape, layer, &mut NoHook);
        let mut taps = vec![ActivationTap {
            layer,
            site: TapSite::AttnInput,
            x: x_in.clone(),
            attention: cache
                .attn
                .as_ref()
                .map(|a| {
                    a.probs
                        .chunks(t * t)
                        .map(|p| Tensor::new(vec![t, t], p.to_vec()).expect("T×T"))
                        .collect()
                })
                .unwrap_or_default(),
        }];
        taps.push(ActivationTap {
            layer,
            site: TapSite::MlpInput,
            x: Tensor::new(vec![t, c.width], cache.x_hat.clone())?,
            attention: Vec::new(),
        });
        Ok((Tensor::new(vec![t, c.width], out)?, taps))
    }
}

struct ParamView<'a, T>(&'a std::collections::BTreeMap<String, Tensor<T>>);

/// Mean cross-entropy of `logits` (`n×V`) against `targets`; writes
/// `d loss / d logits` when asked.
fn cross_entropy<T: Scalar>(logits: &[T], targets: &[usize], v: usize, mut dlogits: Option<&mut [T]>) -> T {
    let n = targets.len();
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut total = T::zero();
    for (r, &tgt) in targets.iter().enumerate() {
        let row = &logits[r * v..(r + 1) * v];
        let max = row.iter().copied().fold(T::neg_infinity(), |a, x| if x > a { x } else { a });
        let sum = row.iter().fold(T::zero(), |a, &x| a + (x - max).exp());
        let lse = max + sum.ln();
        total += lse - row[tgt];
        if let Some(dl) = dlogits.as_deref_mut() {
            let drow = &mut dl[r * v..(r + 1) * v];
            for j in 0..v {
                drow[j] = (row[j] - lse).exp() * inv_n;
            }
            drow[tgt] -= inv_n;
        }
    }
    total * inv_n
}
