use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row normalisation `(x − c·μ)/σ ⊙ γ + β`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormKind {
    /// Centred, trainable gain and bias.
    LayerNorm,
    /// Uncentred, trainable gain.
    RmsNorm,
    /// Uncentred, no parameters: rows land on the sphere of radius √d.
    SrmsNorm,
    None,
}

impl NormKind {
    pub fn centred(self) -> bool {
        matches!(self, NormKind::LayerNorm)
    }

    pub fn has_gain(self) -> bool {
        matches!(self, NormKind::LayerNorm | NormKind::RmsNorm)
    }

    pub fn has_bias(self) -> bool {
        matches!(self, NormKind::LayerNorm)
    }
}

/// Block layout. Only the norm-bearing kinds carry a norm, so the
/// unnormalised kinds cannot be given pre-norms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BlockKind {
    PreNorm { norm: NormKind },
    PostNorm { norm: NormKind },
    /// Outlier Protected: no norms, scaled residuals, entropy regulation.
    Op,
    /// No norms and no entropy regulation.
    UnnormalizedNaive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EntropyReg {
    None,
    QkNorm {
        #[serde(default = "default_qk_norm")]
        norm: NormKind,
        #[serde(default = "yes")]
        trainable: bool,
    },
    TanhCap {
        #[serde(default = "default_max_attn_val")]
        max_attn_val: f64,
    },
    Clamp { cap: f64 },
}

fn default_qk_norm() -> NormKind {
    NormKind::RmsNorm
}
fn default_max_attn_val() -> f64 {
    30.0
}
fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ResidualScaling {
    /// Plain residual sum (β = 1, not a parameter).
    Implicit,
    Fixed { beta: f64 },
    TrainableScalar { beta: f64 },
    TrainableVector { beta: f64 },
}

impl ResidualScaling {
    pub fn trainable(self) -> bool {
        matches!(
            self,
            ResidualScaling::TrainableScalar { .. } | ResidualScaling::TrainableVector { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    /// tanh approximation.
    Gelu,
    LeakyRelu { slope: f64 },
}

/// Value-SkipInit attention shaping: `A ← α·I + β·A`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionShaping {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub context: usize,
    pub block: BlockKind,
    pub entropy_reg: EntropyReg,
    #[serde(default = "implicit")]
    pub residual: ResidualScaling,
    #[serde(default = "relu")]
    pub activation: Activation,
    /// Scale applied to MLP inputs before the nonlinearity; `None` is auto.
    #[serde(default)]
    pub mlp_input_scale: Option<f64>,
    #[serde(default = "four")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub attention_shaping: Option<AttentionShaping>,
    /// Norm applied to the residual stream before unembedding.
    #[serde(default)]
    pub final_norm: Option<NormKind>,
    #[serde(default = "fifty")]
    pub embedding_upweight: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "init_std")]
    pub init_std: f64,
    /// Drop attention sub-blocks, leaving a residual MLP.
    #[serde(default)]
    pub mlp_only: bool,
}

fn implicit() -> ResidualScaling {
    ResidualScaling::Implicit
}
fn relu() -> Activation {
    Activation::Relu
}
fn four() -> usize {
    4
}
fn fifty() -> f64 {
    50.0
}
fn init_std() -> f64 {
    0.02
}

/// Variance-preserving gain `1/√Var(φ(z))`, `z ~ N(0,1)`, by trapezoid quadrature.
pub fn nf_gain(act: Activation) -> f64 {
    let n = 40_001;
    let (lo, hi) = (-12.0f64, 12.0f64);
    let h = (hi - lo) / (n - 1) as f64;
    let (mut m1, mut m2) = (0.0, 0.0);
    for i in 0..n {
        let z = lo + h * i as f64;
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let y = crate::model::ops::activate(act, z);
        m1 += w * h * pdf * y;
        m2 += w * h * pdf * y * y;
    }
    1.0 / (m2 - m1 * m1).sqrt()
}

impl ModelConfig {
    /// Desk-scale defaults: 6 blocks, width 64, 4 heads, context 64.
    pub fn desk(block: BlockKind, entropy_reg: EntropyReg, vocab_size: usize) -> Self {
        Self {
            depth: 6,
            width: 64,
            heads: 4,
            vocab_size,
            context: 64,
            block,
            entropy_reg,
            residual: ResidualScaling::Implicit,
            activation: Activation::Relu,
            mlp_input_scale: None,
            mlp_ratio: 4,
            attention_shaping: None,
            final_norm: None,
            embedding_upweight: 50.0,
            tie_embeddings: false,
            init_std: 0.02,
            mlp_only: false,
        }
    }

    pub fn pre_ln(vocab_size: usize) -> Self {
        Self::desk(
            BlockKind::PreNorm {
                norm: NormKind::LayerNorm,
            },
            EntropyReg::None,
            vocab_size,
        )
    }

    /// OP block with QK-RMSNorm and fixed β = 0.3 residuals.
    pub fn op(vocab_size: usize) -> Self {
        let mut c = Self::desk(
            BlockKind::Op,
            EntropyReg::QkNorm {
                norm: NormKind::RmsNorm,
                trainable: true,
            },
            vocab_size,
        );
        c.residual = ResidualScaling::Fixed { beta: 0.3 };
        c
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }

    /// Resolved MLP input scale.
    pub fn mlp_alpha(&self) -> f64 {
        match (self.mlp_input_scale, self.activation) {
            (Some(a), _) => a,
            (None, Activation::Gelu) => nf_gain(Activation::Gelu),
            (None, _) => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.vocab_size == 0 || self.context == 0 {
            return bad("width, heads, vocab_size and context must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        match self.block {
            BlockKind::Op if matches!(self.entropy_reg, EntropyReg::None) => {
                return bad("the op block needs an entropy-regulation mechanism".into())
            }
            BlockKind::UnnormalizedNaive if !matches!(self.entropy_reg, EntropyReg::None) => {
                return bad("the naive unnormalised block has no entropy regulation".into())
            }
            BlockKind::PreNorm { norm: NormKind::None }
            | BlockKind::PostNorm { norm: NormKind::None } => {
                return bad("pre/post-norm blocks need a norm kind".into())
            }
            _ => {}
        }
        let finite = |v: f64| v.is_finite();
        match self.residual {
            ResidualScaling::Implicit => {}
            ResidualScaling::Fixed { beta }
            | ResidualScaling::TrainableScalar { beta }
            | ResidualScaling::TrainableVector { beta } => {
                if !finite(beta) {
                    return bad("residual beta must be finite".into());
                }
            }
        }
        if let Some(a) = self.mlp_input_scale {
            if !finite(a) {
                return bad("mlp_input_scale must be finite".into());
            }
        }
        match self.entropy_reg {
            EntropyReg::TanhCap { max_attn_val } if !(max_attn_val > 0.0) => {
                return bad("max_attn_val must be positive".into())
            }
            EntropyReg::Clamp { cap } if !(cap > 0.0) => {
                return bad("clamp cap must be positive".into())
            }
            EntropyReg::QkNorm {
                norm: NormKind::None,
                ..
            } => return bad("qk-norm needs a norm kind".into()),
            _ => {}
        }
        if let Some(s) = self.attention_shaping {
            if !finite(s.alpha) || !finite(s.beta) {
                return bad("attention shaping coefficients must be finite".into());
            }
        }
        if !(self.init_std >= 0.0) || !finite(self.embedding_upweight) {
            return bad("init_std and embedding_upweight must be finite".into());
        }
        Ok(())
    }
}
