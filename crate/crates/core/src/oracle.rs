//! Self-checks with known answers: exact identities on random matrices and
//! the small model configurations used for finite-difference checks.

use crate::metrics::{grams, kurtosis_ledger, moment_update_decomposition, moments};
use crate::model::config::{Activation, BlockKind, EntropyReg, ResidualScaling};
use crate::{ModelConfig, Result, Rng, Tensor};

/// Random `n×d` matrix (`n, d ∈ 1..=12`) with log-normal column scales.
pub fn random_matrix(rng: &mut Rng) -> Tensor<f64> {
    let n = 1 + rng.below(12);
    let d = 1 + rng.below(12);
    // Heavy-tailed columns exercise the outlier regime.
    let scales: Vec<f64> = (0..d).map(|_| (2.0 * rng.normal()).exp()).collect();
    let data = (0..n * d).map(|k| scales[k % d] * rng.normal()).collect();
    Tensor::new(vec![n, d], data).expect("shape matches data")
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceCheck {
    /// Worst relative gap between `‖Σ_F‖²` and `‖Σ_I‖²`.
    pub trace: f64,
    /// Worst relative imbalance of the kurtosis ledger.
    pub ledger: f64,
}

pub fn trace_check(trials: usize, seed: u64) -> Result<TraceCheck> {
    let mut rng = Rng::new(seed, 0);
    let mut out = TraceCheck { trace: 0.0, ledger: 0.0 };
    for _ in 0..trials {
        let x = random_matrix(&mut rng);
        let (n, d) = (x.rows(), x.cols());
        let (si, sf) = grams(x.data(), n, d);
        let (a, b): (f64, f64) = (sf.iter().map(|v| v * v).sum(), si.iter().map(|v| v * v).sum());
        out.trace = out.trace.max(rel(a, b));
        let (lhs, rhs) = kurtosis_ledger(&x)?;
        out.ledger = out.ledger.max(rel(lhs, rhs));
    }
    Ok(out)
}

/// Worst relative error when rebuilding `m2` and `m4` after an update from
/// the moments before it plus the decomposed deltas.
pub fn decomposition_check(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::new(seed, 0);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = random_matrix(&mut rng);
        let noise: Vec<f64> = x.data().iter().map(|v| v * 0.3 * rng.normal()).collect();
        let dx = Tensor::new(x.shape().to_vec(), noise)?;
        let u = moment_update_decomposition(&x, &dx)?;
        let after = x.zip_with(&dx, |a, b| a + b)?;
        let (m2a, m4a) = moments(&after)?;
        let (m2b, m4b) = moments(&x)?;
        worst = worst.max(rel(m2b + u.m2_delta, m2a)).max(rel(m4b + u.m4_delta, m4a));
    }
    Ok(worst)
}

/// Small smooth model for finite-difference checks.
pub fn gradcheck_config(block: BlockKind, reg: EntropyReg, d: usize, depth: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(block, reg, 11);
    c.depth = depth;
    c.width = d;
    c.heads = 2;
    c.context = 8;
    // Central differences straddle ReLU kinks; GELU keeps the loss smooth.
    c.activation = Activation::Gelu;
    c.init_std = 0.3;
    c.embedding_upweight = 1.0;
    if matches!(c.block, BlockKind::Op) {
        c.residual = ResidualScaling::Fixed { beta: 0.3 };
    }
    c
}
