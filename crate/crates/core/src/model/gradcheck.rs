//! Central finite-difference check of the reverse pass.

use crate::error::Result;
use crate::model::{Batch, Model, ParameterStore};
use crate::rng::Rng;

/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_path: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// `|g − fd| / max(|g|, |fd|, REL_FLOOR)`.
pub fn rel_err(g: f64, fd: f64) -> f64 {
    (g - fd).abs() / g.abs().max(fd.abs()).max(REL_FLOOR)
}

/// Random batch of `batch` sequences of length `seq`.
pub fn random_batch(vocab: usize, batch: usize, seq: usize, rng: &mut Rng) -> Batch {
    let tokens = (0..batch * seq).map(|_| rng.below(vocab)).collect();
    let targets = (0..batch * seq).map(|_| rng.below(vocab)).collect();
    Batch {
        tokens,
        targets,
        batch,
        seq,
    }
}

/// Initialise `model`, jitter gains, biases and residual scalars away from
/// their symmetric init values, then compare every scalar gradient with a
/// central difference (`h = 1e-5·max(1, |p|)`).
pub fn gradcheck(model: &Model, seed: u64, batch: usize, seq: usize) -> Result<GradcheckReport> {
    let rng = Rng::new(seed, 0);
    let mut params: ParameterStore<f64> = model.init(&rng);
    let mut jitter = rng.split(1);
    for (path, value, _) in params.iter_mut() {
        if path.ends_with(".gain") || path.ends_with(".bias") || path.ends_with(".beta") {
            for v in value.data_mut() {
                *v += 0.2 * jitter.normal();
            }
        }
    }
    let mut data_rng = rng.split(2);
    let b = random_batch(model.config().vocab_size, batch, seq, &mut data_rng);
    model.backward(&mut params, &b)?;
    let grads = params.grads().clone();
    let paths: Vec<String> = params.paths().map(str::to_string).collect();
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        worst_path: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for path in paths {
        let len = params.get(&path)?.len();
        for i in 0..len {
            let p0 = params.get(&path)?.data()[i];
            let h = 1e-5 * p0.abs().max(1.0);
            params.get_mut(&path)?.data_mut()[i] = p0 + h;
            let lp = model.loss(&params, &b)?;
            params.get_mut(&path)?.data_mut()[i] = p0 - h;
            let lm = model.loss(&params, &b)?;
            params.get_mut(&path)?.data_mut()[i] = p0;
            let fd = (lp - lm) / (2.0 * h);
            let err = rel_err(grads[&path].data()[i], fd);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_path = path.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
