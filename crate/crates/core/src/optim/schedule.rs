use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearWarmupLinearDecay,
    Cosine,
    Wsd,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub max_lr: f64,
    #[serde(default)]
    pub warmup_frac: f64,
    /// Final linear-decay fraction (WSD only).
    #[serde(default)]
    pub decay_frac: f64,
    /// Zero inside a run config means "the run's step count".
    #[serde(default)]
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if !frac(self.warmup_frac) || !frac(self.decay_frac) {
            return Err(Error::Config("schedule fractions must lie in [0, 1]".into()));
        }
        if self.kind == ScheduleKind::Wsd && self.warmup_frac + self.decay_frac > 1.0 {
            return Err(Error::Config("wsd warmup + decay fractions exceed 1".into()));
        }
        if !(self.max_lr >= 0.0 && self.max_lr.is_finite()) {
            return Err(Error::Config(format!("max_lr {} must be finite and non-negative", self.max_lr)));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0 ≤ step ≤ total): a linear ramp from 0 over
/// the warmup, then the kind-specific decay to 0.
pub fn lr_at(s: &ScheduleSpec, step: u64) -> f64 {
    let total = s.total_steps as f64;
    let t = (step as f64).min(total);
    let warm = s.warmup_frac * total;
    if t < warm {
        return s.max_lr * t / warm;
    }
    let rest = total - warm;
    match s.kind {
        ScheduleKind::Constant => s.max_lr,
        ScheduleKind::LinearWarmupLinearDecay => {
            if rest <= 0.0 {
                s.max_lr
            } else {
                s.max_lr * (total - t) / rest
            }
        }
        ScheduleKind::Cosine => {
            if rest <= 0.0 {
                s.max_lr
            } else {
                0.5 * s.max_lr * (1.0 + (std::f64::consts::PI * (t - warm) / rest).cos())
            }
        }
        ScheduleKind::Wsd => {
            let decay = s.decay_frac * total;
            let start = total - decay;
            if t <= start || decay <= 0.0 {
                s.max_lr
            } else {
                s.max_lr * (total - t) / decay
            }
        }
    }
}
