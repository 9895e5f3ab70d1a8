//! One-cycle learning-rate and momentum schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCycle {
    /// Fraction of steps spent rising to the peak.
    pub warmup_fraction: f64,
    /// Starting lr is `lr_init / div_start`.
    pub div_start: f64,
    /// Final lr is `lr_init / div_final`.
    pub div_final: f64,
    pub momentum_low: f64,
    pub momentum_high: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            warmup_fraction: 0.4,
            div_start: 10.0,
            div_final: 1000.0,
            momentum_low: 0.85,
            momentum_high: 0.95,
        }
    }
}

/// Cosine interpolation from `a` (at `t = 0`) to `b` (at `t = 1`).
pub fn cosine(a: f64, b: f64, t: f64) -> f64 {
    b + (a - b) * 0.5 * (1.0 + (PI * t).cos())
}

impl OneCycle {
    pub fn validate(&self) -> Result<()> {
        let ok = self.warmup_fraction > 0.0
            && self.warmup_fraction < 1.0
            && self.div_start >= 1.0
            && self.div_final >= 1.0
            && 0.0 < self.momentum_low
            && self.momentum_low <= self.momentum_high
            && self.momentum_high < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("invalid one-cycle schedule".into()))
        }
    }

    /// `(lr, momentum)` at `step` of `total_steps`.
    pub fn at(&self, step: usize, total_steps: usize, lr_init: f64) -> Result<(f64, f64)> {
        if total_steps == 0 || step > total_steps {
            return Err(Error::Usage(format!(
                "schedule step {step} outside [0, {total_steps}]"
            )));
        }
        let t = step as f64 / total_steps as f64;
        let w = self.warmup_fraction;
        let (lo, hi) = (self.momentum_low, self.momentum_high);
        Ok(if t <= w {
            let u = t / w;
            (
                cosine(lr_init / self.div_start, lr_init, u),
                cosine(hi, lo, u),
            )
        } else {
            let u = (t - w) / (1.0 - w);
            (
                cosine(lr_init, lr_init / self.div_final, u),
                cosine(lo, hi, u),
            )
        })
    }

    /// Largest possible change of lr between adjacent steps: the steepest
    /// slope of either cosine segment times the step width.
    pub fn max_step_change(&self, total_steps: usize, lr_init: f64) -> f64 {
        let up = (lr_init - lr_init / self.div_start) * PI / (2.0 * self.warmup_fraction);
        let down = (lr_init - lr_init / self.div_final) * PI / (2.0 * (1.0 - self.warmup_fraction));
        up.max(down) / total_steps as f64
    }
}

pub fn one_cycle_lr(step: usize, total_steps: usize, lr_init: f64) -> Result<(f64, f64)> {
    OneCycle::default().at(step, total_steps, lr_init)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_peak() {
        let (lr, m) = one_cycle_lr(0, 1000, 0.003).unwrap();
        assert!((lr - 0.0003).abs() < 1e-15);
        assert_eq!(m, 0.95);
        let (lr, m) = one_cycle_lr(400, 1000, 0.003).unwrap();
        assert!((lr - 0.003).abs() < 1e-15);
        assert!((m - 0.85).abs() < 1e-15);
        let (lr, m) = one_cycle_lr(1000, 1000, 0.003).unwrap();
        assert!((lr - 0.000003).abs() < 1e-15);
        assert!((m - 0.95).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_is_usage_error() {
        assert!(matches!(one_cycle_lr(11, 10, 0.1), Err(Error::Usage(_))));
    }

    #[test]
    fn adjacent_steps_within_cosine_bound() {
        let s = OneCycle::default();
        for total in [10, 97, 1000] {
            let bound = s.max_step_change(total, 0.003);
            for k in 0..total {
                let a = s.at(k, total, 0.003).unwrap().0;
                let b = s.at(k + 1, total, 0.003).unwrap().0;
                assert!((a - b).abs() <= bound * (1.0 + 1e-12));
            }
        }
    }
}
