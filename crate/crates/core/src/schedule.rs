//! Learning-rate schedule: constant hold followed by cosine annealing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{AdamConfig, LookaheadConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    /// Fraction of all steps trained at `base_lr`.
    pub hold_fraction: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub lookahead: Option<LookaheadConfig>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            base_lr: 8e-4,
            hold_fraction: 0.25,
            total_epochs: 60,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            lookahead: None,
        }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("base lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.hold_fraction) {
            return Err(Error::InvalidConfig(format!(
                "hold fraction must lie in [0, 1), got {}",
                self.hold_fraction
            )));
        }
        if self.total_epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if let Some(la) = self.lookahead {
            if la.k == 0 || !(0.0..=1.0).contains(&la.alpha) {
                return Err(Error::InvalidConfig("lookahead needs k >= 1 and alpha in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate for `step` in `0..total_steps`.
pub fn lr_at(step: usize, total_steps: usize, spec: &ScheduleSpec) -> f64 {
    let hold = spec.hold_fraction * total_steps as f64;
    let s = step as f64;
    if s < hold {
        return spec.base_lr;
    }
    let span = total_steps as f64 - hold;
    if span <= 0.0 {
        return spec.base_lr;
    }
    spec.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * (s - hold) / span).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_points() {
        let spec = ScheduleSpec::default();
        assert_eq!(lr_at(0, 1000, &spec), 8e-4);
        assert_eq!(lr_at(249, 1000, &spec), 8e-4);
        assert!((lr_at(625, 1000, &spec) - 4e-4).abs() < 1e-15);
        assert!(lr_at(999, 1000, &spec) < 1e-7);
    }

    #[test]
    fn validation() {
        let mut spec = ScheduleSpec::default();
        assert!(spec.validate().is_ok());
        spec.hold_fraction = 1.0;
        assert!(spec.validate().is_err());
        spec.hold_fraction = 0.25;
        spec.base_lr = 0.0;
        assert!(spec.validate().is_err());
    }

    proptest! {
        #[test]
        fn continuous_and_non_increasing(total in 2usize..5000, hold in 0.0f64..0.99) {
            let spec = ScheduleSpec { hold_fraction: hold, ..ScheduleSpec::default() };
            let mut prev = f64::INFINITY;
            for step in 0..total {
                let lr = lr_at(step, total, &spec);
                prop_assert!(lr <= prev + 1e-18);
                prop_assert!(lr >= 0.0 && lr <= spec.base_lr);
                prev = lr;
            }
            // The cosine branch starts at the base rate.
            let boundary = hold * total as f64;
            let span = total as f64 - boundary;
            let just_after = spec.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * 1e-9 / span).cos());
            prop_assert!((just_after - spec.base_lr).abs() < 1e-12);
        }
    }
}
