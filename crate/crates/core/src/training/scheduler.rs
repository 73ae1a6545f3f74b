//! Reduce-on-plateau learning-rate schedule.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    /// Multiplier applied to the learning rate on a plateau.
    pub factor: f64,
    /// Epochs without improvement before reducing.
    pub patience: usize,
    /// Improvement below this margin does not count.
    pub min_delta: f64,
    /// The learning rate never drops below this floor.
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig {
            factor: 0.3,
            patience: 5,
            min_delta: 1e-4,
            min_lr: 1e-7,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.factor) || self.factor <= 0.0 {
            return Err(Error::config(format!(
                "plateau factor {} must be in (0, 1)",
                self.factor
            )));
        }
        if self.patience == 0 {
            return Err(Error::config("plateau patience must be at least 1"));
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return Err(Error::config("min_delta must be >= 0"));
        }
        if !(self.min_lr.is_finite() && self.min_lr >= 0.0) {
            return Err(Error::config("min_lr must be >= 0"));
        }
        Ok(())
    }
}

/// Tracks a higher-is-better metric and cuts the learning rate by
/// `factor` after `patience` epochs without improvement.
pub struct ReduceOnPlateau {
    cfg: PlateauConfig,
    best: f64,
    num_bad: usize,
}

impl ReduceOnPlateau {
    pub fn new(cfg: PlateauConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ReduceOnPlateau {
            cfg,
            best: f64::NEG_INFINITY,
            num_bad: 0,
        })
    }

    /// Feed this epoch's metric; returns the learning rate to use next.
    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if metric > self.best + self.cfg.min_delta {
            self.best = metric;
            self.num_bad = 0;
            return lr;
        }
        self.num_bad += 1;
        if self.num_bad >= self.cfg.patience {
            self.num_bad = 0;
            (lr * self.cfg.factor).max(self.cfg.min_lr)
        } else {
            lr
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(patience: usize) -> ReduceOnPlateau {
        ReduceOnPlateau::new(PlateauConfig {
            factor: 0.3,
            patience,
            min_delta: 0.0,
            min_lr: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn two_plateaus_compound_the_factor() {
        let mut s = sched(2);
        let mut lr = 1.0;
        lr = s.step(0.5, lr); // new best
        assert_eq!(lr, 1.0);
        lr = s.step(0.5, lr); // bad 1
        assert_eq!(lr, 1.0);
        lr = s.step(0.5, lr); // bad 2 -> cut
        assert!((lr - 0.3).abs() < 1e-15);
        lr = s.step(0.5, lr);
        lr = s.step(0.5, lr); // second plateau -> cut again
        assert!((lr - 0.09).abs() < 1e-15, "{lr}");
    }

    #[test]
    fn improvement_resets_the_bad_counter() {
        let mut s = sched(2);
        let mut lr = 1.0;
        lr = s.step(0.5, lr);
        lr = s.step(0.5, lr); // bad 1
        lr = s.step(0.6, lr); // improvement resets
        lr = s.step(0.6, lr); // bad 1 again
        assert_eq!(lr, 1.0, "no cut yet");
        lr = s.step(0.6, lr); // bad 2 -> cut
        assert!((lr - 0.3).abs() < 1e-15);
        assert!((s.best() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn min_delta_requires_a_real_improvement() {
        let mut s = ReduceOnPlateau::new(PlateauConfig {
            factor: 0.5,
            patience: 1,
            min_delta: 0.05,
            min_lr: 0.0,
        })
        .unwrap();
        let mut lr = 1.0;
        lr = s.step(0.50, lr);
        lr = s.step(0.54, lr); // within min_delta: still a plateau
        assert_eq!(lr, 0.5);
    }

    #[test]
    fn lr_respects_the_floor() {
        let mut s = ReduceOnPlateau::new(PlateauConfig {
            factor: 0.1,
            patience: 1,
            min_delta: 0.0,
            min_lr: 0.05,
        })
        .unwrap();
        let mut lr = 1.0;
        lr = s.step(0.5, lr);
        lr = s.step(0.5, lr); // 0.1
        lr = s.step(0.5, lr); // would be 0.01, floored
        assert!((lr - 0.05).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(PlateauConfig {
            factor: 1.0,
            ..PlateauConfig::default()
        }
        .validate()
        .is_err());
        assert!(PlateauConfig {
            factor: 0.0,
            ..PlateauConfig::default()
        }
        .validate()
        .is_err());
        assert!(PlateauConfig {
            patience: 0,
            ..PlateauConfig::default()
        }
        .validate()
        .is_err());
        PlateauConfig::default().validate().unwrap();
    }
}
