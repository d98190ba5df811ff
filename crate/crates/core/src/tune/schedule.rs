use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which trainable groups the fine-tune updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainGroups {
    Thresholds,
    Pointwise,
    Both,
    /// Nothing trains; useful as a baseline run.
    Frozen,
}

impl TrainGroups {
    pub fn thresholds(self) -> bool {
        matches!(self, TrainGroups::Thresholds | TrainGroups::Both)
    }

    pub fn pointwise(self) -> bool {
        matches!(self, TrainGroups::Pointwise | TrainGroups::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Cosine period in steps. `None` means one epoch.
    pub period: Option<usize>,
    pub seed: u64,
    pub train: TrainGroups,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch: 32,
            lr: 1e-3,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            period: None,
            seed: 0,
            train: TrainGroups::Thresholds,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad(format!("Adam betas {} / {} outside (0, 1)", self.beta1, self.beta2));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr && self.eps > 0.0) {
            return bad(format!(
                "learning rates {} / {} or eps {} invalid",
                self.lr, self.lr_min, self.eps
            ));
        }
        if self.period == Some(0) {
            return bad("cosine period must be at least 1".into());
        }
        Ok(())
    }
}

/// Learning rate at `step` and whether the step starts a new cosine cycle.
pub fn cosine_lr(step: usize, lr: f64, lr_min: f64, period: usize) -> (f64, bool) {
    let phase = step % period;
    let cos = (std::f64::consts::PI * phase as f64 / period as f64).cos();
    (lr_min + 0.5 * (lr - lr_min) * (1.0 + cos), phase == 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_landmarks() {
        assert_eq!(cosine_lr(0, 1e-3, 1e-5, 10), (1e-3, true));
        let (mid, restart) = cosine_lr(5, 1e-3, 1e-5, 10);
        assert!((mid - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(!restart);
        assert_eq!(cosine_lr(10, 1e-3, 1e-5, 10), (1e-3, true));
        assert!(cosine_lr(9, 1e-3, 0.0, 10).0 < cosine_lr(8, 1e-3, 0.0, 10).0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            beta2: 1.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            period: Some(0),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
