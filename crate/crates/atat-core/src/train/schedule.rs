//! The noam learning-rate schedule and the training hyperparameter block.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_steps: u64,
    /// Must mirror the model's width; the schedule scales by d_model^-0.5.
    pub d_model: usize,
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Save a checkpoint every N steps when an output directory is set;
    /// 0 saves only at the end.
    pub checkpoint_interval: u64,
    /// Evaluate the validation set every N steps; 0 disables validation.
    pub validate_interval: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 4000,
            d_model: 256,
            lr_scale: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            label_smoothing: 0.1,
            batch_size: 32,
            max_steps: 100_000,
            checkpoint_interval: 0,
            validate_interval: 0,
        }
    }
}

impl ScheduleConfig {
    /// Laptop-scale defaults matching `ModelConfig::desk`.
    pub fn desk() -> Self {
        Self {
            warmup_steps: 200,
            d_model: 64,
            lr_scale: 1.0,
            batch_size: 8,
            max_steps: 1000,
            ..Self::default()
        }
    }
}

/// `lr = lr_scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`,
/// increasing through warmup and decaying as step^-0.5 after.
pub fn noam_lr(step: u64, cfg: &ScheduleConfig) -> f64 {
    assert!(step >= 1, "noam schedule is defined for step >= 1");
    let s = step as f64;
    let w = cfg.warmup_steps as f64;
    cfg.lr_scale * (cfg.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_cfg() -> ScheduleConfig {
        ScheduleConfig { warmup_steps: 4000, d_model: 256, lr_scale: 1.0, ..Default::default() }
    }

    #[test]
    fn fixture_values_at_warmup_and_step_one() {
        let cfg = paper_cfg();
        let at_warmup = noam_lr(4000, &cfg);
        let expect = 256f64.powf(-0.5) * 4000f64.powf(-0.5);
        assert!((at_warmup - expect).abs() / expect < 1e-9);
        assert!((at_warmup - 9.882e-4).abs() < 1e-6);

        let first = noam_lr(1, &cfg);
        let expect1 = 256f64.powf(-0.5) * 4000f64.powf(-1.5);
        assert!((first - expect1).abs() / expect1 < 1e-9);
        assert!((first - 2.471e-7).abs() < 1e-9);
    }

    #[test]
    fn peak_is_exactly_at_warmup() {
        let cfg = paper_cfg();
        assert!(noam_lr(3999, &cfg) < noam_lr(4000, &cfg));
        assert!(noam_lr(4001, &cfg) < noam_lr(4000, &cfg));
    }

    #[test]
    fn monotone_before_and_after_warmup() {
        let cfg = paper_cfg();
        for s in 1..4000u64 {
            assert!(noam_lr(s, &cfg) < noam_lr(s + 1, &cfg), "not increasing at {s}");
        }
        for s in 4000..8000u64 {
            assert!(noam_lr(s + 1, &cfg) < noam_lr(s, &cfg), "not decreasing at {s}");
        }
    }

    #[test]
    fn continuous_at_warmup() {
        let cfg = paper_cfg();
        // Both branches of the min agree at step == warmup.
        let s = 4000f64;
        let w = 4000f64;
        assert!((s.powf(-0.5) - s * w.powf(-1.5)).abs() < 1e-18);
    }
}
