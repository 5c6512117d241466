//! Gradual unfreezing schedule for finetuning: pretrained parameter groups
//! get a learning-rate multiplier of 0 for the first 500 steps, then 0.2,
//! 0.5, 0.7 for the next 100 steps each, reaching 1 after 800 steps.

use super::store::ParamGroup;
use super::{AtatModel, Scalar};

/// Multiplier for pretrained groups at a given step.
pub fn unfreeze_multiplier(step: u64) -> f64 {
    match step {
        0..=499 => 0.0,
        500..=599 => 0.2,
        600..=699 => 0.5,
        700..=799 => 0.7,
        _ => 1.0,
    }
}

impl<F: Scalar> AtatModel<F> {
    /// Apply the unfreezing multiplier for `step` to every pretrained group.
    /// Newly initialized embedding rows keep multiplier 1.0 via their growth
    /// watermark, regardless of the group setting.
    pub fn set_freeze_multipliers(&mut self, step: u64) {
        let m = unfreeze_multiplier(step);
        for g in ParamGroup::ALL {
            self.store_mut().set_multiplier(g, m);
        }
    }

    /// Release everything (training from scratch / pretraining).
    pub fn clear_freeze(&mut self) {
        for g in ParamGroup::ALL {
            self.store_mut().set_multiplier(g, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_fixture_points() {
        assert_eq!(unfreeze_multiplier(0), 0.0);
        assert_eq!(unfreeze_multiplier(250), 0.0);
        assert_eq!(unfreeze_multiplier(499), 0.0);
        assert_eq!(unfreeze_multiplier(500), 0.2);
        assert_eq!(unfreeze_multiplier(650), 0.5);
        assert_eq!(unfreeze_multiplier(799), 0.7);
        assert_eq!(unfreeze_multiplier(800), 1.0);
        assert_eq!(unfreeze_multiplier(10_000), 1.0);
    }
}
