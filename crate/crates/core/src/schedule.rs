//! Step-indexed schedules for β, the learning rate and the training stage.

use crate::config::{ParamGroup, Stack};
use crate::pe::{TrainMode, TrainableMask};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub total_steps: usize,
    pub cycles: usize,
    pub ramp_fraction: f64,
    pub warmup_fraction: f64,
    pub stage_switch_fraction: f64,
    pub peak_lr: f64,
    pub free_bit_lambda: f64,
    pub beta_max: f64,
}

impl TrainSchedule {
    pub fn new(total_steps: usize, peak_lr: f64, free_bit_lambda: f64) -> Self {
        Self {
            total_steps,
            cycles: 4,
            ramp_fraction: 0.5,
            warmup_fraction: 1.0 / 6.0,
            stage_switch_fraction: 1.0 / 6.0,
            peak_lr,
            free_bit_lambda,
            beta_max: 1.0,
        }
    }

    /// First step at which decoder PE components join training.
    pub fn stage_switch_step(&self) -> usize {
        (self.stage_switch_fraction * self.total_steps as f64).ceil() as usize
    }
}

/// Within each of `cycles` equal cycles, β rises linearly from 0 over the
/// first `ramp_fraction` of the cycle and then holds at `beta_max`.
pub fn beta_at_step(t: usize, s: &TrainSchedule) -> f64 {
    let period = s.total_steps as f64 / s.cycles.max(1) as f64;
    let tau = (t as f64 % period) / period;
    s.beta_max * (tau / s.ramp_fraction).min(1.0)
}

pub fn lr_at_step(t: usize, s: &TrainSchedule) -> f64 {
    let warm = s.warmup_fraction * s.total_steps as f64;
    if warm <= 0.0 {
        return s.peak_lr;
    }
    s.peak_lr * (t as f64 / warm).min(1.0)
}

/// Before the stage switch, decoder PE parameters are frozen on top of
/// `mask`. Fine-tuning ignores staging.
pub fn stage_mask_at_step(t: usize, s: &TrainSchedule, mask: &TrainableMask) -> TrainableMask {
    if mask.mode == TrainMode::Pe && t < s.stage_switch_step() {
        mask.without(ParamGroup::Pe(Stack::Decoder))
    } else {
        mask.clone()
    }
}
