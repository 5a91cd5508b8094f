//! KL annealing schedules.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnealMode {
    /// Jumps by `coefficient * period` at each period boundary.
    StepWise,
    /// Linear ramp to 1 over `epochs_to_full` epochs.
    EpochLinear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub mode: AnnealMode,
    pub coefficient: f64,
    pub period: u64,
    pub epochs_to_full: u64,
}

impl AnnealSchedule {
    pub const DEFAULT_PERIOD: u64 = 100;

    pub fn step_wise(coefficient: f64) -> Self {
        Self {
            mode: AnnealMode::StepWise,
            coefficient,
            period: Self::DEFAULT_PERIOD,
            epochs_to_full: 1,
        }
    }

    pub fn epoch_linear(epochs_to_full: u64) -> Self {
        Self {
            mode: AnnealMode::EpochLinear,
            coefficient: 0.0,
            period: Self::DEFAULT_PERIOD,
            epochs_to_full,
        }
    }

    pub fn constant() -> Self {
        Self {
            mode: AnnealMode::Constant,
            coefficient: 0.0,
            period: Self::DEFAULT_PERIOD,
            epochs_to_full: 1,
        }
    }
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self::constant()
    }
}

/// KL weight at `step`, in `[0, 1]` and non-decreasing in `step`.
pub fn anneal_scale(sched: &AnnealSchedule, step: u64, steps_per_epoch: u64) -> f64 {
    let raw = match sched.mode {
        AnnealMode::Constant => 1.0,
        AnnealMode::StepWise => {
            let period = sched.period.max(1);
            sched.coefficient * (period * (step / period)) as f64
        }
        AnnealMode::EpochLinear => {
            let span = sched.epochs_to_full.saturating_mul(steps_per_epoch);
            if span == 0 {
                1.0
            } else {
                step as f64 / span as f64
            }
        }
    };
    // negative or NaN coefficients collapse to 0
    if raw >= 1.0 {
        1.0
    } else if raw >= 0.0 {
        raw
    } else {
        0.0
    }
}
