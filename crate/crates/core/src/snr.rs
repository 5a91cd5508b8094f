//! Gradient signal-to-noise ratio over a sliding window of batches.
//!
//! Per scalar, `snr = mean(g^2) / var(g)` with the population variance.
//! Scalars whose variance is below `1e-30` report `+inf`; they are left out
//! of the mean but kept in the median.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::shape_err;
use crate::{Error, Result};

pub const SNR_WINDOW: usize = 10;
const ZERO_VARIANCE: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrSummary {
    pub mean_snr: f64,
    pub median_snr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SnrTracker {
    window: VecDeque<Vec<f64>>,
}

impl SnrTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Add a snapshot, dropping the oldest once the window is full.
    pub fn push(&mut self, grads: &[f64]) -> Result<()> {
        if let Some(first) = self.window.front() {
            if first.len() != grads.len() {
                return Err(shape_err!(
                    "snapshot has {} entries, window holds {}",
                    grads.len(),
                    first.len()
                ));
            }
        }
        if self.window.len() == SNR_WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(grads.to_vec());
        Ok(())
    }

    /// Per-scalar SNR over the current window.
    pub fn per_scalar(&self) -> Result<Vec<f64>> {
        let have = self.window.len();
        if have < 2 {
            return Err(Error::InsufficientWindow { have });
        }
        let n = have as f64;
        let width = self.window[0].len();
        let mut out = Vec::with_capacity(width);
        for i in 0..width {
            let mean = self.window.iter().map(|g| g[i]).sum::<f64>() / n;
            let mean_sq = self.window.iter().map(|g| g[i] * g[i]).sum::<f64>() / n;
            let var = self
                .window
                .iter()
                .map(|g| (g[i] - mean) * (g[i] - mean))
                .sum::<f64>()
                / n;
            out.push(if var < ZERO_VARIANCE {
                f64::INFINITY
            } else {
                mean_sq / var
            });
        }
        Ok(out)
    }

    pub fn report(&self) -> Result<SnrSummary> {
        Ok(summarize(&self.per_scalar()?))
    }

    /// Push then report, the usual per-step call.
    pub fn update_and_report(&mut self, grads: &[f64]) -> Result<SnrSummary> {
        self.push(grads)?;
        self.report()
    }
}

/// Mean over finite values (`+inf` if none are finite) and median over all.
pub fn summarize(values: &[f64]) -> SnrSummary {
    let finite: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    let mean_snr = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median_snr = match sorted.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    SnrSummary {
        mean_snr,
        median_snr,
    }
}
