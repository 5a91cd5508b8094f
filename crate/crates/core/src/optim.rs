//! Adam with bias correction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err};
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates mirroring a list of parameter arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step_count: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(shapes: &[usize], hyper: AdamHyper) -> Result<Self> {
        if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", hyper.lr));
        }
        let zeros: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            hyper,
        })
    }

    /// Zeroed state shaped like `params`.
    pub fn for_params(params: &[&[f64]], hyper: AdamHyper) -> Result<Self> {
        let lens: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(&lens, hyper)
    }
}

/// One Adam update. All gradients are checked before any parameter moves, so
/// a non-finite gradient leaves `params` and `state` untouched.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(shape_err!(
            "{} parameter arrays, {} gradients, {} moment arrays",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(shape_err!("array {i}: parameter {} vs gradient {}", p.len(), g.len()));
        }
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteGradient {
            step: (state.step_count + 1) as usize,
        });
    }

    state.step_count += 1;
    let h = state.hyper;
    let t = state.step_count;
    let correct1 = 1.0 - math::powi(h.beta1, t);
    let correct2 = 1.0 - math::powi(h.beta2, t);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        for (((w, &gi), mi), vi) in p.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = h.beta1 * *mi + (1.0 - h.beta1) * gi;
            *vi = h.beta2 * *vi + (1.0 - h.beta2) * gi * gi;
            let m_hat = *mi / correct1;
            let v_hat = *vi / correct2;
            *w -= h.lr * m_hat / (math::sqrt(v_hat) + h.epsilon);
        }
    }
    Ok(())
}
