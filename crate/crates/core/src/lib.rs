//! Gaussian mean-field variational inference for dense Bayesian neural
//! networks, with the k-tied Normal posterior family.
//!
//! A k-tied Normal posterior keeps one mean per weight but ties the
//! per-weight standard deviations of an `m x n` kernel through a rank-`k`
//! product of positive factors, `sigma = U V^T`, so a layer carries
//! `mn + k(m + n)` variational parameters instead of `2mn`.
//!
//! The crate is `no_std` (it needs `alloc`) and does no I/O. It covers:
//!
//! - [`linalg`]: dense matrices and a one-sided Jacobi SVD
//! - [`rng`]: the seeded normal generator every stochastic path draws from
//! - [`variational`]: mean-field and k-tied layer posteriors, prior, KL
//! - [`model`]: the MLP, its stochastic forward pass and exact gradients
//! - [`optim`], [`schedule`], [`snr`], [`train`]: the training engine
//! - [`analysis`]: singular-value spectra, post-training compression
//! - [`metrics`]: ensemble prediction, NLL, accuracy, Brier, ECE, -ELBO
//! - [`data`]: in-memory datasets, splits and synthetic blobs

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod analysis;
pub mod data;
mod error;
pub mod linalg;
pub(crate) mod math;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod snr;
pub mod train;
pub mod variational;

pub use error::{Error, Result};
pub use linalg::{low_rank_reconstruct, svd, DenseMatrix, SvdResult};
pub use rng::SeededRng;
