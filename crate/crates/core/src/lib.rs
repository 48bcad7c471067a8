//! Numerical laboratory for Poisson variational autoencoders.
//!
//! The crate is organised bottom-up:
//!
//! - [`numkit`]: dense matrices, counter-based random streams, special functions.
//! - [`dists`]: exact and relaxed Poisson sampling, Gaussian/Laplace
//!   reparameterization and closed-form KL divergences.
//! - [`models`]: linear-decoder VAEs (Poisson, Gaussian, Laplace) with exact,
//!   Monte-Carlo and straight-through loss/gradient paths.
//! - [`sparsecode`]: ISTA / LCA inference and dictionary learning.
//! - [`train`]: AdaMax, schedules and the minibatch training loop.
//! - [`data`]: MNIST IDX ingestion, whitened patches, synthetic sparse data and
//!   the `PVLB` cache format.
//! - [`metrics`]: lifetime sparsity, dead-neuron detection, KNN, logistic
//!   regression, shattering dimensionality and percent-drop tables.
//! - [`config`] and [`experiment`]: run descriptions and the drivers shared by
//!   the command-line front end and the acceptance suite.

// `!(x > 0.0)` checks deliberately reject NaN; index loops mirror the math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dists;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod models;
pub mod numkit;
pub mod sparsecode;
pub mod train;

pub use error::{Error, Result};
pub use numkit::{Matrix, RngStream};
