//! Low-rank compression of small feedforward networks.
//!
//! The crate is organized bottom-up:
//!
//! * [`linalg`]: dense matrices, Jacobi SVD, truncation and the rank proximal operator.
//! * [`infogeo`]: categorical KL, Bregman divergences, m-projections and the
//!   quadratic KL expansion check.
//! * [`net`]: dense and factorized layers, exact gradients, compilation.
//! * [`fisher`]: diagonal Fisher estimates and activation statistics.
//! * [`compress`]: one-shot projections and rank-selection rules.
//! * [`trainers`]: thresholding-during-training loops and their telemetry.
//! * [`harness`]: configuration, synthetic tasks, checkpoints, sweeps and reports.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod random;

pub mod compress;
pub mod fisher;
pub mod infogeo;
pub mod linalg;
pub mod net;
pub mod trainers;

pub mod harness;

pub use error::{Error, Result};
pub use linalg::{Matrix, SvdResult};
pub use net::{
    Activation, Dataset, FactorizedLayer, Layer, LossFamily, Network, ParamVec, Targets,
};
