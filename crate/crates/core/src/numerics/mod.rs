// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense linear algebra, random streams and first-order optimization.

pub mod adam;
pub mod logistic;
pub mod matrix;
pub mod pca;
pub mod rng;

pub use adam::{adam_step, AdamState};
pub use logistic::{fit_logistic, fit_logistic_early_stopping, sigmoid, LogisticFit, LogisticModel, LogisticOptions, Standardizer};
pub use matrix::{matmul, Matrix};
pub use pca::{pca, Pca};
pub use rng::{Rng, RngSeed};
