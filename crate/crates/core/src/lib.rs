// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod checkpoint;
pub mod datasim;
pub mod error;
pub mod experiment;
pub mod featselect;
pub mod io;
pub mod labeling;
pub mod numerics;
pub mod predictor;
pub mod sae;
pub mod stats;
pub mod steering;
pub mod svg;
pub mod tinylm;

pub use error::{Error, Result};
