// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned JSON tensor container used for model and SAE checkpoints.
//!
//! ```text
//! {
//!   "format": "saelab-tensors",
//!   "version": 1,
//!   "kind": "tinylm" | "sae",
//!   "config": { ... },
//!   "tensors": [ { "name": "...", "rows": r, "cols": c, "data": [ ... ] }, ... ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so save/load is lossless.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FORMAT: &str = "saelab-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFile {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new(kind: &str, config: serde_json::Value, tensors: Vec<(String, &Matrix)>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            kind: kind.to_string(),
            config,
            tensors: tensors
                .into_iter()
                .map(|(name, m)| NamedTensor {
                    name,
                    rows: m.rows(),
                    cols: m.cols(),
                    data: m.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn read(path: &Path, expected_kind: &str) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let file: TensorFile = serde_json::from_str(&text)?;
        if file.format != FORMAT {
            return Err(Error::Format(format!("not a {FORMAT} file: format = {:?}", file.format)));
        }
        if file.version != VERSION {
            return Err(Error::Format(format!("unsupported version {}", file.version)));
        }
        if file.kind != expected_kind {
            return Err(Error::Format(format!("expected a {expected_kind} checkpoint, found {}", file.kind)));
        }
        Ok(file)
    }

    /// Copies stored tensors into `targets`, which must match by name,
    /// order and shape.
    pub fn fill(&self, names: &[String], targets: Vec<&mut Matrix>) -> Result<()> {
        if self.tensors.len() != targets.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                targets.len()
            )));
        }
        for ((stored, name), target) in self.tensors.iter().zip(names).zip(targets) {
            if &stored.name != name || stored.rows != target.rows() || stored.cols != target.cols() {
                return Err(Error::Format(format!(
                    "tensor {} ({}x{}) does not match expected {} ({}x{})",
                    stored.name,
                    stored.rows,
                    stored.cols,
                    name,
                    target.rows(),
                    target.cols()
                )));
            }
            *target = Matrix::from_vec(stored.rows, stored.cols, stored.data.clone())?;
        }
        Ok(())
    }
}
