// SPDX-License-Identifier: MIT OR Apache-2.0

//! Direct sparse-dictionary generator `x = D·s + ε` for SAE recovery tests.

use serde::{Deserialize, Serialize};

use super::{concept_map, GroundTruth};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng, RngSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedDictionarySpec {
    pub dim: usize,
    pub atoms: usize,
    /// Expected number of active atoms per sample.
    pub expected_active: f64,
    pub magnitude_min: f64,
    pub magnitude_max: f64,
    pub noise_scale: f64,
    pub seed: RngSeed,
}

impl Default for PlantedDictionarySpec {
    fn default() -> Self {
        Self {
            dim: 32,
            atoms: 16,
            expected_active: 3.0,
            magnitude_min: 0.5,
            magnitude_max: 1.5,
            noise_scale: 0.05,
            seed: RngSeed(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedResiduals {
    /// `size × dim`
    pub vectors: Matrix,
    /// `size × atoms`, non-negative.
    pub codes: Matrix,
    pub truth: GroundTruth,
}

/// `D · s` for a single code.
pub fn compose(dictionary: &Matrix, code: &[f64]) -> Result<Vec<f64>> {
    if code.len() != dictionary.cols() {
        return Err(Error::shape("compose", format!("code length {} vs {} atoms", code.len(), dictionary.cols())));
    }
    Ok((0..dictionary.rows())
        .map(|i| dictionary.row(i).iter().zip(code).map(|(a, b)| a * b).sum())
        .collect())
}

pub fn generate_residual_dataset(spec: &PlantedDictionarySpec, size: usize) -> Result<PlantedResiduals> {
    if size == 0 || spec.dim == 0 || spec.atoms == 0 {
        return Err(Error::invalid("size, dim and atoms must be positive"));
    }
    if !(0.0..=spec.atoms as f64).contains(&spec.expected_active) || spec.magnitude_min > spec.magnitude_max || spec.noise_scale < 0.0 {
        return Err(Error::Config("inconsistent planted dictionary spec".into()));
    }
    let mut rng = Rng::new(spec.seed.derive_str("planted-dictionary"));
    let mut dict = Matrix::zeros(spec.dim, spec.atoms);
    for j in 0..spec.atoms {
        for (i, v) in rng.unit_vector(spec.dim).into_iter().enumerate() {
            dict.set(i, j, v);
        }
    }
    let p = spec.expected_active / spec.atoms as f64;
    let mut codes = Matrix::zeros(size, spec.atoms);
    let mut vectors = Matrix::zeros(size, spec.dim);
    for r in 0..size {
        for j in 0..spec.atoms {
            if rng.bernoulli(p) {
                codes.set(r, j, rng.uniform_range(spec.magnitude_min, spec.magnitude_max));
            }
        }
        let x = compose(&dict, codes.row(r))?;
        for (i, v) in x.into_iter().enumerate() {
            vectors.set(r, i, v + spec.noise_scale * rng.normal());
        }
    }
    Ok(PlantedResiduals {
        vectors,
        codes,
        truth: GroundTruth {
            dictionary: Some(dict),
            latent_sentiment: Vec::new(),
            hedged: Vec::new(),
            concepts: concept_map(),
            beta: 0.0,
        },
    })
}
