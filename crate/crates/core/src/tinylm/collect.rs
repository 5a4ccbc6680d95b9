// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream datasets with provenance, and token sampling.

use serde::{Deserialize, Serialize};

use super::model::{TapPoint, TinyLm};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Where a residual vector came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub sequence: usize,
    pub position: usize,
}

/// One residual vector per recorded `(sequence, position)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualDataset {
    pub tap: TapPoint,
    /// `n × d`, row `i` belongs to `provenance[i]`.
    pub vectors: Matrix,
    pub provenance: Vec<Provenance>,
}

impl ResidualDataset {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Collects `r^(tap)` at every position of every sequence.
pub fn collect_residuals(model: &TinyLm, corpus: &[Vec<u32>], tap: TapPoint) -> Result<ResidualDataset> {
    collect_residuals_filtered(model, corpus, tap, |_, _| true)
}

/// Like [`collect_residuals`] but keeps only positions accepted by
/// `keep(sequence_index, position)`.
pub fn collect_residuals_filtered(
    model: &TinyLm,
    corpus: &[Vec<u32>],
    tap: TapPoint,
    keep: impl Fn(usize, usize) -> bool,
) -> Result<ResidualDataset> {
    if tap.0 > model.config.num_layers {
        return Err(Error::invalid(format!("tap {} out of range", tap.0)));
    }
    let d = model.config.hidden_dim;
    let mut data = Vec::new();
    let mut provenance = Vec::new();
    for (s, seq) in corpus.iter().enumerate() {
        let trace = model.forward(seq)?;
        let stream = &trace.residuals[tap.0];
        for p in 0..seq.len() {
            if keep(s, p) {
                data.extend_from_slice(stream.row(p));
                provenance.push(Provenance { sequence: s, position: p });
            }
        }
    }
    Ok(ResidualDataset {
        tap,
        vectors: Matrix::from_vec(provenance.len(), d, data)?,
        provenance,
    })
}

/// How to pick the next token from a distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Decoding {
    /// Highest probability, lowest token id on ties.
    Greedy,
    Temperature { temperature: f64 },
}

pub fn sample_token(distribution: &[f64], decoding: Decoding, rng: &mut Rng) -> u32 {
    match decoding {
        Decoding::Greedy => argmax(distribution) as u32,
        Decoding::Temperature { temperature } => {
            if temperature <= 0.0 {
                return argmax(distribution) as u32;
            }
            let inv = 1.0 / temperature;
            let weights: Vec<f64> = distribution.iter().map(|p| p.max(0.0).powf(inv)).collect();
            rng.categorical(&weights) as u32
        }
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Autoregressive generation of `n` tokens. When `injection` is set, the
/// delta is added at its tap to every position on every step.
pub fn generate(
    model: &TinyLm,
    prompt: &[u32],
    n: usize,
    decoding: Decoding,
    injection: Option<(TapPoint, &[f64])>,
    rng: &mut Rng,
) -> Result<Vec<u32>> {
    let mut seq = prompt.to_vec();
    for _ in 0..n {
        let trace = match injection {
            Some((tap, delta)) => model.forward_with_injection(&seq, tap, delta)?,
            None => model.forward(&seq)?,
        };
        seq.push(sample_token(&trace.distribution, decoding, rng));
    }
    Ok(seq[prompt.len()..].to_vec())
}
