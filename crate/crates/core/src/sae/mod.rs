// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over residual-stream vectors.
//!
//! `z = relu(W_e x + b_e)`, `x̂ = W_d z + b_d`, trained on
//! `mean_batch(‖x − x̂‖² + λ‖z‖₁)`.

mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use train::{dead_features, metrics_csv, select_lambda, sweep_lambda, train_sae, SaeTrainReport, SweepPoint};

use crate::checkpoint::TensorFile;
use crate::error::{Error, Result};
use crate::numerics::matrix::{gemm, gemm_a_bt, gemm_at_b};
use crate::numerics::{Matrix, Rng, RngSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// λ, weight of the L1 penalty.
    pub sparsity_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: RngSeed,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            input_dim: 32,
            latent_dim: 256,
            sparsity_weight: 0.1,
            learning_rate: 1e-3,
            epochs: 20,
            batch_size: 64,
            seed: RngSeed(0),
        }
    }
}

impl SaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent_dim == 0 {
            return Err(Error::Config("input_dim and latent_dim must be positive".into()));
        }
        if !(self.sparsity_weight >= 0.0 && self.sparsity_weight.is_finite()) {
            return Err(Error::Config(format!("sparsity_weight must be finite and >= 0, got {}", self.sparsity_weight)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Non-negative code for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseCode {
    pub z: Vec<f64>,
}

impl SparseCode {
    pub fn zeros(k: usize) -> Self {
        Self { z: vec![0.0; k] }
    }

    /// One-hot code with value `s` at `j`.
    pub fn basis(k: usize, j: usize, s: f64) -> Self {
        let mut z = vec![0.0; k];
        z[j] = s;
        Self { z }
    }

    pub fn l0(&self) -> usize {
        self.z.iter().filter(|v| **v > 0.0).count()
    }

    pub fn l1(&self) -> f64 {
        self.z.iter().map(|v| v.abs()).sum()
    }
}

/// Batch statistics. `reconstruction_mse` is the squared error summed over
/// coordinates and averaged over the batch, so `loss == mse + λ·l1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaeMetrics {
    pub reconstruction_mse: f64,
    pub mean_l0: f64,
    pub mean_l1: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradients {
    pub w_enc: Matrix,
    pub b_enc: Matrix,
    pub w_dec: Matrix,
    pub b_dec: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sae {
    pub config: SaeConfig,
    /// `k × d`
    pub w_enc: Matrix,
    /// `1 × k`
    pub b_enc: Matrix,
    /// `d × k`
    pub w_dec: Matrix,
    /// `1 × d`
    pub b_dec: Matrix,
}

pub(crate) struct BatchPass {
    pub pre: Vec<f64>,
    pub z: Vec<f64>,
    pub recon: Vec<f64>,
}

impl Sae {
    /// Decoder columns are random unit vectors, `W_e = W_dᵀ`, biases zero.
    pub fn init(config: SaeConfig) -> Result<Self> {
        config.validate()?;
        let (d, k) = (config.input_dim, config.latent_dim);
        let mut rng = Rng::new(config.seed.derive_str("sae-init"));
        let mut w_enc = Matrix::zeros(k, d);
        for j in 0..k {
            w_enc.row_mut(j).copy_from_slice(&rng.unit_vector(d));
        }
        let w_dec = w_enc.transpose();
        Ok(Self {
            w_enc,
            b_enc: Matrix::zeros(1, k),
            w_dec,
            b_dec: Matrix::zeros(1, d),
            config,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn encode(&self, x: &[f64]) -> Result<SparseCode> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("encode", format!("input has length {}, expected {}", x.len(), self.input_dim())));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "encode input", index: i });
        }
        let mut pre = vec![0.0; self.latent_dim()];
        gemm_a_bt(x, self.w_enc.data(), &mut pre, 1, self.input_dim(), self.latent_dim());
        let z = pre
            .iter()
            .zip(self.b_enc.data())
            .map(|(p, b)| (p + b).max(0.0))
            .collect();
        Ok(SparseCode { z })
    }

    pub fn decode(&self, code: &SparseCode) -> Result<Vec<f64>> {
        if code.z.len() != self.latent_dim() {
            return Err(Error::shape("decode", format!("code has length {}, expected {}", code.z.len(), self.latent_dim())));
        }
        let mut out = self.b_dec.data().to_vec();
        gemm_a_bt(&code.z, self.w_dec.data(), &mut out, 1, self.latent_dim(), self.input_dim());
        Ok(out)
    }

    /// Encodes every row of `x` (`n × d`) into an `n × k` code matrix.
    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.check_batch(x, "encode_batch")?;
        let pass = self.pass(x, false);
        Matrix::from_vec(x.rows(), self.latent_dim(), pass.z)
    }

    fn check_batch(&self, x: &Matrix, op: &'static str) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(op, format!("batch has {} columns, expected {}", x.cols(), self.input_dim())));
        }
        if let Some(i) = x.first_non_finite() {
            return Err(Error::NonFinite { what: "SAE batch", index: i });
        }
        Ok(())
    }

    pub(crate) fn pass(&self, x: &Matrix, with_recon: bool) -> BatchPass {
        let (n, d, k) = (x.rows(), self.input_dim(), self.latent_dim());
        let mut pre = vec![0.0; n * k];
        gemm_a_bt(x.data(), self.w_enc.data(), &mut pre, n, d, k);
        for row in pre.chunks_mut(k) {
            for (p, b) in row.iter_mut().zip(self.b_enc.data()) {
                *p += b;
            }
        }
        let z: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
        let recon = if with_recon {
            let mut recon = Vec::with_capacity(n * d);
            for _ in 0..n {
                recon.extend_from_slice(self.b_dec.data());
            }
            let w_dec_t = self.w_dec.transpose();
            gemm(&z, w_dec_t.data(), &mut recon, n, k, d);
            recon
        } else {
            Vec::new()
        };
        BatchPass { pre, z, recon }
    }

    pub fn loss(&self, batch: &Matrix) -> Result<SaeMetrics> {
        self.check_batch(batch, "sae_loss")?;
        if batch.rows() == 0 {
            return Err(Error::invalid("sae_loss needs a nonempty batch"));
        }
        let pass = self.pass(batch, true);
        Ok(self.metrics_from(batch, &pass))
    }

    fn metrics_from(&self, x: &Matrix, pass: &BatchPass) -> SaeMetrics {
        let n = x.rows() as f64;
        let sq: f64 = x.data().iter().zip(&pass.recon).map(|(a, b)| (a - b) * (a - b)).sum();
        let l1: f64 = pass.z.iter().sum();
        let l0 = pass.z.iter().filter(|v| **v > 0.0).count() as f64;
        let mse = sq / n;
        let mean_l1 = l1 / n;
        SaeMetrics {
            reconstruction_mse: mse,
            mean_l0: l0 / n,
            mean_l1,
            loss: mse + self.config.sparsity_weight * mean_l1,
        }
    }

    /// Gradients of the batch loss. The L1 term contributes `λ/B` per active
    /// code entry; inactive entries get nothing from either term.
    pub fn gradients(&self, batch: &Matrix) -> Result<(SaeMetrics, SaeGradients)> {
        self.check_batch(batch, "sae_gradients")?;
        if batch.rows() == 0 {
            return Err(Error::invalid("sae_gradients needs a nonempty batch"));
        }
        let pass = self.pass(batch, true);
        let metrics = self.metrics_from(batch, &pass);
        let (n, d, k) = (batch.rows(), self.input_dim(), self.latent_dim());
        let inv = 1.0 / n as f64;
        let lambda = self.config.sparsity_weight;

        let drecon: Vec<f64> = pass.recon.iter().zip(batch.data()).map(|(r, x)| 2.0 * (r - x) * inv).collect();
        let mut w_dec = vec![0.0; d * k];
        gemm_at_b(&drecon, &pass.z, &mut w_dec, n, d, k);
        let mut b_dec = vec![0.0; d];
        for row in drecon.chunks(d) {
            for (g, v) in b_dec.iter_mut().zip(row) {
                *g += v;
            }
        }

        let mut dz = vec![0.0; n * k];
        gemm(&drecon, self.w_dec.data(), &mut dz, n, d, k);
        for (g, p) in dz.iter_mut().zip(&pass.pre) {
            if *p > 0.0 {
                *g += lambda * inv;
            } else {
                *g = 0.0;
            }
        }
        let mut w_enc = vec![0.0; k * d];
        gemm_at_b(&dz, batch.data(), &mut w_enc, n, k, d);
        let mut b_enc = vec![0.0; k];
        for row in dz.chunks(k) {
            for (g, v) in b_enc.iter_mut().zip(row) {
                *g += v;
            }
        }
        Ok((
            metrics,
            SaeGradients {
                w_enc: Matrix::from_vec(k, d, w_enc)?,
                b_enc: Matrix::from_vec(1, k, b_enc)?,
                w_dec: Matrix::from_vec(d, k, w_dec)?,
                b_dec: Matrix::from_vec(1, d, b_dec)?,
            },
        ))
    }

    /// Rescales decoder columns to unit norm and compensates in the encoder
    /// so that `W_d z` is unchanged. Zero columns are left alone.
    pub fn normalize_decoder(&mut self) {
        let (d, k) = (self.input_dim(), self.latent_dim());
        for j in 0..k {
            let norm = (0..d).map(|i| self.w_dec.get(i, j).powi(2)).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                continue;
            }
            for i in 0..d {
                let v = self.w_dec.get(i, j) / norm;
                self.w_dec.set(i, j, v);
            }
            for v in self.w_enc.row_mut(j) {
                *v *= norm;
            }
            self.b_enc.data_mut()[j] *= norm;
        }
    }

    /// Column `j` of `W_d`.
    pub fn decoder_column(&self, j: usize) -> Result<Vec<f64>> {
        if j >= self.latent_dim() {
            return Err(Error::invalid(format!("feature {j} out of range for {} latents", self.latent_dim())));
        }
        Ok(self.w_dec.column(j))
    }

    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        vec![
            ("w_enc".to_string(), &self.w_enc),
            ("b_enc".to_string(), &self.b_enc),
            ("w_dec".to_string(), &self.w_dec),
            ("b_dec".to_string(), &self.b_dec),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.w_enc, &mut self.b_enc, &mut self.w_dec, &mut self.b_dec]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(&self.config)?;
        TensorFile::new("sae", config, self.named_tensors()).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path, "sae")?;
        let config: SaeConfig = serde_json::from_value(file.config.clone())?;
        config.validate()?;
        let (d, k) = (config.input_dim, config.latent_dim);
        let mut sae = Sae {
            w_enc: Matrix::zeros(k, d),
            b_enc: Matrix::zeros(1, k),
            w_dec: Matrix::zeros(d, k),
            b_dec: Matrix::zeros(1, d),
            config,
        };
        let names: Vec<String> = sae.named_tensors().into_iter().map(|(n, _)| n).collect();
        file.fill(&names, sae.tensors_mut())?;
        Ok(sae)
    }
}

/// Greedy one-to-one matching of true dictionary columns (`d × K`) to
/// learned decoder columns by absolute cosine. Returns the per-atom cosines
/// in true-column order.
pub fn match_dictionary(truth: &Matrix, learned: &Matrix) -> Result<Vec<f64>> {
    if truth.rows() != learned.rows() {
        return Err(Error::shape("match_dictionary", format!("{} vs {} rows", truth.rows(), learned.rows())));
    }
    let unit = |m: &Matrix, j: usize| {
        let c = m.column(j);
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.into_iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect::<Vec<f64>>()
    };
    let tc: Vec<Vec<f64>> = (0..truth.cols()).map(|j| unit(truth, j)).collect();
    let lc: Vec<Vec<f64>> = (0..learned.cols()).map(|j| unit(learned, j)).collect();
    let mut pairs = Vec::with_capacity(tc.len() * lc.len());
    for (a, t) in tc.iter().enumerate() {
        for (b, l) in lc.iter().enumerate() {
            let c: f64 = t.iter().zip(l).map(|(x, y)| x * y).sum();
            pairs.push((c, a, b));
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out = vec![0.0; tc.len()];
    let mut used_t = vec![false; tc.len()];
    let mut used_l = vec![false; lc.len()];
    for (c, a, b) in pairs {
        if !used_t[a] && !used_l[b] {
            used_t[a] = true;
            used_l[b] = true;
            out[a] = c;
        }
    }
    Ok(out)
}
