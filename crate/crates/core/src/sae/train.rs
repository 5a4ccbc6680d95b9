// SPDX-License-Identifier: MIT OR Apache-2.0

//! SAE training loop, λ sweep and reporting helpers.

use serde::{Deserialize, Serialize};

use super::{Sae, SaeConfig, SaeMetrics};
use crate::error::{Error, Result};
use crate::io::{fmt_f, CsvBuilder};
use crate::numerics::{adam_step, AdamState, Matrix, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainReport {
    /// Full-dataset metrics before training (index 0) and after each epoch.
    pub history: Vec<SaeMetrics>,
    /// Features with no positive activation anywhere in the dataset after
    /// the final epoch. Flagged, never resampled.
    pub dead_features: Vec<usize>,
}

/// Trains a fresh SAE on the rows of `data`.
pub fn train_sae(config: SaeConfig, data: &Matrix) -> Result<(Sae, SaeTrainReport)> {
    config.validate()?;
    if data.cols() != config.input_dim {
        return Err(Error::shape("train_sae", format!("data has {} columns, config says {}", data.cols(), config.input_dim)));
    }
    if data.rows() < config.batch_size {
        return Err(Error::invalid(format!(
            "dataset has {} rows, fewer than batch size {}",
            data.rows(),
            config.batch_size
        )));
    }
    if let Some(i) = data.first_non_finite() {
        return Err(Error::NonFinite { what: "SAE training data", index: i });
    }

    let mut sae = Sae::init(config.clone())?;
    let initial = sae.loss(data)?;
    let mut history = vec![initial];
    let mut states: Vec<AdamState> = sae.named_tensors().iter().map(|(_, t)| AdamState::for_param(t)).collect();
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut blown = 0;

    for epoch in 0..config.epochs {
        let mut rng = Rng::new(config.seed.derive_path(&[0x5ae, epoch as u64]));
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select_rows(chunk);
            let (_, g) = sae.gradients(&batch)?;
            let grads = [&g.w_enc, &g.b_enc, &g.w_dec, &g.b_dec];
            for ((p, g), st) in sae.tensors_mut().into_iter().zip(grads).zip(states.iter_mut()) {
                adam_step(p, g, st, config.learning_rate)?;
            }
            sae.normalize_decoder();
        }
        let m = sae.loss(data)?;
        history.push(m);
        if !m.loss.is_finite() || m.loss > 10.0 * initial.loss {
            blown += 1;
            if blown >= 3 {
                return Err(Error::Divergence(format!(
                    "SAE loss {:.4} above 10x initial {:.4} for 3 consecutive epochs (epoch {epoch})",
                    m.loss, initial.loss
                )));
            }
        } else {
            blown = 0;
        }
    }
    let dead = dead_features(&sae, data)?;
    Ok((sae, SaeTrainReport { history, dead_features: dead }))
}

/// Latents that never activate on any row of `data`.
pub fn dead_features(sae: &Sae, data: &Matrix) -> Result<Vec<usize>> {
    let codes = sae.encode_batch(data)?;
    let k = sae.latent_dim();
    let mut alive = vec![false; k];
    for r in 0..codes.rows() {
        for (a, v) in alive.iter_mut().zip(codes.row(r)) {
            *a |= *v > 0.0;
        }
    }
    Ok((0..k).filter(|j| !alive[*j]).collect())
}

/// `epoch, mse, l1, l0, loss`; epoch 0 is the untrained model.
pub fn metrics_csv(history: &[SaeMetrics]) -> String {
    let mut b = CsvBuilder::new(&["epoch", "mse", "l1", "l0", "loss"]);
    for (e, m) in history.iter().enumerate() {
        b.row(vec![
            e.to_string(),
            fmt_f(m.reconstruction_mse),
            fmt_f(m.mean_l1),
            fmt_f(m.mean_l0),
            fmt_f(m.loss),
        ]);
    }
    b.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub sparsity_weight: f64,
    pub metrics: SaeMetrics,
    /// Reconstruction error relative to the total variance of the data.
    pub fraction_unexplained: f64,
    pub dead_features: usize,
}

/// Trains one SAE per λ on the same data and seed.
pub fn sweep_lambda(base: &SaeConfig, data: &Matrix, lambdas: &[f64]) -> Result<Vec<SweepPoint>> {
    let means = data.column_means();
    let n = data.rows().max(1) as f64;
    let total: f64 = (0..data.rows())
        .map(|r| data.row(r).iter().zip(&means).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum::<f64>()
        / n;
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = SaeConfig {
                sparsity_weight: lambda,
                ..base.clone()
            };
            let (_, rep) = train_sae(cfg, data)?;
            let m = *rep.history.last().expect("history has the initial entry");
            Ok(SweepPoint {
                sparsity_weight: lambda,
                metrics: m,
                fraction_unexplained: if total > 0.0 { m.reconstruction_mse / total } else { 0.0 },
                dead_features: rep.dead_features.len(),
            })
        })
        .collect()
}

/// Largest λ whose fraction of unexplained variance stays at or below
/// `max_unexplained`; falls back to the smallest λ in the sweep.
pub fn select_lambda(points: &[SweepPoint], max_unexplained: f64) -> Option<f64> {
    points
        .iter()
        .filter(|p| p.fraction_unexplained <= max_unexplained)
        .map(|p| p.sparsity_weight)
        .max_by(f64::total_cmp)
        .or_else(|| points.iter().map(|p| p.sparsity_weight).min_by(f64::total_cmp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngSeed;

    fn blob_data(n: usize) -> Matrix {
        let mut rng = Rng::new(RngSeed(21));
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = rng.below(3);
                (0..4).map(|i| if i == c { 1.0 + 0.1 * rng.normal() } else { 0.05 * rng.normal() }).collect()
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn cfg(epochs: usize) -> SaeConfig {
        SaeConfig {
            input_dim: 4,
            latent_dim: 8,
            sparsity_weight: 0.05,
            learning_rate: 1e-2,
            epochs,
            batch_size: 16,
            seed: RngSeed(2),
        }
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = blob_data(64);
        let (s, rep) = train_sae(cfg(0), &data).unwrap();
        assert_eq!(s, Sae::init(cfg(0)).unwrap());
        assert_eq!(rep.history.len(), 1);
    }

    #[test]
    fn loss_goes_down() {
        let data = blob_data(256);
        let (_, rep) = train_sae(cfg(10), &data).unwrap();
        assert_eq!(rep.history.len(), 11);
        assert!(rep.history.last().unwrap().loss <= rep.history[0].loss);
    }

    #[test]
    fn too_small_dataset_rejected() {
        let data = blob_data(8);
        assert!(matches!(train_sae(cfg(1), &data), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let data = blob_data(64).scale(1e3);
        let c = SaeConfig {
            learning_rate: 1e4,
            sparsity_weight: 0.0,
            epochs: 8,
            ..cfg(8)
        };
        match train_sae(c, &data) {
            Err(Error::Divergence(_)) | Err(Error::NonFinite { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1.history)),
        }
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let data = blob_data(64);
        let (_, rep) = train_sae(cfg(2), &data).unwrap();
        let csv = metrics_csv(&rep.history);
        let rows = crate::io::parse_csv(&csv).unwrap();
        assert_eq!(rows[0], vec!["epoch", "mse", "l1", "l0", "loss"]);
        assert_eq!(rows.len(), 4);
    }

    #[test]
    fn select_lambda_prefers_sparsest_acceptable() {
        let m = SaeMetrics {
            reconstruction_mse: 0.0,
            mean_l0: 0.0,
            mean_l1: 0.0,
            loss: 0.0,
        };
        let pts: Vec<SweepPoint> = [(0.0, 0.01), (0.1, 0.05), (1.0, 0.5)]
            .iter()
            .map(|&(l, f)| SweepPoint {
                sparsity_weight: l,
                metrics: m,
                fraction_unexplained: f,
                dead_features: 0,
            })
            .collect();
        assert_eq!(select_lambda(&pts, 0.1), Some(0.1));
        assert_eq!(select_lambda(&pts, 0.001), Some(0.0));
    }
}
