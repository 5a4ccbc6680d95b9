// SPDX-License-Identifier: MIT OR Apache-2.0

//! Next-token training loop.

use serde::{Deserialize, Serialize};

use super::grad::sequence_loss_grad;
use super::model::{LmParams, TinyLm, TinyLmConfig};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, AdamState, Rng, RngSeed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of sequences held out for evaluation.
    pub holdout_fraction: f64,
    /// Loss weight on predicting the final token of each sequence (the
    /// answer slot of prompt-style sequences); other positions weigh 1.
    pub final_token_weight: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    pub seed: RngSeed,
}

impl Default for LmTrainOptions {
    fn default() -> Self {
        Self {
            epochs: 8,
            learning_rate: 3e-3,
            batch_size: 32,
            holdout_fraction: 0.1,
            final_token_weight: 1.0,
            grad_clip: 1.0,
            seed: RngSeed(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    /// Mean per-token train cross-entropy for each epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out per-token cross-entropy before and after training.
    pub initial_heldout_loss: f64,
    pub heldout_loss: f64,
    /// `ln V`, the loss of the uniform predictor.
    pub uniform_baseline: f64,
    pub train_sequences: usize,
    pub heldout_sequences: usize,
}

/// Unweighted mean per-token cross-entropy over `corpus`.
pub fn mean_token_loss(model: &TinyLm, corpus: &[&[u32]]) -> f64 {
    let mut loss = 0.0;
    let mut count = 0usize;
    for seq in corpus {
        if seq.len() < 2 {
            continue;
        }
        let w = vec![1.0; seq.len() - 1];
        loss += sequence_loss_grad(model, seq, &w, None);
        count += seq.len() - 1;
    }
    if count == 0 {
        0.0
    } else {
        loss / count as f64
    }
}

fn weights_for(seq: &[u32], final_weight: f64) -> Vec<f64> {
    let mut w = vec![1.0; seq.len() - 1];
    if let Some(last) = w.last_mut() {
        *last = final_weight;
    }
    w
}

/// Trains a fresh model on `corpus`.
///
/// Aborts with [`Error::Divergence`] if the epoch loss exceeds ten times the
/// initial held-out loss for three consecutive epochs.
pub fn train_lm(config: TinyLmConfig, corpus: &[Vec<u32>], opts: &LmTrainOptions) -> Result<(TinyLm, LmTrainReport)> {
    let model = TinyLm::init(config)?;
    train_from(model, corpus, opts)
}

/// Continues training an existing model.
pub fn train_from(mut model: TinyLm, corpus: &[Vec<u32>], opts: &LmTrainOptions) -> Result<(TinyLm, LmTrainReport)> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    for seq in corpus {
        model.check_tokens(seq)?;
    }
    if opts.batch_size == 0 || !(0.0..1.0).contains(&opts.holdout_fraction) {
        return Err(Error::Config("batch_size must be positive and holdout_fraction in [0, 1)".into()));
    }

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = Rng::new(opts.seed.derive_str("lm-split"));
    rng.shuffle(&mut order);
    let n_hold = ((corpus.len() as f64) * opts.holdout_fraction).round() as usize;
    let n_hold = n_hold.min(corpus.len().saturating_sub(1));
    let (held_idx, train_idx) = order.split_at(n_hold);
    let held: Vec<&[u32]> = held_idx.iter().map(|&i| corpus[i].as_slice()).collect();
    let mut train_idx: Vec<usize> = train_idx.iter().copied().filter(|&i| corpus[i].len() >= 2).collect();
    let eval_set: Vec<&[u32]> = if held.is_empty() {
        train_idx.iter().map(|&i| corpus[i].as_slice()).collect()
    } else {
        held.clone()
    };

    let initial = mean_token_loss(&model, &eval_set);
    let mut states: Vec<AdamState> = model.params.named_tensors().iter().map(|(_, t)| AdamState::for_param(t)).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut blown = 0;

    for epoch in 0..opts.epochs {
        let mut erng = Rng::new(opts.seed.derive_path(&[0x1e, epoch as u64]));
        erng.shuffle(&mut train_idx);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for batch in train_idx.chunks(opts.batch_size) {
            let mut grads = LmParams::zeros(&model.config);
            let mut wsum = 0.0;
            for &i in batch {
                let seq = &corpus[i];
                let w = weights_for(seq, opts.final_token_weight);
                wsum += w.iter().sum::<f64>();
                let l = sequence_loss_grad(&model, seq, &w, Some(&mut grads));
                total += l;
                tokens += seq.len() - 1;
            }
            if wsum <= 0.0 {
                continue;
            }
            grads.scale(1.0 / wsum);
            let norm = grads
                .named_tensors()
                .iter()
                .map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient norm in epoch {epoch}")));
            }
            if norm > opts.grad_clip {
                grads.scale(opts.grad_clip / norm);
            }
            let gnamed = grads.named_tensors();
            for ((p, (_, g)), st) in model.params.tensors_mut().into_iter().zip(gnamed).zip(states.iter_mut()) {
                adam_step(p, g, st, opts.learning_rate)?;
            }
        }
        let epoch_loss = if tokens > 0 { total / tokens as f64 } else { 0.0 };
        epoch_losses.push(epoch_loss);
        if !epoch_loss.is_finite() || epoch_loss > 10.0 * initial {
            blown += 1;
            if blown >= 3 {
                return Err(Error::Divergence(format!(
                    "epoch loss {epoch_loss:.4} above 10x initial {initial:.4} for 3 consecutive epochs (epoch {epoch})"
                )));
            }
        } else {
            blown = 0;
        }
    }

    let heldout_loss = mean_token_loss(&model, &eval_set);
    let report = LmTrainReport {
        epoch_losses,
        initial_heldout_loss: initial,
        heldout_loss,
        uniform_baseline: (model.config.vocab_size as f64).ln(),
        train_sequences: train_idx.len(),
        heldout_sequences: held.len(),
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TinyLmConfig {
        TinyLmConfig {
            vocab_size: 8,
            hidden_dim: 8,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 8,
            mlp_ratio: 2,
            seed: RngSeed(1),
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let corpus = vec![vec![1, 2, 3]];
        let opts = LmTrainOptions { epochs: 0, ..Default::default() };
        let (m, rep) = train_lm(cfg(), &corpus, &opts).unwrap();
        assert_eq!(m, TinyLm::init(cfg()).unwrap());
        assert!(rep.epoch_losses.is_empty());
    }

    #[test]
    fn memorizes_repeated_bigram() {
        let corpus: Vec<Vec<u32>> = (0..40).map(|_| vec![3, 5, 3, 5, 3, 5]).collect();
        let opts = LmTrainOptions {
            epochs: 30,
            learning_rate: 1e-2,
            batch_size: 8,
            ..Default::default()
        };
        let (m, rep) = train_lm(cfg(), &corpus, &opts).unwrap();
        assert!(rep.heldout_loss < rep.uniform_baseline);
        let tr = m.forward(&[3, 5, 3]).unwrap();
        assert!(tr.distribution[5] > 0.99, "p = {}", tr.distribution[5]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(train_lm(cfg(), &[], &LmTrainOptions::default()).is_err());
        assert!(train_lm(cfg(), &[vec![9]], &LmTrainOptions::default()).is_err());
    }

    #[test]
    fn divergence_detected() {
        let corpus: Vec<Vec<u32>> = (0..16).map(|i| vec![1, (i % 7) as u32, 2, 3]).collect();
        let opts = LmTrainOptions {
            epochs: 6,
            learning_rate: 1e3,
            grad_clip: 1e9,
            batch_size: 4,
            ..Default::default()
        };
        match train_lm(cfg(), &corpus, &opts) {
            Err(Error::Divergence(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok((_, rep)) => panic!("expected divergence, losses {:?}", rep.epoch_losses),
        }
    }
}
