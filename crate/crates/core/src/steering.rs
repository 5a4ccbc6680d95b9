// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept steering: add `s` times an SAE decoder column to the residual
//! stream and measure how classifications and allocations move.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasim::vocab::{ANSWER_NEGATIVE, ANSWER_POSITIVE};
use crate::datasim::{classification_prompt, NewsItem, ReturnPanel, Sentiment, Vocabulary};
use crate::error::{Error, Result};
use crate::io::{fmt_f, fmt_opt, CsvBuilder};
use crate::numerics::{Matrix, Rng, RngSeed};
use crate::sae::Sae;
use crate::tinylm::{sample_token, Decoding, TapPoint, TinyLm};

/// Default strength grid in decoder-norm units.
pub const DEFAULT_GRID: [f64; 7] = [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0];
/// Resampling attempts before an allocation draw counts as an abstention.
pub const MAX_RETRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub feature: usize,
    pub strength: f64,
    pub tap: TapPoint,
}

impl SteeringSpec {
    pub fn validate(&self, model: &TinyLm, sae: &Sae) -> Result<()> {
        if self.feature >= sae.latent_dim() {
            return Err(Error::invalid(format!("feature {} out of range for {} latents", self.feature, sae.latent_dim())));
        }
        if !self.strength.is_finite() {
            return Err(Error::invalid("steering strength must be finite"));
        }
        if self.tap.0 > model.config.num_layers {
            return Err(Error::invalid(format!("tap {} out of range", self.tap.0)));
        }
        if sae.input_dim() != model.config.hidden_dim {
            return Err(Error::shape(
                "steering",
                format!("SAE input dim {} vs model width {}", sae.input_dim(), model.config.hidden_dim),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeredDistribution {
    pub baseline: Vec<f64>,
    pub steered: Vec<f64>,
    pub spec: SteeringSpec,
}

/// `decode(s·e_j) − decode(0) = s · W_d[:, j]`.
pub fn steering_delta(sae: &Sae, spec: &SteeringSpec) -> Result<Vec<f64>> {
    if spec.feature >= sae.latent_dim() {
        return Err(Error::invalid(format!("feature {} out of range for {} latents", spec.feature, sae.latent_dim())));
    }
    Ok(sae.decoder_column(spec.feature)?.into_iter().map(|w| spec.strength * w).collect())
}

pub fn steered_forward(model: &TinyLm, sae: &Sae, tokens: &[u32], spec: &SteeringSpec) -> Result<SteeredDistribution> {
    spec.validate(model, sae)?;
    let delta = steering_delta(sae, spec)?;
    let baseline = model.forward(tokens)?.distribution;
    let steered = model.forward_with_injection(tokens, spec.tap, &delta)?.distribution;
    Ok(SteeredDistribution {
        baseline,
        steered,
        spec: *spec,
    })
}

fn check_answer_tokens(model: &TinyLm) -> Result<()> {
    if (ANSWER_POSITIVE.max(ANSWER_NEGATIVE) as usize) >= model.config.vocab_size {
        return Err(Error::Config("answer tokens P/N are outside the model vocabulary".into()));
    }
    Ok(())
}

/// `P` wins ties.
pub fn answer_from_distribution(dist: &[f64]) -> Sentiment {
    if dist[ANSWER_POSITIVE as usize] >= dist[ANSWER_NEGATIVE as usize] {
        Sentiment::Positive
    } else {
        Sentiment::Negative
    }
}

pub fn classify_news(model: &TinyLm, sae: &Sae, news: &NewsItem, spec: &SteeringSpec) -> Result<Sentiment> {
    check_answer_tokens(model)?;
    let prompt = classification_prompt(&news.tokens);
    Ok(answer_from_distribution(&steered_forward(model, sae, &prompt, spec)?.steered))
}

/// Evaluates a prompt under many strengths of one feature, reusing the
/// unsteered stream up to the tap.
pub struct SteeringProbe<'a> {
    model: &'a TinyLm,
    tap: TapPoint,
    column: Vec<f64>,
}

impl<'a> SteeringProbe<'a> {
    pub fn new(model: &'a TinyLm, sae: &Sae, feature: usize, tap: TapPoint) -> Result<Self> {
        SteeringSpec { feature, strength: 0.0, tap }.validate(model, sae)?;
        Ok(Self {
            model,
            tap,
            column: sae.decoder_column(feature)?,
        })
    }

    /// Stream at the tap for `tokens`, before any injection.
    pub fn base_stream(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.model.forward(tokens)?.residuals.swap_remove(self.tap.0))
    }

    pub fn distribution(&self, base: &Matrix, strength: f64) -> Result<Vec<f64>> {
        let mut stream = base.clone();
        for r in 0..stream.rows() {
            for (x, w) in stream.row_mut(r).iter_mut().zip(&self.column) {
                *x += strength * w;
            }
        }
        self.model.distribution_from(self.tap, &stream)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationRow {
    pub strength: f64,
    pub pos_frac: f64,
    /// Mean next-day return of Positive items; `None` for an empty cell.
    pub mean_ret_pos: Option<f64>,
    pub mean_ret_neg: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationGrid {
    pub feature: usize,
    pub rows: Vec<ClassificationRow>,
    /// `labels[s][i]`: class of news `i` at strength index `s`.
    pub labels: Vec<Vec<Sentiment>>,
    /// Probability of `P` normalized over the two answers, same layout.
    pub positive_prob: Vec<Vec<f64>>,
}

impl ClassificationGrid {
    pub fn to_csv(&self) -> String {
        let mut b = CsvBuilder::new(&["strength", "pos_frac", "mean_ret_pos", "mean_ret_neg", "n_pos", "n_neg"]);
        for r in &self.rows {
            b.row(vec![
                fmt_f(r.strength),
                fmt_f(r.pos_frac),
                fmt_opt(r.mean_ret_pos),
                fmt_opt(r.mean_ret_neg),
                r.n_pos.to_string(),
                r.n_neg.to_string(),
            ]);
        }
        b.finish()
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("strength grid must be non-empty and finite"));
    }
    Ok(())
}

/// Classifies every news item at every strength and tabulates the positive
/// share and the mean next-day return within each predicted class.
pub fn steering_grid_classification(
    model: &TinyLm,
    sae: &Sae,
    feature: usize,
    tap: TapPoint,
    news: &[NewsItem],
    panel: &ReturnPanel,
    grid: &[f64],
) -> Result<ClassificationGrid> {
    check_grid(grid)?;
    check_answer_tokens(model)?;
    let probe = SteeringProbe::new(model, sae, feature, tap)?;
    let rets: Vec<f64> = news
        .iter()
        .map(|n| {
            panel
                .forward_return(n.firm, n.day, 1)
                .ok_or_else(|| Error::invalid(format!("news {} has no next-day return", n.id)))
        })
        .collect::<Result<_>>()?;
    let per_item: Vec<Vec<(f64, Sentiment)>> = news
        .par_iter()
        .map(|n| -> Result<Vec<(f64, Sentiment)>> {
            let base = probe.base_stream(&classification_prompt(&n.tokens))?;
            grid.iter()
                .map(|&s| {
                    let d = probe.distribution(&base, s)?;
                    let (p, q) = (d[ANSWER_POSITIVE as usize], d[ANSWER_NEGATIVE as usize]);
                    Ok((if p + q > 0.0 { p / (p + q) } else { 0.5 }, answer_from_distribution(&d)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut labels = Vec::with_capacity(grid.len());
    let mut positive_prob = Vec::with_capacity(grid.len());
    for (si, &s) in grid.iter().enumerate() {
        let probs: Vec<f64> = per_item.iter().map(|v| v[si].0).collect();
        let lab: Vec<Sentiment> = per_item.iter().map(|v| v[si].1).collect();
        let (mut sp, mut sn, mut np, mut nn) = (0.0, 0.0, 0usize, 0usize);
        for (l, r) in lab.iter().zip(&rets) {
            if l.is_positive() {
                sp += r;
                np += 1;
            } else {
                sn += r;
                nn += 1;
            }
        }
        rows.push(ClassificationRow {
            strength: s,
            pos_frac: if news.is_empty() { 0.0 } else { np as f64 / news.len() as f64 },
            mean_ret_pos: (np > 0).then(|| sp / np as f64),
            mean_ret_neg: (nn > 0).then(|| sn / nn as f64),
            n_pos: np,
            n_neg: nn,
        });
        labels.push(lab);
        positive_prob.push(probs);
    }
    Ok(ClassificationGrid {
        feature,
        rows,
        labels,
        positive_prob,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRow {
    pub feature: usize,
    pub strength: f64,
    /// Mean allocation over non-abstaining repetitions; `None` if all abstained.
    pub mean_alloc: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
    pub abstentions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationGrid {
    pub rows: Vec<AllocationRow>,
    pub repetitions: usize,
    pub seed: RngSeed,
    /// Allocations per strength (abstentions omitted).
    pub samples: Vec<Vec<f64>>,
}

impl AllocationGrid {
    pub fn to_csv(&self) -> String {
        let mut b = CsvBuilder::new(&["feature", "strength", "mean_alloc", "std", "n"]);
        for r in &self.rows {
            b.row(vec![r.feature.to_string(), fmt_f(r.strength), fmt_opt(r.mean_alloc), fmt_opt(r.std), r.n.to_string()]);
        }
        b.finish()
    }
}

/// Samples the allocation answer after `template` `repetitions` times per
/// strength. Each repetition draws from its own sub-stream keyed by
/// `(strength index, repetition)`; non-numeric answers are resampled up to
/// [`MAX_RETRIES`] times before counting as an abstention.
#[allow(clippy::too_many_arguments)]
pub fn allocation_experiment(
    model: &TinyLm,
    sae: &Sae,
    template: &[u32],
    feature: usize,
    tap: TapPoint,
    grid: &[f64],
    repetitions: usize,
    decoding: Decoding,
    seed: RngSeed,
) -> Result<AllocationGrid> {
    check_grid(grid)?;
    if repetitions == 0 {
        return Err(Error::invalid("repetitions must be at least 1"));
    }
    model.check_tokens(template)?;
    let probe = SteeringProbe::new(model, sae, feature, tap)?;
    let base = probe.base_stream(template)?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut samples = Vec::with_capacity(grid.len());
    for (si, &s) in grid.iter().enumerate() {
        let dist = probe.distribution(&base, s)?;
        let draws: Vec<Option<f64>> = (0..repetitions)
            .into_par_iter()
            .map(|rep| {
                let mut rng = Rng::new(seed.derive_path(&[si as u64, rep as u64]));
                (0..=MAX_RETRIES).find_map(|_| Vocabulary::bucket_value(sample_token(&dist, decoding, &mut rng)).map(f64::from))
            })
            .collect();
        let vals: Vec<f64> = draws.iter().flatten().copied().collect();
        let n = vals.len();
        let mean = (n > 0).then(|| vals.iter().sum::<f64>() / n as f64);
        let std = mean.map(|m| (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt());
        rows.push(AllocationRow {
            feature,
            strength: s,
            mean_alloc: mean,
            std,
            n,
            abstentions: repetitions - n,
        });
        samples.push(vals);
    }
    Ok(AllocationGrid {
        rows,
        repetitions,
        seed,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::{generate_world, WorldSpec};
    use crate::sae::SaeConfig;
    use crate::tinylm::TinyLmConfig;

    fn setup() -> (TinyLm, Sae) {
        let model = TinyLm::init(TinyLmConfig {
            vocab_size: 64,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            max_seq_len: 24,
            mlp_ratio: 2,
            seed: RngSeed(9),
        })
        .unwrap();
        let sae = Sae::init(SaeConfig {
            input_dim: 16,
            latent_dim: 8,
            seed: RngSeed(4),
            ..Default::default()
        })
        .unwrap();
        (model, sae)
    }

    fn spec(strength: f64) -> SteeringSpec {
        SteeringSpec {
            feature: 3,
            strength,
            tap: TapPoint(1),
        }
    }

    #[test]
    fn delta_is_scaled_column() {
        let (_, sae) = setup();
        assert!(steering_delta(&sae, &spec(0.0)).unwrap().iter().all(|v| *v == 0.0));
        assert_eq!(steering_delta(&sae, &spec(1.0)).unwrap(), sae.decoder_column(3).unwrap());
        let a = steering_delta(&sae, &spec(2.0)).unwrap();
        let b = steering_delta(&sae, &spec(-2.0)).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x + y).abs() < 1e-12));
        let s = steering_delta(&sae, &spec(1.25)).unwrap();
        let t = steering_delta(&sae, &spec(0.5)).unwrap();
        let u = steering_delta(&sae, &spec(0.75)).unwrap();
        assert!(s.iter().zip(t.iter().zip(&u)).all(|(x, (y, z))| (x - y - z).abs() < 1e-12));
        assert!(steering_delta(&sae, &SteeringSpec { feature: 8, ..spec(1.0) }).is_err());
    }

    #[test]
    fn null_steering_is_exact() {
        let (model, sae) = setup();
        let toks = [0, 20, 33, 41, 1];
        let out = steered_forward(&model, &sae, &toks, &spec(0.0)).unwrap();
        assert_eq!(out.baseline, out.steered);
        let probe = SteeringProbe::new(&model, &sae, 3, TapPoint(1)).unwrap();
        let base = probe.base_stream(&toks).unwrap();
        assert_eq!(probe.distribution(&base, 0.0).unwrap(), out.baseline);
        let s = steered_forward(&model, &sae, &toks, &spec(1.5)).unwrap();
        assert_eq!(probe.distribution(&base, 1.5).unwrap(), s.steered);
        assert!((s.steered.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn last_tap_shifts_logits_by_head_of_delta() {
        let (model, sae) = setup();
        let toks = [0, 18, 40, 1];
        let sp = SteeringSpec {
            tap: TapPoint(2),
            ..spec(2.0)
        };
        let base = model.forward(&toks).unwrap();
        let steered = model.forward_with_injection(&toks, sp.tap, &steering_delta(&sae, &sp).unwrap()).unwrap();
        let delta = Matrix::row_vector(steering_delta(&sae, &sp).unwrap()).unwrap();
        let zero = Matrix::zeros(1, 16);
        let hd = model.output_head(&delta).unwrap();
        let h0 = model.output_head(&zero).unwrap();
        let t = toks.len() - 1;
        for v in 0..64 {
            let want = base.logits.get(t, v) + hd.get(0, v) - h0.get(0, v);
            assert!((steered.logits.get(t, v) - want).abs() < 1e-10);
        }
    }

    #[test]
    fn tie_goes_positive() {
        let mut d = vec![0.0; 64];
        d[ANSWER_POSITIVE as usize] = 0.3;
        d[ANSWER_NEGATIVE as usize] = 0.3;
        assert_eq!(answer_from_distribution(&d), Sentiment::Positive);
        d[ANSWER_NEGATIVE as usize] = 0.31;
        assert_eq!(answer_from_distribution(&d), Sentiment::Negative);
    }

    #[test]
    fn grid_rows_and_single_point() {
        let (model, sae) = setup();
        let world = generate_world(&WorldSpec {
            num_firms: 10,
            num_days: 20,
            ..Default::default()
        })
        .unwrap();
        let news: Vec<NewsItem> = world.news.iter().filter(|n| n.day + 1 < 20).cloned().collect();
        let g = steering_grid_classification(&model, &sae, 3, TapPoint(1), &news, &world.panel, &[-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(g.rows.len(), 3);
        for r in &g.rows {
            assert_eq!(r.n_pos + r.n_neg, news.len());
            assert!((0.0..=1.0).contains(&r.pos_frac));
        }
        let single = steering_grid_classification(&model, &sae, 3, TapPoint(1), &news, &world.panel, &[0.0]).unwrap();
        assert_eq!(single.rows[0], g.rows[1]);
        for (i, n) in news.iter().take(5).enumerate() {
            assert_eq!(classify_news(&model, &sae, n, &spec(0.0)).unwrap(), g.labels[1][i]);
        }
        assert!(g.to_csv().starts_with("strength,pos_frac,mean_ret_pos,mean_ret_neg,n_pos,n_neg\r\n"));
    }

    #[test]
    fn allocation_is_reproducible() {
        let (model, sae) = setup();
        let template = crate::datasim::allocation_template(&Vocabulary::standard());
        let run = |d| allocation_experiment(&model, &sae, &template, 3, TapPoint(1), &[0.0, 0.0], 1, d, RngSeed(1)).unwrap();
        let g = run(Decoding::Greedy);
        assert_eq!(g.rows[0].mean_alloc, g.rows[1].mean_alloc);
        assert_eq!(g.rows[0].n + g.rows[0].abstentions, 1);
        let t = Decoding::Temperature { temperature: 1.0 };
        assert_eq!(run(t), run(t));
    }
}
