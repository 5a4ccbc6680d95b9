// SPDX-License-Identifier: MIT OR Apache-2.0

//! News embeddings from SAE codes and principal-component logistic feature
//! ranking with back-projection to the original features.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasim::{classification_prompt, NewsItem};
use crate::error::{Error, Result};
use crate::io::{fmt_f, CsvBuilder};
use crate::numerics::{fit_logistic, pca, LogisticOptions, Matrix, Standardizer};
use crate::sae::Sae;
use crate::tinylm::{TapPoint, TinyLm};

pub const DEFAULT_NUM_PCS: usize = 64;
pub const DEFAULT_BUDGETS: [usize; 6] = [5, 10, 30, 50, 100, 300];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Pools the SAE codes of the news tokens, read at `tap` while the model
/// processes the classification prompt.
pub fn embed_news(model: &TinyLm, sae: &Sae, tap: TapPoint, tokens: &[u32], pooling: Pooling) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot embed empty news"));
    }
    if tap.0 > model.config.num_layers {
        return Err(Error::invalid(format!("tap {} out of range", tap.0)));
    }
    let prompt = classification_prompt(tokens);
    let trace = model.forward(&prompt)?;
    let stream = &trace.residuals[tap.0];
    let rows: Vec<usize> = (1..=tokens.len()).collect();
    let codes = sae.encode_batch(&stream.select_rows(&rows))?;
    let k = sae.latent_dim();
    let mut out = vec![0.0; k];
    match pooling {
        Pooling::Mean => {
            for r in 0..codes.rows() {
                for (o, z) in out.iter_mut().zip(codes.row(r)) {
                    *o += z;
                }
            }
            let inv = 1.0 / codes.rows() as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        Pooling::Max => {
            for r in 0..codes.rows() {
                for (o, z) in out.iter_mut().zip(codes.row(r)) {
                    *o = o.max(*z);
                }
            }
        }
    }
    Ok(out)
}

/// One embedding row per news item, in input order.
pub fn embed_corpus(model: &TinyLm, sae: &Sae, tap: TapPoint, news: &[NewsItem], pooling: Pooling) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = news
        .par_iter()
        .map(|n| embed_news(model, sae, tap, &n.tokens, pooling))
        .collect::<Result<_>>()?;
    let k = sae.latent_dim();
    let mut data = Vec::with_capacity(rows.len() * k);
    for r in rows {
        data.extend(r);
    }
    Matrix::from_vec(news.len(), k, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRanking {
    /// `|w|` per input column; 0 for columns constant in the window.
    pub importance: Vec<f64>,
    /// Signed back-projected coefficient per input column (standardized
    /// units).
    pub weights: Vec<f64>,
    /// Non-constant columns by importance descending, ties by id ascending.
    pub order: Vec<usize>,
    pub num_pcs: usize,
    pub converged: bool,
    pub window: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankOptions {
    pub num_pcs: usize,
    pub logistic: LogisticOptions,
}

impl Default for RankOptions {
    fn default() -> Self {
        Self {
            num_pcs: DEFAULT_NUM_PCS,
            logistic: LogisticOptions {
                max_iter: 2000,
                ..Default::default()
            },
        }
    }
}

/// Standardizes the columns (dropping constant ones), projects onto the
/// leading principal components, fits a logistic model on the scores and
/// maps the coefficients back with `w = V·β`.
pub fn rank_features(x: &Matrix, labels: &[bool], opts: &RankOptions) -> Result<FeatureRanking> {
    let (n, k) = x.shape();
    if labels.len() != n {
        return Err(Error::shape("rank_features", format!("{n} rows but {} labels", labels.len())));
    }
    if opts.num_pcs == 0 {
        return Err(Error::invalid("num_pcs must be at least 1"));
    }
    if n <= opts.num_pcs.min(k) {
        return Err(Error::invalid(format!("rank_features needs more rows ({n}) than components")));
    }
    if let Some(index) = x.first_non_finite() {
        return Err(Error::NonFinite { what: "embeddings", index });
    }
    let std = Standardizer::fit(x);
    if std.kept.is_empty() {
        return Err(Error::Degenerate("every feature is constant in the window".into()));
    }
    let z = std.transform(x);
    let p = opts.num_pcs.min(std.kept.len()).min(n - 1);
    let pc = pca(&z, p)?;
    let fit = fit_logistic(&pc.scores, labels, &opts.logistic)?;
    let beta = &fit.model.weights;
    let mut weights = vec![0.0; k];
    for (i, &col) in std.kept.iter().enumerate() {
        weights[col] = (0..p).map(|c| pc.components.get(i, c) * beta[c]).sum();
    }
    let importance: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    let mut order = std.kept.clone();
    order.sort_by(|&a, &b| importance[b].total_cmp(&importance[a]).then(a.cmp(&b)));
    Ok(FeatureRanking {
        importance,
        weights,
        order,
        num_pcs: p,
        converged: fit.converged,
        window: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedEmbedding {
    pub features: Vec<usize>,
    /// Set when `k` exceeded the ranked features and was clamped.
    pub clamped: bool,
}

impl ReducedEmbedding {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        x.select_columns(&self.features)
    }
}

pub fn select_top_k(ranking: &FeatureRanking, k: usize) -> Result<ReducedEmbedding> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let take = k.min(ranking.order.len());
    Ok(ReducedEmbedding {
        features: ranking.order[..take].to_vec(),
        clamped: take < k,
    })
}

pub fn ranking_csv(ranking: &FeatureRanking) -> String {
    let mut b = CsvBuilder::new(&["feature_id", "importance", "rank"]);
    for (r, &f) in ranking.order.iter().enumerate() {
        b.row(vec![f.to_string(), fmt_f(ranking.importance[f]), (r + 1).to_string()]);
    }
    b.finish()
}
