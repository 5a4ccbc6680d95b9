// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic market world: token-level news with planted concepts, firm
//! returns driven by hidden sentiment, and ground truth for oracle checks.
//!
//! Each news item has a hidden sentiment `u ~ U[-1, 1]`. Its text holds a
//! topic token, some sentiment tokens (each positive with probability
//! `(1 + u) / 2`) and filler tokens from the other concept classes. A
//! `hedged_fraction` of items are hedged: they carry only
//! `hedged_sentiment_tokens` sentiment tokens, so their text is weakly
//! informative while `u` still moves returns at full strength.
//!
//! Returns: `ret(f, t + k) += β/h · mean(u of f's day-t news)` for
//! `k = 1..=h`, plus Gaussian noise, with `β` calibrated so the oracle
//! classifier `sign(u)` hits a target accuracy on `h`-day return signs.

mod corpus;
mod planted;
pub mod vocab;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

pub use corpus::{
    allocation_prompt, allocation_template, classification_prompt, lm_training_corpus, AllocationSpec, LmCorpusSpec, PromptKind,
};
pub use planted::{compose, generate_residual_dataset, PlantedDictionarySpec, PlantedResiduals};
pub use vocab::{TokenClass, Vocabulary};

use crate::error::{Error, Result};
use crate::io::{fmt_f, from_jsonl, parse_csv, to_jsonl, write_atomic, CsvBuilder};
use crate::numerics::{Matrix, Rng, RngSeed};

/// Binary news classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sentiment {
    Positive,
    Negative,
}

impl Sentiment {
    pub fn flip(self) -> Self {
        match self {
            Sentiment::Positive => Sentiment::Negative,
            Sentiment::Negative => Sentiment::Positive,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Sentiment::Positive
    }
}

/// Relative frequency of a filler class in news bodies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptWeight {
    pub class: TokenClass,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSpec {
    pub num_firms: usize,
    pub num_days: usize,
    /// Expected news items per firm-day; each firm-day draws
    /// `Binomial(2, news_rate / 2)` items.
    pub news_rate: f64,
    /// Multiplier on the calibrated `β`; 0 removes the signal.
    pub signal_to_noise: f64,
    pub target_oracle_accuracy: f64,
    /// Daily return noise standard deviation.
    pub return_volatility: f64,
    /// Return horizon in days for labels and calibration.
    pub horizon: usize,
    pub hedged_fraction: f64,
    pub hedged_sentiment_tokens: usize,
    /// Non-hedged items draw `1..=max_sentiment_tokens` sentiment tokens.
    pub max_sentiment_tokens: usize,
    pub min_filler_tokens: usize,
    pub max_filler_tokens: usize,
    pub filler: Vec<ConceptWeight>,
    /// Share of Positive answers on hedged items in the LM training corpus,
    /// irrespective of their hidden sentiment.
    pub positive_label_skew: f64,
    pub seed: RngSeed,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_firms: 100,
            num_days: 500,
            news_rate: 0.3,
            signal_to_noise: 1.0,
            target_oracle_accuracy: 0.54,
            return_volatility: 0.01,
            horizon: 1,
            hedged_fraction: 0.6,
            hedged_sentiment_tokens: 1,
            max_sentiment_tokens: 6,
            min_filler_tokens: 4,
            max_filler_tokens: 8,
            filler: vec![
                ConceptWeight { class: TokenClass::Temporal, weight: 1.0 },
                ConceptWeight { class: TokenClass::Quantitative, weight: 1.5 },
                ConceptWeight { class: TokenClass::Punctuation, weight: 1.5 },
                ConceptWeight { class: TokenClass::Risk, weight: 0.5 },
                ConceptWeight { class: TokenClass::Calm, weight: 0.5 },
            ],
            positive_label_skew: 0.6,
            seed: RngSeed(7),
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_firms < 2 || self.num_days < 2 {
            return bad("world needs at least 2 firms and 2 days");
        }
        if !(0.0..=2.0).contains(&self.news_rate) {
            return bad("news_rate must be in [0, 2]");
        }
        if !(self.signal_to_noise >= 0.0 && self.signal_to_noise.is_finite()) {
            return bad("signal_to_noise must be finite and >= 0");
        }
        if !(0.5..1.0).contains(&self.target_oracle_accuracy) {
            return bad("target_oracle_accuracy must be in [0.5, 1)");
        }
        if !(self.return_volatility > 0.0 && self.return_volatility.is_finite()) {
            return bad("return_volatility must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.hedged_fraction) || !(0.0..=1.0).contains(&self.positive_label_skew) {
            return bad("hedged_fraction and positive_label_skew must be in [0, 1]");
        }
        if self.max_sentiment_tokens == 0 || self.hedged_sentiment_tokens == 0 {
            return bad("sentiment token counts must be positive");
        }
        if self.min_filler_tokens > self.max_filler_tokens {
            return bad("min_filler_tokens exceeds max_filler_tokens");
        }
        if self.filler.is_empty() || self.filler.iter().any(|c| c.weight.is_nan() || c.weight < 0.0 || matches!(c.class, TokenClass::Special | TokenClass::Answer | TokenClass::Numeric | TokenClass::PositiveSentiment | TokenClass::NegativeSentiment)) {
            return bad("filler classes must be non-sentiment content classes with non-negative weights");
        }
        if self.filler.iter().map(|c| c.weight).sum::<f64>() <= 0.0 {
            return bad("filler weights sum to zero");
        }
        Ok(())
    }

    /// Longest news body this spec can produce, topic token included.
    pub fn max_news_len(&self) -> usize {
        1 + self.max_sentiment_tokens.max(self.hedged_sentiment_tokens) + self.max_filler_tokens
    }
}

/// One observable news item. Hidden fields live in [`GroundTruth`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsItem {
    pub id: usize,
    pub firm: usize,
    pub day: usize,
    pub tokens: Vec<u32>,
}

/// Daily returns, `days × firms`. Day `t + 1` carries the signal of day-`t`
/// news.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    pub returns: Matrix,
    pub beta: f64,
    pub volatility: f64,
    pub horizon: usize,
}

impl ReturnPanel {
    pub fn num_days(&self) -> usize {
        self.returns.rows()
    }

    pub fn num_firms(&self) -> usize {
        self.returns.cols()
    }

    pub fn ret(&self, firm: usize, day: usize) -> Option<f64> {
        (firm < self.num_firms() && day < self.num_days()).then(|| self.returns.get(day, firm))
    }

    /// Cumulative return over days `day+1 ..= day+h`.
    pub fn forward_return(&self, firm: usize, day: usize, h: usize) -> Option<f64> {
        (1..=h).map(|k| self.ret(firm, day + k)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut b = CsvBuilder::new(&["firm", "day", "ret"]);
        for f in 0..self.num_firms() {
            for d in 0..self.num_days() {
                b.row(vec![f.to_string(), d.to_string(), fmt_f(self.returns.get(d, f))]);
            }
        }
        b.finish()
    }

    /// Parses `firm, day, ret` rows. Generation parameters are not stored in
    /// the CSV and come back as zero.
    pub fn from_csv(text: &str, horizon: usize) -> Result<Self> {
        let rows = parse_csv(text)?;
        let (header, body) = rows.split_first().ok_or_else(|| Error::Format("empty returns.csv".into()))?;
        if header != &["firm", "day", "ret"] {
            return Err(Error::Format(format!("unexpected returns.csv header {header:?}")));
        }
        let mut cells = Vec::with_capacity(body.len());
        let (mut nf, mut nd) = (0, 0);
        for (i, r) in body.iter().enumerate() {
            let parse_err = || Error::Format(format!("returns.csv row {}: {:?}", i + 2, r));
            if r.len() != 3 {
                return Err(parse_err());
            }
            let f: usize = r[0].parse().map_err(|_| parse_err())?;
            let d: usize = r[1].parse().map_err(|_| parse_err())?;
            let v: f64 = r[2].parse().map_err(|_| parse_err())?;
            nf = nf.max(f + 1);
            nd = nd.max(d + 1);
            cells.push((f, d, v));
        }
        if cells.len() != nf * nd {
            return Err(Error::Format(format!("returns.csv has {} rows, expected {nf}x{nd}", cells.len())));
        }
        let mut m = Matrix::zeros(nd, nf);
        for (f, d, v) in cells {
            m.set(d, f, v);
        }
        Ok(Self {
            returns: m,
            beta: 0.0,
            volatility: 0.0,
            horizon,
        })
    }
}

/// Hidden fields of the world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Planted dictionary `d × K` (residual-generator mode only).
    pub dictionary: Option<Matrix>,
    /// Indexed by news id.
    pub latent_sentiment: Vec<f64>,
    pub hedged: Vec<bool>,
    /// Concept name to the token classes that express it.
    pub concepts: BTreeMap<String, Vec<TokenClass>>,
    pub beta: f64,
}

pub fn concept_map() -> BTreeMap<String, Vec<TokenClass>> {
    let mut m = BTreeMap::new();
    m.insert("sentiment".into(), vec![TokenClass::PositiveSentiment, TokenClass::NegativeSentiment]);
    m.insert("topic".into(), vec![TokenClass::Topic]);
    m.insert("timing".into(), vec![TokenClass::Temporal]);
    m.insert("quantitative".into(), vec![TokenClass::Quantitative]);
    m.insert("punctuation".into(), vec![TokenClass::Punctuation]);
    m.insert("risk".into(), vec![TokenClass::Risk, TokenClass::Calm]);
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub news: Vec<NewsItem>,
    pub panel: ReturnPanel,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthRecord {
    id: usize,
    latent_sentiment: f64,
    hedged: bool,
}

/// Draws one news body: topic, sentiment and filler tokens in random order
/// after the topic. Returns `(tokens, u, hedged)`.
pub(crate) fn draw_news_text(rng: &mut Rng, spec: &WorldSpec, vocab: &Vocabulary, topic: u32) -> (Vec<u32>, f64, bool) {
    let pos = vocab.ids_in(TokenClass::PositiveSentiment);
    let neg = vocab.ids_in(TokenClass::NegativeSentiment);
    let u = rng.uniform_range(-1.0, 1.0);
    let hedged = rng.bernoulli(spec.hedged_fraction);
    let n_sent = if hedged {
        spec.hedged_sentiment_tokens
    } else {
        1 + rng.below(spec.max_sentiment_tokens)
    };
    let mut body = Vec::with_capacity(spec.max_news_len());
    for _ in 0..n_sent {
        let ids = if rng.bernoulli((1.0 + u) / 2.0) { &pos } else { &neg };
        body.push(ids[rng.below(ids.len())]);
    }
    body.extend(draw_filler(rng, spec, vocab));
    rng.shuffle(&mut body);
    let mut tokens = Vec::with_capacity(body.len() + 1);
    tokens.push(topic);
    tokens.extend(body);
    (tokens, u, hedged)
}

pub(crate) fn draw_filler(rng: &mut Rng, spec: &WorldSpec, vocab: &Vocabulary) -> Vec<u32> {
    let n = spec.min_filler_tokens + rng.below(spec.max_filler_tokens - spec.min_filler_tokens + 1);
    let weights: Vec<f64> = spec.filler.iter().map(|c| c.weight).collect();
    let pools: Vec<Vec<u32>> = spec.filler.iter().map(|c| vocab.ids_in(c.class)).collect();
    (0..n)
        .map(|_| {
            let pool = &pools[rng.categorical(&weights)];
            pool[rng.below(pool.len())]
        })
        .collect()
}

/// Topic token of firm `f`.
pub fn firm_topic(vocab: &Vocabulary, firm: usize) -> u32 {
    let topics = vocab.ids_in(TokenClass::Topic);
    topics[firm % topics.len()]
}

fn firm_day_counts(rng: &mut Rng, rate: f64) -> usize {
    rng.binomial(2, rate / 2.0) as usize
}

/// `β` such that `sign(u)` predicts the sign of the `h`-day return with the
/// target accuracy, by bisection on a fixed Monte-Carlo sample.
pub fn calibrate_beta(spec: &WorldSpec) -> Result<f64> {
    spec.validate()?;
    let mut rng = Rng::new(RngSeed(0xca1b).derive(spec.news_rate.to_bits()));
    let sd = spec.return_volatility * (spec.horizon as f64).sqrt();
    // (|mean u| / sd, oracle agrees with sign of mean u)
    let mut sample = Vec::with_capacity(100_000);
    while sample.len() < 100_000 {
        let n = firm_day_counts(&mut rng, spec.news_rate).max(1);
        let us: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let m = us.iter().sum::<f64>() / n as f64;
        for u in us {
            sample.push((m.abs() / sd, (u >= 0.0) == (m >= 0.0)));
        }
    }
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let accuracy = |beta: f64| {
        sample
            .iter()
            .map(|(a, agree)| {
                let p = normal.cdf(beta * a);
                if *agree {
                    p
                } else {
                    1.0 - p
                }
            })
            .sum::<f64>()
            / sample.len() as f64
    };
    let (mut lo, mut hi) = (0.0, 100.0 * spec.return_volatility);
    if accuracy(hi) < spec.target_oracle_accuracy {
        return Err(Error::Config(format!(
            "target oracle accuracy {} unreachable",
            spec.target_oracle_accuracy
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if accuracy(mid) < spec.target_oracle_accuracy {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let vocab = Vocabulary::standard();
    let beta = calibrate_beta(spec)? * spec.signal_to_noise;
    let mut text_rng = Rng::new(spec.seed.derive_str("world-news"));
    let mut noise_rng = Rng::new(spec.seed.derive_str("world-returns"));
    let (n, t, h) = (spec.num_firms, spec.num_days, spec.horizon);

    let mut news = Vec::new();
    let mut latent = Vec::new();
    let mut hedged = Vec::new();
    let mut returns = Matrix::zeros(t + h, n);
    for d in 0..t + h {
        for f in 0..n {
            returns.set(d, f, spec.return_volatility * noise_rng.normal());
        }
    }
    for day in 0..t {
        for firm in 0..n {
            let count = firm_day_counts(&mut text_rng, spec.news_rate);
            if count == 0 {
                continue;
            }
            let mut sum = 0.0;
            for _ in 0..count {
                let (tokens, u, hd) = draw_news_text(&mut text_rng, spec, &vocab, firm_topic(&vocab, firm));
                news.push(NewsItem {
                    id: news.len(),
                    firm,
                    day,
                    tokens,
                });
                latent.push(u);
                hedged.push(hd);
                sum += u;
            }
            let shock = beta / h as f64 * sum / count as f64;
            for k in 1..=h {
                let v = returns.get(day + k, firm) + shock;
                returns.set(day + k, firm, v);
            }
        }
    }
    Ok(World {
        spec: spec.clone(),
        news,
        panel: ReturnPanel {
            returns,
            beta,
            volatility: spec.return_volatility,
            horizon: h,
        },
        truth: GroundTruth {
            dictionary: None,
            latent_sentiment: latent,
            hedged,
            concepts: concept_map(),
            beta,
        },
    })
}

/// Sign of the hidden sentiment; zero counts as Positive.
pub fn oracle_classifier(item: &NewsItem, truth: &GroundTruth) -> Result<Sentiment> {
    let u = truth
        .latent_sentiment
        .get(item.id)
        .ok_or_else(|| Error::invalid(format!("no ground truth for news {}", item.id)))?;
    Ok(if *u >= 0.0 { Sentiment::Positive } else { Sentiment::Negative })
}

/// Share of news whose classification matches the sign of the `h`-day
/// forward return. Items without a full forward window are skipped.
pub fn classification_accuracy(news: &[NewsItem], labels: &[Sentiment], panel: &ReturnPanel, h: usize) -> Option<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (item, l) in news.iter().zip(labels) {
        if let Some(r) = panel.forward_return(item.firm, item.day, h) {
            total += 1;
            hits += usize::from((r > 0.0) == l.is_positive());
        }
    }
    (total > 0).then(|| hits as f64 / total as f64)
}

impl World {
    /// Writes `news.jsonl`, `returns.csv` and `truth.jsonl` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<Vec<String>> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("news.jsonl"), to_jsonl(&self.news)?.as_bytes())?;
        write_atomic(&dir.join("returns.csv"), self.panel.to_csv().as_bytes())?;
        let truth: Vec<TruthRecord> = self
            .news
            .iter()
            .map(|n| TruthRecord {
                id: n.id,
                latent_sentiment: self.truth.latent_sentiment[n.id],
                hedged: self.truth.hedged[n.id],
            })
            .collect();
        write_atomic(&dir.join("truth.jsonl"), to_jsonl(&truth)?.as_bytes())?;
        Ok(vec!["news.jsonl".into(), "returns.csv".into(), "truth.jsonl".into()])
    }
}

/// Reads exported news and returns. Truth is loaded only if present.
pub fn import_world(dir: &Path, horizon: usize) -> Result<(Vec<NewsItem>, ReturnPanel, Option<GroundTruth>)> {
    let news: Vec<NewsItem> = from_jsonl(&fs::read_to_string(dir.join("news.jsonl"))?)?;
    for (i, n) in news.iter().enumerate() {
        if n.id != i {
            return Err(Error::Format(format!("news.jsonl ids must be 0..n in order; line {} has id {}", i + 1, n.id)));
        }
    }
    let panel = ReturnPanel::from_csv(&fs::read_to_string(dir.join("returns.csv"))?, horizon)?;
    let truth_path = dir.join("truth.jsonl");
    let truth = if truth_path.exists() {
        let recs: Vec<TruthRecord> = from_jsonl(&fs::read_to_string(truth_path)?)?;
        Some(GroundTruth {
            dictionary: None,
            latent_sentiment: recs.iter().map(|r| r.latent_sentiment).collect(),
            hedged: recs.iter().map(|r| r.hedged).collect(),
            concepts: concept_map(),
            beta: 0.0,
        })
    } else {
        None
    };
    Ok((news, panel, truth))
}
