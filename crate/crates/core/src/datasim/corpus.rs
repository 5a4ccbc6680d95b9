// SPDX-License-Identifier: MIT OR Apache-2.0

//! Training corpus for the toy LM: news classification prompts with skewed
//! answers on hedged items, and equity-allocation prompts driven by risk and
//! calm tokens.

use serde::{Deserialize, Serialize};

use super::vocab::{TokenClass, Vocabulary, ALLOC, ANSWER_NEGATIVE, ANSWER_POSITIVE, ASK, BOS, NUM_BUCKETS};
use super::{draw_filler, draw_news_text, firm_topic, WorldSpec};
use crate::error::Result;
use crate::numerics::{Rng, RngSeed};

/// Allocation prompts: `[BOS] context [ALLOC] bucket`. The target bucket is
/// `base + calm_slope·#calm − risk_slope·#risk + noise·N(0,1)`, rounded and
/// clamped to `0..=10`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocationSpec {
    pub base_bucket: f64,
    pub risk_slope: f64,
    pub calm_slope: f64,
    pub noise: f64,
    pub max_concept_tokens: usize,
}

impl Default for AllocationSpec {
    fn default() -> Self {
        Self {
            base_bucket: 5.5,
            risk_slope: 1.5,
            calm_slope: 1.0,
            noise: 1.0,
            max_concept_tokens: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmCorpusSpec {
    pub classification_prompts: usize,
    pub allocation_prompts: usize,
    pub allocation: AllocationSpec,
    pub seed: RngSeed,
}

impl Default for LmCorpusSpec {
    fn default() -> Self {
        Self {
            classification_prompts: 12_000,
            allocation_prompts: 3_000,
            allocation: AllocationSpec::default(),
            seed: RngSeed(11),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptKind {
    Classification,
    Allocation,
}

/// `[BOS] news [ASK]`; the model answers at the next position.
pub fn classification_prompt(news_tokens: &[u32]) -> Vec<u32> {
    let mut p = Vec::with_capacity(news_tokens.len() + 2);
    p.push(BOS);
    p.extend_from_slice(news_tokens);
    p.push(ASK);
    p
}

/// Draws one allocation context (ending in `[ALLOC]`) and its target bucket.
pub fn allocation_prompt(rng: &mut Rng, world: &WorldSpec, spec: &AllocationSpec, vocab: &Vocabulary) -> (Vec<u32>, u32) {
    let risk = vocab.ids_in(TokenClass::Risk);
    let calm = vocab.ids_in(TokenClass::Calm);
    let n_risk = rng.below(spec.max_concept_tokens + 1);
    let n_calm = rng.below(spec.max_concept_tokens + 1);
    let mut body: Vec<u32> = Vec::new();
    body.extend((0..n_risk).map(|_| risk[rng.below(risk.len())]));
    body.extend((0..n_calm).map(|_| calm[rng.below(calm.len())]));
    let filler_spec = WorldSpec {
        min_filler_tokens: 1,
        max_filler_tokens: 3,
        filler: world
            .filler
            .iter()
            .filter(|c| !matches!(c.class, TokenClass::Risk | TokenClass::Calm))
            .cloned()
            .collect(),
        ..world.clone()
    };
    body.extend(draw_filler(rng, &filler_spec, vocab));
    rng.shuffle(&mut body);
    let topic = firm_topic(vocab, rng.below(world.num_firms));
    let mut tokens = vec![BOS, topic];
    tokens.extend(body);
    tokens.push(ALLOC);
    let level = spec.base_bucket + spec.calm_slope * n_calm as f64 - spec.risk_slope * n_risk as f64 + spec.noise * rng.normal();
    let bucket = level.round().clamp(0.0, (NUM_BUCKETS - 1) as f64) as u32;
    (tokens, bucket)
}

/// Neutral context used by the allocation experiment: no risk or calm cues.
pub fn allocation_template(vocab: &Vocabulary) -> Vec<u32> {
    let id = |w: &str| vocab.id_of(w).expect("standard vocabulary token");
    vec![BOS, id("bank"), id("quarter"), id("pct"), id(","), ALLOC]
}

/// Classification and allocation sequences for LM training, drawn from the
/// world generator under a separate seed. Non-hedged items are answered by
/// the sign of their hidden sentiment; hedged items get `P` with
/// probability `positive_label_skew` whatever their sentiment.
pub fn lm_training_corpus(world: &WorldSpec, spec: &LmCorpusSpec) -> Result<Vec<(PromptKind, Vec<u32>)>> {
    world.validate()?;
    let vocab = Vocabulary::standard();
    let mut rng = Rng::new(spec.seed.derive_str("lm-corpus"));
    let mut out = Vec::with_capacity(spec.classification_prompts + spec.allocation_prompts);
    for _ in 0..spec.classification_prompts {
        let firm = rng.below(world.num_firms);
        let (tokens, u, hedged) = draw_news_text(&mut rng, world, &vocab, firm_topic(&vocab, firm));
        let positive = if hedged {
            rng.bernoulli(world.positive_label_skew)
        } else {
            u >= 0.0
        };
        let mut seq = classification_prompt(&tokens);
        seq.push(if positive { ANSWER_POSITIVE } else { ANSWER_NEGATIVE });
        out.push((PromptKind::Classification, seq));
    }
    for _ in 0..spec.allocation_prompts {
        let (mut seq, bucket) = allocation_prompt(&mut rng, world, &spec.allocation, &vocab);
        seq.push(Vocabulary::bucket_token(bucket));
        out.push((PromptKind::Allocation, seq));
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    rng.shuffle(&mut order);
    let mut slots: Vec<Option<(PromptKind, Vec<u32>)>> = out.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().expect("each index once")).collect())
}
