// SPDX-License-Identifier: MIT OR Apache-2.0

//! The toy vocabulary and its token classes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenClass {
    Special,
    Answer,
    Numeric,
    PositiveSentiment,
    NegativeSentiment,
    Topic,
    Temporal,
    Quantitative,
    Punctuation,
    Risk,
    Calm,
}

impl TokenClass {
    pub const ALL: [TokenClass; 11] = [
        TokenClass::Special,
        TokenClass::Answer,
        TokenClass::Numeric,
        TokenClass::PositiveSentiment,
        TokenClass::NegativeSentiment,
        TokenClass::Topic,
        TokenClass::Temporal,
        TokenClass::Quantitative,
        TokenClass::Punctuation,
        TokenClass::Risk,
        TokenClass::Calm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TokenClass::Special => "special",
            TokenClass::Answer => "answer",
            TokenClass::Numeric => "numeric",
            TokenClass::PositiveSentiment => "positive-sentiment",
            TokenClass::NegativeSentiment => "negative-sentiment",
            TokenClass::Topic => "topic",
            TokenClass::Temporal => "temporal",
            TokenClass::Quantitative => "quantitative",
            TokenClass::Punctuation => "punctuation",
            TokenClass::Risk => "risk",
            TokenClass::Calm => "calm",
        }
    }

    pub fn from_name(name: &str) -> Option<TokenClass> {
        TokenClass::ALL.iter().copied().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub id: u32,
    pub text: String,
    pub class: TokenClass,
}

/// Fixed 64-token vocabulary. Ids are stable across versions.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<TokenInfo>,
}

pub const BOS: u32 = 0;
/// Ends a news item and asks for a P/N answer.
pub const ASK: u32 = 1;
/// Ends a context and asks for an equity allocation bucket.
pub const ALLOC: u32 = 2;
pub const SEP: u32 = 3;
pub const ANSWER_POSITIVE: u32 = 4;
pub const ANSWER_NEGATIVE: u32 = 5;
const NUMERIC_BASE: u32 = 6;
/// Number of allocation buckets: 0, 10, ..., 100.
pub const NUM_BUCKETS: u32 = 11;

const LAYOUT: &[(TokenClass, &[&str])] = &[
    (TokenClass::Special, &["<bos>", "<ask>", "<alloc>", "<sep>"]),
    (TokenClass::Answer, &["P", "N"]),
    (
        TokenClass::Numeric,
        &["0", "10", "20", "30", "40", "50", "60", "70", "80", "90", "100"],
    ),
    (
        TokenClass::PositiveSentiment,
        &["beat", "surge", "upgrade", "record", "growth", "profit", "rally", "strong"],
    ),
    (
        TokenClass::NegativeSentiment,
        &["miss", "plunge", "downgrade", "lawsuit", "decline", "loss", "slump", "weak"],
    ),
    (
        TokenClass::Topic,
        &["tech", "energy", "bank", "retail", "pharma", "auto", "telecom", "mining"],
    ),
    (TokenClass::Temporal, &["today", "quarter", "annual", "week"]),
    (TokenClass::Quantitative, &["pct", "million", "billion", "bps", "eps", "ratio"]),
    (TokenClass::Punctuation, &[",", ".", "-", ":"]),
    (TokenClass::Risk, &["volatile", "uncertain", "crisis", "crash", "turmoil"]),
    (TokenClass::Calm, &["stable", "steady", "safe", "calm"]),
];

impl Vocabulary {
    pub fn standard() -> Self {
        let mut tokens = Vec::new();
        for (class, words) in LAYOUT {
            for w in *words {
                tokens.push(TokenInfo {
                    id: tokens.len() as u32,
                    text: (*w).to_string(),
                    class: *class,
                });
            }
        }
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenInfo] {
        &self.tokens
    }

    pub fn class_of(&self, id: u32) -> Option<TokenClass> {
        self.tokens.get(id as usize).map(|t| t.class)
    }

    pub fn text_of(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|t| t.text.as_str())
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        self.tokens.iter().find(|t| t.text == text).map(|t| t.id)
    }

    pub fn ids_in(&self, class: TokenClass) -> Vec<u32> {
        self.tokens.iter().filter(|t| t.class == class).map(|t| t.id).collect()
    }

    /// Token for allocation bucket `b` (value `10·b`).
    pub fn bucket_token(b: u32) -> u32 {
        NUMERIC_BASE + b.min(NUM_BUCKETS - 1)
    }

    /// Allocation value (0..=100) of a numeric token.
    pub fn bucket_value(id: u32) -> Option<u32> {
        (NUMERIC_BASE..NUMERIC_BASE + NUM_BUCKETS)
            .contains(&id)
            .then(|| (id - NUMERIC_BASE) * 10)
    }

    pub fn render(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|id| self.text_of(*id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id_of(w).ok_or_else(|| Error::invalid(format!("unknown token {w:?}"))))
            .collect()
    }
}
