// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration, run manifests and the staged pipeline.

mod manifest;
mod report;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasim::{LmCorpusSpec, Vocabulary, WorldSpec};
use crate::error::{Error, Result};
use crate::featselect::{Pooling, RankOptions, DEFAULT_BUDGETS};
use crate::labeling::DEFAULT_TOP_N;
use crate::numerics::RngSeed;
use crate::predictor::RollingConfig;
use crate::sae::SaeConfig;
use crate::stats::ClusterOptions;
use crate::steering::DEFAULT_GRID;
use crate::tinylm::{Decoding, LmTrainOptions, TapPoint, TinyLmConfig};

pub use manifest::{sha256_hex, RunManifest, StageTiming, MANIFEST_FILE};
pub use report::{expected_artifacts, write_report, Artifact, REPORT_FILE};
pub use run::{MatchedFeature, Run, Stage, INACTIVE_GROUP};

/// Environment variable that overrides [`ExperimentConfig::seed`].
pub const SEED_ENV: &str = "SAELAB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelingConfig {
    pub top_n: usize,
    /// JSON file of `{ "feature_id": "label" }` overrides.
    pub overrides: Option<PathBuf>,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            overrides: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteeringConfig {
    /// Must contain 0, the unsteered reference.
    pub classification_grid: Vec<f64>,
    pub allocation_grid: Vec<f64>,
    pub repetitions: usize,
    pub decoding: Decoding,
    /// Feature to steer in the classification grid; defaults to the feature
    /// matched to positive-sentiment tokens.
    pub classification_feature: Option<usize>,
    /// Feature to steer in the allocation grid; defaults to the feature
    /// matched to risk tokens.
    pub allocation_feature: Option<usize>,
    pub seed: RngSeed,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            classification_grid: DEFAULT_GRID.to_vec(),
            allocation_grid: DEFAULT_GRID.to_vec(),
            repetitions: 50,
            decoding: Decoding::Temperature { temperature: 1.0 },
            classification_feature: None,
            allocation_feature: None,
            seed: RngSeed(13),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub pooling: Pooling,
    pub rank: RankOptions,
    pub budgets: Vec<usize>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Mean,
            rank: RankOptions::default(),
            budgets: DEFAULT_BUDGETS.to_vec(),
        }
    }
}

/// Every parameter of a run. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed. When set, every module seed is derived from it.
    pub seed: Option<u64>,
    pub world: WorldSpec,
    pub corpus: LmCorpusSpec,
    pub lm: TinyLmConfig,
    pub lm_train: LmTrainOptions,
    /// Residual tap for the SAE and steering; the model midpoint if unset.
    pub tap: Option<usize>,
    /// `input_dim` is always taken from the LM width.
    pub sae: SaeConfig,
    /// Leading corpus sequences whose residuals train the SAE.
    pub sae_sequences: usize,
    pub labeling: LabelingConfig,
    pub steering: SteeringConfig,
    pub features: FeatureConfig,
    pub rolling: RollingConfig,
    pub cluster: ClusterOptions,
    /// JSON file of `{ "raw_cluster_id": "group name" }`.
    pub merge_map: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: Some(7),
            world: WorldSpec {
                num_days: 400,
                ..Default::default()
            },
            corpus: LmCorpusSpec::default(),
            lm: TinyLmConfig::default(),
            lm_train: LmTrainOptions {
                final_token_weight: 5.0,
                ..Default::default()
            },
            tap: None,
            sae: SaeConfig::default(),
            sae_sequences: 4000,
            labeling: LabelingConfig::default(),
            steering: SteeringConfig::default(),
            features: FeatureConfig::default(),
            rolling: RollingConfig::default(),
            cluster: ClusterOptions::default(),
            merge_map: None,
            output_dir: PathBuf::from("run"),
        }
    }
}

impl ExperimentConfig {
    /// A configuration small enough to run end to end in well under a
    /// minute on one core.
    pub fn smoke() -> Self {
        let mut c = Self::default();
        c.world.num_firms = 40;
        c.world.num_days = 120;
        c.world.news_rate = 0.6;
        c.corpus.classification_prompts = 2000;
        c.corpus.allocation_prompts = 500;
        c.lm.hidden_dim = 16;
        c.lm.num_layers = 2;
        c.lm_train.epochs = 3;
        c.sae.latent_dim = 48;
        c.sae.epochs = 5;
        c.sae_sequences = 800;
        c.labeling.top_n = 10;
        c.steering.repetitions = 10;
        c.features.rank.num_pcs = 16;
        c.features.rank.logistic.max_iter = 300;
        c.features.budgets = vec![5, 10, 30];
        c.rolling.train_days = 50;
        c.rolling.validation_days = 10;
        c.rolling.refit_days = 20;
        c.rolling.logistic.max_iter = 300;
        c.cluster.k_max = 6;
        c.cluster.restarts = 4;
        c.output_dir = PathBuf::from("smoke");
        c
    }

    /// Reads a config file, or the config embedded in a run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if value.get("format").and_then(|f| f.as_str()) == Some(manifest::FORMAT) {
            let m: RunManifest = serde_json::from_value(value).map_err(|e| Error::Config(format!("manifest: {e}")))?;
            return Ok(m.config);
        }
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn tap(&self) -> TapPoint {
        self.tap.map(TapPoint).unwrap_or_else(|| self.lm.default_tap())
    }

    /// Applies the master seed and ties `sae.input_dim` to the LM width.
    /// Idempotent.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.sae.input_dim = c.lm.hidden_dim;
        if let Some(s) = c.seed {
            let root = RngSeed(s);
            c.world.seed = root.derive_str("world");
            c.corpus.seed = root.derive_str("corpus");
            c.lm.seed = root.derive_str("lm");
            c.lm_train.seed = root.derive_str("lm-train");
            c.sae.seed = root.derive_str("sae");
            c.steering.seed = root.derive_str("steering");
            c.cluster.seed = root.derive_str("cluster");
        }
        c
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut m = BTreeMap::new();
        if let Some(s) = self.seed {
            m.insert("master".into(), s);
        }
        m.insert("world".into(), self.world.seed.0);
        m.insert("corpus".into(), self.corpus.seed.0);
        m.insert("lm".into(), self.lm.seed.0);
        m.insert("lm_train".into(), self.lm_train.seed.0);
        m.insert("sae".into(), self.sae.seed.0);
        m.insert("steering".into(), self.steering.seed.0);
        m.insert("cluster".into(), self.cluster.seed.0);
        m
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.world.validate()?;
        self.lm.validate()?;
        let vocab = Vocabulary::standard();
        if self.lm.vocab_size < vocab.len() {
            return bad(format!("lm.vocab_size {} is smaller than the {}-token vocabulary", self.lm.vocab_size, vocab.len()));
        }
        let news_prompt = self.world.max_news_len() + 3;
        let alloc_prompt = 2 + 2 * self.corpus.allocation.max_concept_tokens + 3 + 2;
        if news_prompt.max(alloc_prompt) > self.lm.max_seq_len {
            return bad(format!(
                "prompts need {} positions but lm.max_seq_len is {}",
                news_prompt.max(alloc_prompt),
                self.lm.max_seq_len
            ));
        }
        if self.lm_train.epochs == 0 || self.lm_train.batch_size == 0 || self.lm_train.learning_rate.is_nan() || self.lm_train.learning_rate <= 0.0 {
            return bad("lm_train needs positive epochs, batch_size and learning_rate".into());
        }
        if !(0.0..1.0).contains(&self.lm_train.holdout_fraction) {
            return bad("lm_train.holdout_fraction must be in [0, 1)".into());
        }
        if self.tap().0 > self.lm.num_layers {
            return bad(format!("tap {} exceeds the {} layers", self.tap().0, self.lm.num_layers));
        }
        let mut sae = self.sae.clone();
        sae.input_dim = self.lm.hidden_dim;
        sae.validate()?;
        let total = self.corpus.classification_prompts + self.corpus.allocation_prompts;
        if self.sae_sequences == 0 || self.sae_sequences > total {
            return bad(format!("sae_sequences must be in 1..={total}"));
        }
        if self.labeling.top_n == 0 {
            return bad("labeling.top_n must be positive".into());
        }
        let s = &self.steering;
        for (name, grid) in [("classification_grid", &s.classification_grid), ("allocation_grid", &s.allocation_grid)] {
            if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
                return bad(format!("steering.{name} must be non-empty and finite"));
            }
        }
        if !s.classification_grid.contains(&0.0) {
            return bad("steering.classification_grid must contain 0".into());
        }
        if s.repetitions == 0 {
            return bad("steering.repetitions must be positive".into());
        }
        for f in [s.classification_feature, s.allocation_feature].into_iter().flatten() {
            if f >= self.sae.latent_dim {
                return bad(format!("steering feature {f} exceeds sae.latent_dim {}", self.sae.latent_dim));
            }
        }
        if self.features.budgets.is_empty() || self.features.budgets.contains(&0) {
            return bad("features.budgets must be non-empty and positive".into());
        }
        if self.features.rank.num_pcs == 0 {
            return bad("features.rank.num_pcs must be positive".into());
        }
        self.rolling.validate(self.world.num_days)?;
        if self.cluster.k_min < 2 || self.cluster.k_min > self.cluster.k_max || self.cluster.restarts == 0 {
            return bad("cluster needs 2 <= k_min <= k_max and restarts >= 1".into());
        }
        if self.cluster.k_max >= self.sae.latent_dim {
            return bad("cluster.k_max must be below sae.latent_dim".into());
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("output_dir is empty".into());
        }
        Ok(())
    }
}
