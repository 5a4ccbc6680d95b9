// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy decoder-only transformer with residual-stream taps.

mod collect;
mod grad;
mod model;
mod train;

use std::path::Path;

pub use collect::{collect_residuals, collect_residuals_filtered, generate, sample_token, Decoding, Provenance, ResidualDataset};
pub use model::{BlockParams, ForwardTrace, LmParams, TapPoint, TinyLm, TinyLmConfig};
pub use train::{mean_token_loss, train_from, train_lm, LmTrainOptions, LmTrainReport};

use crate::checkpoint::TensorFile;
use crate::error::Result;

impl TinyLm {
    pub fn save(&self, path: &Path) -> Result<()> {
        let config = serde_json::to_value(&self.config)?;
        TensorFile::new("tinylm", config, self.params.named_tensors()).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = TensorFile::read(path, "tinylm")?;
        let config: TinyLmConfig = serde_json::from_value(file.config.clone())?;
        config.validate()?;
        let mut params = LmParams::zeros(&config);
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        file.fill(&names, params.tensors_mut())?;
        Ok(Self { config, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngSeed;

    #[test]
    fn checkpoint_roundtrip_is_lossless() {
        let m = TinyLm::init(TinyLmConfig {
            vocab_size: 10,
            hidden_dim: 4,
            num_layers: 1,
            num_heads: 1,
            max_seq_len: 4,
            mlp_ratio: 2,
            seed: RngSeed(8),
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lm.json");
        m.save(&p).unwrap();
        assert_eq!(TinyLm::load(&p).unwrap(), m);
    }
}
