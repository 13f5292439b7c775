//! Checkpoint file: a single JSON object
//!
//! ```text
//! { "format": "loanscreen-checkpoint", "version": 1,
//!   "config": ModelConfig, "stats": FeatureStats,
//!   "params": [ { "name": .., "shape": [..], "data": [..] }, .. ] }
//! ```
//!
//! Parameters appear in `ModelConfig::parameter_layout` order. Floats use
//! shortest round-trip formatting, so save then load is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};
use crate::data::FeatureStats;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "loanscreen-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    /// Standardization statistics the model was trained with.
    pub stats: FeatureStats,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(model: &Model, stats: &FeatureStats) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config().clone(),
            stats: stats.clone(),
            params: model
                .names()
                .iter()
                .zip(model.params())
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<(Model, FeatureStats)> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let mut names = Vec::with_capacity(self.params.len());
        let mut tensors = Vec::with_capacity(self.params.len());
        for p in self.params {
            tensors.push(Tensor::new(p.shape, p.data)?);
            names.push(p.name);
        }
        let model = Model::from_parts(self.config, names, tensors)?;
        Ok((model, self.stats))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, stats: &FeatureStats) -> Result<()> {
    let text = serde_json::to_string(&Checkpoint::new(model, stats))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(path, text).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, FeatureStats)> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BackboneKind;

    fn stats() -> FeatureStats {
        FeatureStats {
            sequence_mean: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            sequence_std: [1.0 / 3.0; 6],
            demographic_mean: [std::f64::consts::PI; 6],
            demographic_std: [1.5; 6],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in BackboneKind::ALL {
            let cfg = ModelConfig {
                backbone: kind,
                ..ModelConfig::default()
            };
            let model = Model::new(cfg, 11).unwrap();
            let path = dir.path().join(format!("{kind}.json"));
            save_checkpoint(&path, &model, &stats()).unwrap();
            let (back, s) = load_checkpoint(&path).unwrap();
            assert_eq!(s, stats());
            for (a, b) in model.params().iter().zip(back.params()) {
                let abits: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
                let bbits: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
                assert_eq!(abits, bbits);
            }
        }
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let model = Model::new(ModelConfig::default(), 1).unwrap();
        let mut ckpt = Checkpoint::new(&model, &stats());
        ckpt.config.hidden_dim = 32;
        assert!(matches!(ckpt.into_model(), Err(ModelError::Checkpoint(_))));
    }
}
