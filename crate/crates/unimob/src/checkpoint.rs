//! Versioned JSON checkpoints: parameters, schedule config, normalization
//! stats, decode head, and the resolved run configuration.
//!
//! JSON floats are written with shortest-roundtrip formatting, so reloading
//! reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use unimob_core::domain::GridSpec;
use unimob_core::model::{Model, ModelConfig};
use unimob_core::predict::FlowHead;
use unimob_core::tokenizer::FlowNormStats;

use crate::error::{AppError, Result};

pub const CHECKPOINT_FORMAT: &str = "unimob-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub grid: GridSpec,
    pub model_cfg: ModelConfig,
    pub init_seed: u64,
    pub params: Vec<f64>,
    pub norm: FlowNormStats,
    pub flow_head: Option<FlowHead>,
    /// Resolved config lines the producing run used.
    pub resolved_config: Vec<String>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, resolved_config: Vec<String>) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            grid: model.grid.clone(),
            model_cfg: model.cfg.clone(),
            init_seed: model.init_seed,
            params: model.params.clone(),
            norm: model.norm.clone(),
            flow_head: model.flow_head.clone(),
            resolved_config,
        }
    }

    /// Rebuild the model: the layout is deterministic in (grid, cfg), so
    /// reconstruction plus a parameter overwrite restores it exactly.
    pub fn into_model(self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(AppError::data(format!(
                "unsupported checkpoint format `{}` (expected {CHECKPOINT_FORMAT})",
                self.format
            )));
        }
        let mut model = Model::init(self.grid, self.model_cfg, self.init_seed)
            .map_err(|e| AppError::data(format!("checkpoint model rebuild: {e}")))?;
        if model.params.len() != self.params.len() {
            return Err(AppError::data(format!(
                "checkpoint has {} parameters, layout expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        model.params = self.params;
        model.norm = self.norm;
        model.flow_head = self.flow_head;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        crate::manifest::write_atomic(path, json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use unimob_core::denoiser::DenoiserConfig;
    use unimob_core::tokenizer::TokenizerConfig;

    fn small_model() -> Model {
        let grid = GridSpec::new(3, 3, 100.0, (0.0, 0.0), 3600).unwrap();
        let cfg = ModelConfig {
            tokenizer: TokenizerConfig {
                token_len_traj: 1,
                token_len_flow: 4,
                stride: 4,
                embed_width: 16,
                history_len: 8,
                horizon: 4,
            },
            denoiser: DenoiserConfig {
                token_width: 16,
                d_model: 16,
                n_layers: 1,
                n_heads: 2,
                mlp_ratio: 2,
            },
            shared_backbone: true,
            use_traj: true,
            use_flow: true,
            n_channels: 2,
            diffusion_steps: 10,
            beta_start: 1e-4,
            beta_end: 0.05,
        };
        Model::init(grid, cfg, 9).unwrap()
    }

    #[test]
    fn save_load_is_bit_exact() {
        let mut model = small_model();
        // scramble parameters with awkward values
        for (i, p) in model.params.iter_mut().enumerate() {
            *p += (i as f64) * 1e-13 + 0.1234567890123456;
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::from_model(&model, vec!["a=1".into()]).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.norm, model.norm);

        // saving the reloaded model reproduces the same bytes
        let path2 = dir.path().join("ck2.json");
        Checkpoint::from_model(&back, vec!["a=1".into()]).save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn foreign_format_is_rejected() {
        let model = small_model();
        let mut ck = Checkpoint::from_model(&model, vec![]);
        ck.format = "other".into();
        let err = ck.into_model().unwrap_err();
        assert_eq!(err.class(), "DataError");
    }
}
