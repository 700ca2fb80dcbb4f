//! Flat `key=value` run configuration.
//!
//! One namespace-dotted key per line, `#` comments, unknown keys are errors.
//! Command-line `--set key=value` overrides apply last-write-wins; the fully
//! resolved config is echoed into every run manifest.

use std::collections::BTreeMap;
use std::path::Path;

use unimob_core::alignment::MiningConfig;
use unimob_core::denoiser::DenoiserConfig;
use unimob_core::domain::GridSpec;
use unimob_core::eval::EvalConfig;
use unimob_core::model::ModelConfig;
use unimob_core::synth::{AgentParams, CorruptionSpec};
use unimob_core::tokenizer::TokenizerConfig;
use unimob_core::train::{configure_variant, AblationSwitches, TrainConfig, Variant, VariantConfig};

use crate::error::{AppError, Result};

/// Typed view of the resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Every known key with its default value.
pub fn default_entries() -> Vec<(&'static str, String)> {
    vec![
        ("grid.rows", "10".to_string()),
        ("grid.cols", "10".to_string()),
        ("grid.cell_size", "500".to_string()),
        ("grid.origin_lat", "31.0".to_string()),
        ("grid.origin_lon", "121.0".to_string()),
        ("grid.interval", "3600".to_string()),
        ("data.agents", "500".to_string()),
        ("data.days", "7".to_string()),
        ("data.seed", "42".to_string()),
        ("data.rho", "0.6".to_string()),
        ("data.gamma_epr", "0.21".to_string()),
        ("data.home_attachment", "0.9".to_string()),
        ("data.rush_hours", "7,8,17,18".to_string()),
        ("data.night_hours", "22,23,0,1,2,3,4,5".to_string()),
        ("data.work_hubs", "8".to_string()),
        ("data.move_prob", "0.25".to_string()),
        ("task.history", "24".to_string()),
        ("task.horizon", "12".to_string()),
        ("token.traj_len", "1".to_string()),
        ("token.flow_len", "12".to_string()),
        ("token.stride", "12".to_string()),
        ("token.width", "64".to_string()),
        ("model.d_model", "128".to_string()),
        ("model.layers", "4".to_string()),
        ("model.heads", "4".to_string()),
        ("model.mlp_ratio", "4".to_string()),
        ("diffusion.t_steps", "200".to_string()),
        ("diffusion.beta_start", "0.0001".to_string()),
        ("diffusion.beta_end", "0.02".to_string()),
        ("loss.alpha", "0.5".to_string()),
        ("loss.beta", "0.5".to_string()),
        ("loss.gamma", "1.0".to_string()),
        ("loss.tau", "0.1".to_string()),
        ("loss.peak_quantile", "0.8".to_string()),
        ("loss.n_neg", "8".to_string()),
        ("train.steps", "500".to_string()),
        ("train.batch", "32".to_string()),
        ("train.lr", "0.001".to_string()),
        ("train.seed", "1".to_string()),
        ("train.marginal_dropout", "0.15".to_string()),
        ("train.table_lr", "0.1".to_string()),
        ("variant", "v4".to_string()),
        ("ablate.use_i2c", "true".to_string()),
        ("ablate.use_c2i", "true".to_string()),
        ("ablate.shared_transformer", "true".to_string()),
        ("ablate.use_flow_data", "true".to_string()),
        ("ablate.use_traj_data", "true".to_string()),
        ("eval.users", "150".to_string()),
        ("eval.anchor_stride", "6".to_string()),
        ("eval.draws", "1".to_string()),
        ("eval.seed", "1".to_string()),
        ("corrupt.flow_noise", "0".to_string()),
        ("corrupt.traj_noise", "0".to_string()),
        ("corrupt.region_missing", "0".to_string()),
        ("corrupt.traj_subsample", "1".to_string()),
        ("baseline.ha_season", "0".to_string()),
        ("baseline.var_lag", "24".to_string()),
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: default_entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                AppError::config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    /// Apply one override; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !self.values.contains_key(key) {
            return Err(AppError::config(format!("unknown config key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<()> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| AppError::config(format!("--set expects key=value, got `{s}`")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(|s| s.as_str()).unwrap_or_default()
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)
            .parse::<T>()
            .map_err(|_| AppError::config(format!("config key `{key}`: bad value `{}`", self.get(key))))
    }

    fn parse_list(&self, key: &str) -> Result<Vec<usize>> {
        let raw = self.get(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| AppError::config(format!("config key `{key}`: bad value `{raw}`")))
            })
            .collect()
    }

    /// Sorted `key=value` lines for manifests and config echoes.
    pub fn to_lines(&self) -> Vec<String> {
        self.values.iter().map(|(k, v)| format!("{k}={v}")).collect()
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(
            self.parse("grid.rows")?,
            self.parse("grid.cols")?,
            self.parse("grid.cell_size")?,
            (self.parse("grid.origin_lat")?, self.parse("grid.origin_lon")?),
            self.parse("grid.interval")?,
        )
        .map_err(|e| AppError::config(format!("{e}")))
    }

    pub fn n_steps(&self) -> Result<usize> {
        let days: usize = self.parse("data.days")?;
        Ok(days * self.grid()?.steps_per_day)
    }

    pub fn agent_params(&self) -> Result<AgentParams> {
        Ok(AgentParams {
            n_agents: self.parse("data.agents")?,
            rho: self.parse("data.rho")?,
            gamma_epr: self.parse("data.gamma_epr")?,
            home_attachment: self.parse("data.home_attachment")?,
            rush_hours: self.parse_list("data.rush_hours")?,
            night_hours: self.parse_list("data.night_hours")?,
            n_work_hubs: self.parse("data.work_hubs")?,
            move_prob: self.parse("data.move_prob")?,
        })
    }

    pub fn data_seed(&self) -> Result<u64> {
        self.parse("data.seed")
    }

    pub fn tokenizer(&self) -> Result<TokenizerConfig> {
        Ok(TokenizerConfig {
            token_len_traj: self.parse("token.traj_len")?,
            token_len_flow: self.parse("token.flow_len")?,
            stride: self.parse("token.stride")?,
            embed_width: self.parse("token.width")?,
            history_len: self.parse("task.history")?,
            horizon: self.parse("task.horizon")?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let variant = self.variant()?;
        let switches = self.switches()?;
        Ok(ModelConfig {
            tokenizer: self.tokenizer()?,
            denoiser: DenoiserConfig {
                token_width: self.parse("token.width")?,
                d_model: self.parse("model.d_model")?,
                n_layers: self.parse("model.layers")?,
                n_heads: self.parse("model.heads")?,
                mlp_ratio: self.parse("model.mlp_ratio")?,
            },
            shared_backbone: configure_variant(variant).shared_backbone
                && switches.shared_transformer,
            use_traj: switches.use_traj_data,
            use_flow: switches.use_flow_data,
            n_channels: 2,
            diffusion_steps: self.parse("diffusion.t_steps")?,
            beta_start: self.parse("diffusion.beta_start")?,
            beta_end: self.parse("diffusion.beta_end")?,
        })
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(self.get("variant")).map_err(|e| AppError::config(format!("{e}")))
    }

    pub fn variant_config(&self) -> Result<VariantConfig> {
        Ok(configure_variant(self.variant()?))
    }

    pub fn switches(&self) -> Result<AblationSwitches> {
        let s = AblationSwitches {
            use_i2c: self.parse("ablate.use_i2c")?,
            use_c2i: self.parse("ablate.use_c2i")?,
            shared_transformer: self.parse("ablate.shared_transformer")?,
            use_flow_data: self.parse("ablate.use_flow_data")?,
            use_traj_data: self.parse("ablate.use_traj_data")?,
        };
        s.validate().map_err(|e| AppError::config(format!("{e}")))?;
        Ok(s)
    }

    pub fn weights(&self) -> Result<unimob_core::train::LossWeights> {
        Ok(unimob_core::train::LossWeights {
            alpha: self.parse("loss.alpha")?,
            beta: self.parse("loss.beta")?,
            gamma: self.parse("loss.gamma")?,
        })
    }

    pub fn mining(&self) -> Result<MiningConfig> {
        Ok(MiningConfig {
            peak_quantile: self.parse("loss.peak_quantile")?,
            n_negatives: self.parse("loss.n_neg")?,
            temperature: self.parse("loss.tau")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.parse("train.steps")?,
            batch_size: self.parse("train.batch")?,
            lr: self.parse("train.lr")?,
            seed: self.parse("train.seed")?,
            marginal_dropout: self.parse("train.marginal_dropout")?,
            table_lr_mult: self.parse("train.table_lr")?,
            ..Default::default()
        })
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            n_users: self.parse("eval.users")?,
            anchor_stride: self.parse("eval.anchor_stride")?,
            n_draws: self.parse("eval.draws")?,
            seed: self.parse("eval.seed")?,
        })
    }

    pub fn corruption(&self) -> Result<CorruptionSpec> {
        Ok(CorruptionSpec {
            flow_noise_level: self.parse("corrupt.flow_noise")?,
            traj_noise_ratio: self.parse("corrupt.traj_noise")?,
            region_missing_ratio: self.parse("corrupt.region_missing")?,
            traj_subsample_ratio: self.parse("corrupt.traj_subsample")?,
        })
    }

    /// HA season length; the 0 default resolves to one week of steps.
    pub fn ha_season(&self) -> Result<usize> {
        let raw: usize = self.parse("baseline.ha_season")?;
        if raw == 0 {
            Ok(self.grid()?.steps_per_day * 7)
        } else {
            Ok(raw)
        }
    }

    pub fn var_lag(&self) -> Result<usize> {
        self.parse("baseline.var_lag")
    }
}
