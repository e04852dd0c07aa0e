use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer encoder-decoder hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub ff_width: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub dropout_act: f64,
    pub dropout_attn: f64,
    pub dropout_prepost: f64,
    pub max_positions: usize,
    pub label_smoothing: f64,
    /// Source embeddings, target embeddings and the output projection share one matrix.
    pub tie_embeddings: bool,
    /// Xavier magnitude; weights are drawn from `U(-a, a)` with `a = sqrt(scale / avg_fan)`.
    pub init_scale: f64,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            ff_width: 256,
            heads: 4,
            vocab_size: 1000,
            dropout_act: 0.1,
            dropout_attn: 0.1,
            dropout_prepost: 0.1,
            max_positions: 200,
            label_smoothing: 0.1,
            tie_embeddings: true,
            init_scale: 3.0,
            layer_norm_eps: 1e-5,
        }
    }
}

/// Named architectures of the capacity ladder (`d_model = 512`, 8 heads,
/// 32K shared vocabulary) plus the desk-scale defaults.
pub const PRESETS: &[&str] = &[
    "Bl", "Ctx", "Deep-52", "Deep-60", "Deep-68", "Deep-76", "Wide-52", "Wide-60", "Wide-68", "Wide-76", "desk",
    "desk-deep", "desk-wide",
];

impl ModelConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let full_size = |dec_layers: usize, ff_width: usize| ModelConfig {
            enc_layers: 6,
            dec_layers,
            d_model: 512,
            ff_width,
            heads: 8,
            vocab_size: 32_000,
            ..ModelConfig::default()
        };
        let cfg = match name {
            "Bl" | "Ctx" => full_size(2, 2048),
            "Deep-52" => full_size(4, 2048),
            "Deep-60" => full_size(6, 2048),
            "Deep-68" => full_size(8, 2048),
            "Deep-76" => full_size(10, 2048),
            "Wide-52" => full_size(2, 3072),
            "Wide-60" => full_size(2, 4096),
            "Wide-68" => full_size(2, 5120),
            "Wide-76" => full_size(2, 6144),
            "desk" => ModelConfig::default(),
            "desk-deep" => ModelConfig {
                dec_layers: 4,
                ..ModelConfig::default()
            },
            "desk-wide" => ModelConfig {
                ff_width: 640,
                ..ModelConfig::default()
            },
            other => {
                return Err(Error::contract(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("ff_width", self.ff_width),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in extents {
            if v == 0 {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        for (name, p) in [
            ("dropout_act", self.dropout_act),
            ("dropout_attn", self.dropout_attn),
            ("dropout_prepost", self.dropout_prepost),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::contract(format!("{name} {p} outside [0, 1)")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Same architecture with all dropout disabled.
    pub fn without_dropout(&self) -> Self {
        ModelConfig {
            dropout_act: 0.0,
            dropout_attn: 0.0,
            dropout_prepost: 0.0,
            ..self.clone()
        }
    }

    /// Plain `key = value` text.
    pub fn to_kv(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::contract(format!("model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_kv())?;
        Ok(())
    }
}

/// Closed-form number of scalars allocated for `config`.
pub fn parameter_count(config: &ModelConfig) -> usize {
    let d = config.d_model;
    let v = config.vocab_size;
    let attention = 4 * d * d + 4 * d;
    let feed_forward = 2 * d * config.ff_width + d + config.ff_width;
    let norm = 2 * d;
    let embeddings = if config.tie_embeddings { v * d } else { 2 * v * d };
    let encoder = config.enc_layers * (attention + feed_forward + 2 * norm);
    let decoder = config.dec_layers * (2 * attention + feed_forward + 3 * norm);
    embeddings + encoder + decoder + 2 * norm
}
