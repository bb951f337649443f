//! The run configuration document.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::coupling::{CouplingConfig, CouplingMode};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::tensor::DType;
use crate::training::{DataConfig, TrainingConfig};

/// Environment variable consulted for the seed when no `--seed` is given.
pub const SEED_ENV: &str = "MAIL_SEED";

fn default_encoder() -> EncoderConfig {
    EncoderConfig::toy()
}

fn default_coupling() -> CouplingConfig {
    CouplingConfig::new(CouplingMode::Bidirectional, 4, 16)
}

fn default_data() -> DataConfig {
    DataConfig {
        classes: 16,
        pool_per_class: 12,
        noise: 0.1,
        latent_dim: 16,
        name_len: 2,
    }
}

fn default_precision() -> DType {
    DType::F32
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a command needs, as one JSON document. Every section and
/// field has a default, so `{}` is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_encoder")]
    pub encoder: EncoderConfig,
    #[serde(default = "default_coupling")]
    pub coupling: CouplingConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default = "default_data")]
    pub data: DataConfig,
    #[serde(default = "default_precision")]
    pub precision: DType,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: default_encoder(),
            coupling: default_coupling(),
            training: TrainingConfig::default(),
            data: default_data(),
            precision: default_precision(),
            output_dir: default_output_dir(),
            seed: None,
        }
    }
}

fn prefixed(section: &str, e: Error) -> Error {
    match e {
        Error::Config { key, message } => Error::Config {
            key: format!("{section}.{key}"),
            message,
        },
        other => other,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(|e| prefixed("encoder", e))?;
        self.coupling
            .validate(&self.encoder)
            .map_err(|e| prefixed("coupling", e))?;
        self.training.validate().map_err(|e| prefixed("training", e))?;
        self.data.validate(&self.encoder).map_err(|e| prefixed("data", e))?;
        if self.training.shots > self.data.pool_per_class {
            return Err(Error::config(
                "training.shots",
                format!("exceeds data.pool_per_class = {}", self.data.pool_per_class),
            ));
        }
        Ok(())
    }

    /// Seed precedence: explicit flag, then `MAIL_SEED`, then the document,
    /// then 0.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64> {
        if let Some(s) = flag {
            return Ok(s);
        }
        if let Ok(v) = std::env::var(SEED_ENV) {
            return v
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("not an unsigned integer: {v:?}")));
        }
        Ok(self.seed.unwrap_or(0))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses and validates a configuration document. Errors name the offending
/// key path, e.g. `coupling.d_m`.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let key = if path == "." { "<document>".to_string() } else { path };
        Error::Config {
            key,
            message: inner.to_string(),
        }
    })?;
    de.end().map_err(|e| Error::config("<document>", e.to_string()))?;
    config.validate()?;
    Ok(config)
}
