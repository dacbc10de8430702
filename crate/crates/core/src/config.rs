//! Run configuration, read from a TOML file.
//!
//! ```toml
//! output_dir = "out/autofed"
//!
//! [strategy]
//! name = "autofed"          # local | fedavg | fedper | autofed
//! without_ae = false
//! without_fedbn = false
//!
//! [model]
//! hidden = 16
//! history = 12
//! horizon = 12
//!
//! [federation]
//! rounds = 30
//! batch_size = 32
//! seed = 0                  # falls back to $AUTOFED_SEED, then 0
//!
//! [data.synthetic]
//! clients = 4
//! nodes = 8
//! length = 2000
//! ```
//!
//! Instead of `[data.synthetic]`, `data.csv` lists one array of files per
//! client; each file is one feature channel and the first is the target.
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{min_series_length, SyntheticSpec};
use crate::federation::FederationConfig;
use crate::model::ModelConfig;
use crate::strategy::StrategySpec;

/// Supplies `federation.seed` when the config leaves it out.
pub const SEED_ENV: &str = "AUTOFED_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Syntax { path: PathBuf, message: String },
    #[error("invalid `{field}`: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    pub synthetic: Option<SyntheticSpec>,
    /// Per client, one CSV per feature channel.
    pub csv: Option<Vec<Vec<PathBuf>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub federation: FederationConfig,
    pub data: DataSource,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("autofed-out")
}

impl RunConfig {
    /// Parses `text`, filling a missing seed from `env_seed` and resolving
    /// relative paths against `base`.
    pub fn parse(text: &str, origin: &Path, base: &Path, env_seed: Option<&str>) -> Result<Self, ConfigError> {
        let syntax = |message: String| ConfigError::Syntax {
            path: origin.to_path_buf(),
            message,
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| syntax(e.to_string()))?;
        if let Some(raw) = env_seed {
            let seed: i64 = raw
                .trim()
                .parse()
                .ok()
                .filter(|s| *s >= 0)
                .ok_or_else(|| invalid(SEED_ENV, format!("{raw:?} is not a non-negative integer")))?;
            let fed = table
                .entry("federation")
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            if let toml::Value::Table(fed) = fed {
                fed.entry("seed").or_insert(toml::Value::Integer(seed));
            }
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| syntax(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let env = std::env::var(SEED_ENV).ok();
        Self::parse(&text, path, base, env.as_deref())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        self.output_dir = join(&self.output_dir);
        if let Some(files) = &mut self.data.csv {
            for client in files.iter_mut() {
                for p in client.iter_mut() {
                    *p = join(p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.strategy
            .validate()
            .map_err(|e| invalid("strategy", e.to_string()))?;
        let m = &self.model;
        for (field, v) in [
            ("model.hidden", m.hidden),
            ("model.layers", m.layers),
            ("model.history", m.history),
            ("model.horizon", m.horizon),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be at least 1"));
            }
        }
        if m.head_hidden == Some(0) {
            return Err(invalid("model.head_hidden", "must be at least 1"));
        }
        if !(m.batch_norm.momentum > 0.0 && m.batch_norm.momentum <= 1.0) {
            return Err(invalid("model.batch_norm.momentum", "must lie in (0, 1]"));
        }
        if m.batch_norm.epsilon.is_nan() || m.batch_norm.epsilon < 0.0 {
            return Err(invalid("model.batch_norm.epsilon", "must be non-negative"));
        }
        if m.loss.guard.is_nan() || m.loss.guard < 0.0 {
            return Err(invalid("model.loss.guard", "must be non-negative"));
        }
        if m.loss.alpha_max.is_nan() || m.loss.alpha_max <= 0.0 {
            return Err(invalid("model.loss.alpha_max", "must be positive"));
        }
        self.federation.validate().map_err(|e| match e {
            crate::federation::FederationError::Config { field, reason } => {
                invalid(&format!("federation.{field}"), reason)
            }
            other => invalid("federation", other.to_string()),
        })?;
        match (&self.data.synthetic, &self.data.csv) {
            (Some(_), Some(_)) => Err(invalid("data", "give either `synthetic` or `csv`, not both")),
            (None, None) => Err(invalid("data", "one of `synthetic` or `csv` is required")),
            (Some(spec), None) => {
                let spec = self.synthetic_spec(spec);
                spec.validate().map_err(|e| invalid("data.synthetic", e.to_string()))
            }
            (None, Some(clients)) => {
                if clients.is_empty() {
                    return Err(invalid("data.csv", "lists no clients"));
                }
                for (i, files) in clients.iter().enumerate() {
                    if files.is_empty() {
                        return Err(invalid(&format!("data.csv[{i}]"), "lists no files"));
                    }
                    for f in files {
                        if !f.is_file() {
                            return Err(invalid(
                                &format!("data.csv[{i}]"),
                                format!("{} does not exist", f.display()),
                            ));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// The synthetic spec with window lengths taken from the model.
    pub fn synthetic_spec(&self, spec: &SyntheticSpec) -> SyntheticSpec {
        SyntheticSpec {
            history: self.model.history,
            horizon: self.model.horizon,
            ..spec.clone()
        }
    }

    pub fn min_length(&self) -> usize {
        min_series_length(self.model.history, self.model.horizon)
    }
}
