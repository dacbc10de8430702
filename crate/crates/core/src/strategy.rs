//! Training strategies: which parameters are shared and how the model is
//! wired for each of the compared methods.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Wiring;
use crate::params::{Group, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    Local,
    Fedavg,
    Fedper,
    Autofed,
}

impl StrategyName {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyName::Local => "local",
            StrategyName::Fedavg => "fedavg",
            StrategyName::Fedper => "fedper",
            StrategyName::Autofed => "autofed",
        }
    }
}

/// Forces every parameter whose name starts with `prefix` into `group`.
/// Rules apply in order after the strategy's default split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionRule {
    pub prefix: String,
    pub group: Group,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategySpec {
    pub name: StrategyName,
    pub without_ae: bool,
    pub without_fedbn: bool,
    pub overrides: Vec<PartitionRule>,
}

impl Default for StrategySpec {
    fn default() -> Self {
        Self::plain(StrategyName::Autofed)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("strategy.{flag} is only valid with the autofed strategy, not {name}")]
    AblationWithoutAutofed { flag: &'static str, name: &'static str },
    #[error("no clients to partition")]
    NoClients,
    #[error("client {client} is missing parameter `{name}`")]
    MissingParam { client: usize, name: String },
}

/// Result of splitting every client's store.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shared: Vec<String>,
    /// Names a strategy wanted to share but could not because shapes differ
    /// across clients.
    pub excluded: Vec<String>,
}

impl StrategySpec {
    pub fn plain(name: StrategyName) -> Self {
        Self {
            name,
            without_ae: false,
            without_fedbn: false,
            overrides: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), StrategyError> {
        if self.name != StrategyName::Autofed {
            for (flag, set) in [("without_ae", self.without_ae), ("without_fedbn", self.without_fedbn)] {
                if set {
                    return Err(StrategyError::AblationWithoutAutofed {
                        flag,
                        name: self.name.as_str(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Short name used in reports, e.g. `autofed-without_ae`.
    pub fn label(&self) -> String {
        let mut s = self.name.as_str().to_string();
        if self.without_ae {
            s.push_str("-without_ae");
        }
        if self.without_fedbn {
            s.push_str("-without_fedbn");
        }
        s
    }

    pub fn wiring(&self) -> Wiring {
        match self.name {
            StrategyName::Autofed => Wiring::Prompted {
                denoiser: !self.without_ae,
            },
            _ => Wiring::Unprompted,
        }
    }

    /// Default group of a parameter under this strategy.
    pub fn default_group(&self, name: &str) -> Group {
        let shared = match self.name {
            StrategyName::Local => false,
            StrategyName::Fedavg => true,
            StrategyName::Fedper => name.starts_with("pp.encoder.cell"),
            StrategyName::Autofed => {
                name.starts_with("fr.ae.")
                    || name.starts_with("fr.adapter.linear")
                    || (self.without_fedbn && name.starts_with("fr.adapter.bn"))
            }
        };
        if shared {
            Group::Shared
        } else {
            Group::Personal
        }
    }

    fn group_of(&self, name: &str) -> Group {
        let mut group = self.default_group(name);
        for rule in &self.overrides {
            if name.starts_with(&rule.prefix) {
                group = rule.group;
            }
        }
        group
    }

    /// Assigns groups in every client store. A name is shared only if every
    /// client holds it with the same shape; otherwise it stays personal and
    /// is listed as excluded.
    pub fn partition(&self, stores: &mut [&mut ParamStore]) -> Result<Partition, StrategyError> {
        self.validate()?;
        let first = stores.first().ok_or(StrategyError::NoClients)?;
        let names: Vec<(String, Vec<usize>)> = first
            .iter()
            .map(|(n, p)| (n.to_string(), p.tensor.shape().to_vec()))
            .collect();
        let mut out = Partition::default();
        for (name, shape) in names {
            let mut group = self.group_of(&name);
            if group == Group::Shared {
                let compatible = stores
                    .iter()
                    .all(|s| s.get(&name).map(|t| t.shape() == shape.as_slice()).unwrap_or(false));
                if !compatible {
                    group = Group::Personal;
                    out.excluded.push(name.clone());
                } else {
                    out.shared.push(name.clone());
                }
            }
            for (client, s) in stores.iter_mut().enumerate() {
                s.set_group(&name, group).map_err(|_| StrategyError::MissingParam {
                    client,
                    name: name.clone(),
                })?;
            }
        }
        // Names only some clients hold can never be shared.
        for (client, s) in stores.iter().enumerate() {
            if let Some(extra) = s.shared_names().into_iter().find(|n| !out.shared.contains(n)) {
                return Err(StrategyError::MissingParam { client, name: extra });
            }
        }
        Ok(out)
    }
}

/// Scalars a client uploads or downloads per round: the SHARED entries.
pub fn comm_cost(store: &ParamStore) -> usize {
    store
        .iter()
        .filter(|(_, p)| p.group == Group::Shared)
        .map(|(_, p)| p.tensor.numel())
        .sum()
}
