//! The server loop: client sampling, local updates, delta aggregation and
//! broadcast of the shared parameters.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{SplitDataset, WindowedSample};
use crate::metrics::{weighted_average, MetricsReport, DEFAULT_MAPE_THRESHOLD};
use crate::model::{Batch, ClientModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::{CodecError, ParamStore, Snapshot};
use crate::predictor::LossTerms;
use crate::strategy::comm_cost;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `1 / |S|` per participant.
    #[default]
    Uniform,
    /// `|V_i| / Σ_{j∈S} |V_j|`.
    NodeWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub fraction: f64,
    pub weighting: Weighting,
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Validate every client after each round.
    pub validate: bool,
    /// Keep every batch's loss terms in the round reports.
    pub log_batches: bool,
    pub mape_threshold: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 1,
            fraction: 1.0,
            weighting: Weighting::Uniform,
            seed: 0,
            batch_size: 128,
            learning_rate: 1e-3,
            validate: true,
            log_batches: false,
            mape_threshold: DEFAULT_MAPE_THRESHOLD,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        let bad = |field: &'static str, reason: &str| {
            Err(FederationError::Config {
                field,
                reason: reason.into(),
            })
        };
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be at least 1");
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return bad("fraction", "must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if !(self.mape_threshold.is_finite() && self.mape_threshold >= 0.0) {
            return bad("mape_threshold", "must be finite and non-negative");
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    /// Number of clients sampled per round.
    pub fn participants(&self, clients: usize) -> usize {
        ((self.fraction * clients as f64).ceil() as usize).clamp(1, clients.max(1))
    }
}

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("federation.{field} {reason}")]
    Config { field: &'static str, reason: String },
    #[error("no deltas to aggregate")]
    NoDeltas,
    #[error("no clients")]
    NoClients,
    #[error("non-finite loss in round {round}, client {client}")]
    NonFinite { round: usize, client: usize },
    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("transport: {0}")]
    Transport(#[from] CodecError),
    #[error("report output: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything one client holds across rounds.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: SplitDataset,
    pub model: ClientModel,
    pub params: ParamStore,
    pub optimizer: Adam,
    pub node_count: usize,
    shuffle: ChaCha8Rng,
}

impl ClientState {
    /// Registers fresh parameters drawn from a stream keyed by `(seed, id)`.
    pub fn new(
        id: usize,
        data: SplitDataset,
        model: ClientModel,
        seed: u64,
        adam: AdamConfig,
    ) -> crate::tensor::Result<Self> {
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        init.set_stream(2 * id as u64);
        let mut shuffle = ChaCha8Rng::seed_from_u64(seed);
        shuffle.set_stream(2 * id as u64 + 1);
        let mut params = ParamStore::new();
        model.register(&mut params, &mut init)?;
        Ok(Self {
            id,
            node_count: data.nodes,
            data,
            model,
            params,
            optimizer: Adam::new(adam),
            shuffle,
        })
    }

    pub fn evaluate(
        &mut self,
        samples: Split,
        batch_size: usize,
        mape_threshold: f64,
    ) -> crate::tensor::Result<Option<MetricsReport>> {
        let set = match samples {
            Split::Train => &self.data.train,
            Split::Valid => &self.data.valid,
            Split::Test => &self.data.test,
        };
        if set.is_empty() {
            return Ok(None);
        }
        self.model
            .evaluate(&mut self.params, set, &self.data, batch_size, mape_threshold)
            .map(Some)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// What a client sends back after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client: usize,
    /// `Θ_i − Θ`; `None` when the client had nothing to train on.
    pub delta: Option<Snapshot>,
    pub batches: Vec<LossTerms>,
}

/// Loads `theta`, trains for the configured epochs and returns the shared
/// delta. Personal parameters and optimizer state stay on the client.
pub fn client_update(
    client: &mut ClientState,
    theta: &Snapshot,
    config: &FederationConfig,
    round: usize,
) -> Result<ClientUpdate, FederationError> {
    if config.local_epochs == 0 {
        return Err(FederationError::Config {
            field: "local_epochs",
            reason: "must be at least 1".into(),
        });
    }
    let wrap = |source| FederationError::Client {
        client: client.id,
        source,
    };
    client.params.load(theta).map_err(wrap)?;
    if client.data.train.is_empty() {
        log::warn!("round {round}: client {} has no training windows, skipped", client.id);
        return Ok(ClientUpdate {
            client: client.id,
            delta: None,
            batches: Vec::new(),
        });
    }
    let mut order: Vec<usize> = (0..client.data.train.len()).collect();
    let mut batches = Vec::new();
    for _ in 0..config.local_epochs {
        order.shuffle(&mut client.shuffle);
        for chunk in order.chunks(config.batch_size) {
            let samples: Vec<&WindowedSample> = chunk.iter().map(|&i| &client.data.train[i]).collect();
            let batch = Batch::new(&samples, &client.data).map_err(wrap)?;
            let terms = client
                .model
                .train_step(&mut client.params, &mut client.optimizer, &batch)
                .map_err(wrap)?;
            if !terms.total.is_finite() {
                return Err(FederationError::NonFinite {
                    round,
                    client: client.id,
                });
            }
            batches.push(terms);
        }
    }
    let delta = client.params.shared_snapshot().delta_from(theta).map_err(wrap)?;
    Ok(ClientUpdate {
        client: client.id,
        delta: Some(delta),
        batches,
    })
}

/// `Θ + Σ w_i ΔΘ_i` over `(delta, node_count)` pairs, summed in the given
/// order.
pub fn aggregate(
    theta: &Snapshot,
    deltas: &[(&Snapshot, usize)],
    weighting: Weighting,
) -> Result<Snapshot, FederationError> {
    if deltas.is_empty() {
        return Err(FederationError::NoDeltas);
    }
    let total_nodes: usize = deltas.iter().map(|(_, n)| n).sum();
    let weights: Vec<f64> = deltas
        .iter()
        .map(|(_, n)| match weighting {
            Weighting::Uniform => 1.0 / deltas.len() as f64,
            Weighting::NodeWeighted => *n as f64 / total_nodes as f64,
        })
        .collect();
    let mut out = Snapshot::default();
    for (name, base) in &theta.entries {
        let mut step = vec![0.0; base.numel()];
        for ((delta, _), w) in deltas.iter().zip(&weights) {
            let d = delta.get(name).ok_or_else(|| TensorError::UnknownParam(name.clone()))?;
            if d.shape() != base.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "aggregate",
                    left: base.shape().to_vec(),
                    right: d.shape().to_vec(),
                }
                .into());
            }
            for (s, v) in step.iter_mut().zip(d.data()) {
                *s += w * v;
            }
        }
        let data = base.data().iter().zip(&step).map(|(b, s)| b + s).collect();
        out.entries.insert(name.clone(), Tensor::new(base.shape(), data)?);
    }
    Ok(out)
}

/// Sends shared parameters through the byte codec, as a networked
/// deployment would.
pub fn transport(snapshot: &Snapshot) -> Result<Snapshot, FederationError> {
    Ok(Snapshot::read_from(snapshot.to_bytes().as_slice())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: usize,
    pub participated: bool,
    /// Set when the client was sampled but had no training data.
    pub skipped: bool,
    pub train_loss: Option<f64>,
    pub prediction_loss: Option<f64>,
    pub ae_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub guarded_batches: usize,
    pub validation: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub batches: Vec<LossTerms>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Scalars moved this round: download plus upload per participant.
    pub shared_params_transmitted: usize,
    pub clients: Vec<ClientRound>,
    /// Node-weighted validation metrics over clients.
    pub validation: Option<MetricsReport>,
}

/// Picks `⌈fraction·n⌉` distinct clients, returned in ascending order.
pub fn sample_clients(rng: &mut ChaCha8Rng, clients: usize, count: usize) -> Vec<usize> {
    let mut picked = sample(rng, clients, count.min(clients)).into_vec();
    picked.sort_unstable();
    picked
}

/// Initial shared parameters: the first client's, copied to every client.
pub fn synchronize(clients: &mut [ClientState]) -> Result<Snapshot, FederationError> {
    let first = clients.first().ok_or(FederationError::NoClients)?;
    let theta = first.params.shared_snapshot();
    for c in clients.iter_mut() {
        c.params.load(&theta)?;
    }
    Ok(theta)
}

/// Runs all rounds. `on_round` sees each report as soon as it is complete.
/// Client updates run in parallel; results are reduced in client order so
/// the outcome does not depend on scheduling.
pub fn run_training(
    clients: &mut [ClientState],
    config: &FederationConfig,
    mut on_round: impl FnMut(&RoundReport) -> Result<(), FederationError>,
) -> Result<Vec<RoundReport>, FederationError> {
    config.validate()?;
    let mut theta = synchronize(clients)?;
    let per_client = comm_cost(&clients[0].params);
    let mut server = ChaCha8Rng::seed_from_u64(config.seed);
    server.set_stream(u64::MAX);
    let count = config.participants(clients.len());
    let mut reports = Vec::with_capacity(config.rounds);

    for round in 0..config.rounds {
        let participants = sample_clients(&mut server, clients.len(), count);
        let broadcast = transport(&theta)?;
        let updates: Vec<Result<ClientUpdate, FederationError>> = clients
            .par_iter_mut()
            .filter(|c| participants.contains(&c.id))
            .map(|c| client_update(c, &broadcast, config, round))
            .collect();
        let updates: Vec<ClientUpdate> = updates.into_iter().collect::<Result<_, _>>()?;

        let uploaded: Vec<(Snapshot, usize)> = updates
            .iter()
            .filter_map(|u| {
                let d = u.delta.as_ref()?;
                Some(transport(d).map(|d| (d, clients[u.client].node_count)))
            })
            .collect::<Result<_, _>>()?;
        if !uploaded.is_empty() {
            let refs: Vec<(&Snapshot, usize)> = uploaded.iter().map(|(d, n)| (d, *n)).collect();
            theta = aggregate(&theta, &refs, config.weighting)?;
        }
        for c in clients.iter_mut() {
            c.params.load(&theta)?;
        }

        let validation: Vec<Option<MetricsReport>> = if config.validate {
            clients
                .par_iter_mut()
                .map(|c| c.evaluate(Split::Valid, config.batch_size, config.mape_threshold))
                .collect::<crate::tensor::Result<_>>()?
        } else {
            vec![None; clients.len()]
        };

        let mut records = Vec::with_capacity(clients.len());
        for (c, val) in clients.iter().zip(&validation) {
            let update = updates.iter().find(|u| u.client == c.id);
            let mean = |f: fn(&LossTerms) -> f64| {
                update
                    .filter(|u| !u.batches.is_empty())
                    .map(|u| u.batches.iter().map(f).sum::<f64>() / u.batches.len() as f64)
            };
            records.push(ClientRound {
                client: c.id,
                participated: update.is_some(),
                skipped: update.is_some_and(|u| u.delta.is_none()),
                train_loss: mean(|t| t.total),
                prediction_loss: mean(|t| t.prediction),
                ae_loss: mean(|t| t.ae),
                alpha: mean(|t| t.alpha),
                guarded_batches: update.map_or(0, |u| u.batches.iter().filter(|t| t.guarded).count()),
                validation: *val,
                batches: match (config.log_batches, update) {
                    (true, Some(u)) => u.batches.clone(),
                    _ => Vec::new(),
                },
            });
        }
        let weighted: Vec<(MetricsReport, f64)> = clients
            .iter()
            .zip(&validation)
            .filter_map(|(c, v)| v.map(|m| (m, c.node_count as f64)))
            .collect();
        let report = RoundReport {
            round,
            shared_params_transmitted: 2 * per_client * participants.len(),
            participants,
            clients: records,
            validation: weighted_average(&weighted),
        };
        on_round(&report)?;
        reports.push(report);
    }
    Ok(reports)
}
