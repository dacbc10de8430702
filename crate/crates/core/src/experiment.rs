//! End-to-end runs: data, per-client models, training and reports.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{generate_synthetic, load_csv_channels, window_and_split, ClientSeries, DataError};
use crate::federation::{run_training, ClientState, FederationError, Split};
use crate::metrics::weighted_average;
use crate::model::ClientModel;
use crate::params::ParamStore;
use crate::report::{ClientInfo, ClientResult, ReportLine, ReportWriter, SCHEMA_VERSION};
use crate::strategy::{comm_cost, Partition, StrategyError};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// 1 for bad configuration or input data, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Data(_) | RunError::Strategy(_) => 1,
            RunError::Federation(FederationError::Config { .. }) => 1,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_series(config: &RunConfig) -> Result<Vec<ClientSeries>, RunError> {
    match (&config.data.synthetic, &config.data.csv) {
        (Some(spec), _) => Ok(generate_synthetic(&config.synthetic_spec(spec))?),
        (None, Some(clients)) => Ok(clients
            .iter()
            .enumerate()
            .map(|(i, files)| load_csv_channels(files, i))
            .collect::<Result<_, _>>()?),
        (None, None) => Err(ConfigError::Invalid {
            field: "data".into(),
            message: "no data source".into(),
        }
        .into()),
    }
}

/// Windows every series, registers each client's model and partitions the
/// stores under the configured strategy.
pub fn build_clients(config: &RunConfig, series: &[ClientSeries]) -> Result<(Vec<ClientState>, Partition), RunError> {
    let m = &config.model;
    let mut clients = series
        .iter()
        .map(|s| {
            let data = window_and_split(s, m.history, m.horizon)?;
            let model = ClientModel::new(data.nodes, data.features, m, config.strategy.wiring());
            Ok(ClientState::new(
                s.client,
                data,
                model,
                config.federation.seed,
                config.federation.adam(),
            )?)
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let partition = {
        let mut stores: Vec<&mut ParamStore> = clients.iter_mut().map(|c| &mut c.params).collect();
        config.strategy.partition(&mut stores)?
    };
    if !partition.excluded.is_empty() {
        log::warn!(
            "{} parameters kept personal because their shapes differ across clients: {}",
            partition.excluded.len(),
            partition.excluded.join(", ")
        );
    }
    Ok((clients, partition))
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: PathBuf,
    pub clients: Vec<ClientResult>,
}

/// Trains per the config and writes `report.jsonl` plus one checkpoint per
/// client under the output directory.
pub fn run(config: &RunConfig) -> Result<RunOutcome, RunError> {
    let series = load_series(config)?;
    let (mut clients, partition) = build_clients(config, &series)?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let report_path = out.join("report.jsonl");
    let mut writer = ReportWriter::create(&report_path).map_err(io_err(&report_path))?;

    let per_client = comm_cost(&clients[0].params);
    writer
        .write(&ReportLine::Header {
            schema: SCHEMA_VERSION,
            strategy: config.strategy.label(),
            config: Box::new(config.clone()),
            clients: clients
                .iter()
                .map(|c| ClientInfo {
                    client: c.id,
                    nodes: c.node_count,
                    train_windows: c.data.train.len(),
                    valid_windows: c.data.valid.len(),
                    test_windows: c.data.test.len(),
                })
                .collect(),
            shared: partition.shared,
            excluded: partition.excluded,
            comm_cost_per_client: per_client,
        })
        .map_err(io_err(&report_path))?;

    let mut transmitted = 0;
    run_training(&mut clients, &config.federation, |round| {
        transmitted += round.shared_params_transmitted;
        log::info!(
            "round {}: validation MAE {}",
            round.round,
            round.validation.map_or("n/a".to_string(), |v| format!("{:.4}", v.mae))
        );
        Ok(writer.write(&ReportLine::Round(round.clone()))?)
    })?;

    let fed = &config.federation;
    let mut results = Vec::with_capacity(clients.len());
    for c in clients.iter_mut() {
        let test = c.evaluate(Split::Test, fed.batch_size, fed.mape_threshold)?;
        results.push(ClientResult {
            client: c.id,
            nodes: c.node_count,
            test,
        });
    }
    let weighted: Vec<_> = results
        .iter()
        .filter_map(|r| r.test.map(|m| (m, r.nodes as f64)))
        .collect();
    writer
        .write(&ReportLine::Final {
            clients: results.clone(),
            aggregate: weighted_average(&weighted),
            total_shared_params_transmitted: transmitted,
        })
        .map_err(io_err(&report_path))?;

    let ckpt = out.join("checkpoint");
    fs::create_dir_all(&ckpt).map_err(io_err(&ckpt))?;
    for c in &clients {
        let path = ckpt.join(format!("client_{}.bin", c.id));
        fs::write(&path, c.params.full_snapshot().to_bytes()).map_err(io_err(&path))?;
    }
    Ok(RunOutcome {
        report: report_path,
        clients: results,
    })
}
