//! Line-oriented JSON run reports and the comparison table built from them.

use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::federation::RoundReport;
use crate::metrics::MetricsReport;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientInfo {
    pub client: usize,
    pub nodes: usize,
    pub train_windows: usize,
    pub valid_windows: usize,
    pub test_windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResult {
    pub client: usize,
    pub nodes: usize,
    pub test: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportLine {
    Header {
        schema: u32,
        strategy: String,
        config: Box<RunConfig>,
        clients: Vec<ClientInfo>,
        shared: Vec<String>,
        excluded: Vec<String>,
        comm_cost_per_client: usize,
    },
    Round(RoundReport),
    Final {
        clients: Vec<ClientResult>,
        /// Node-weighted over clients.
        aggregate: Option<MetricsReport>,
        total_shared_params_transmitted: usize,
    },
}

/// Appends one flushed line per record so a crashed run leaves a
/// parseable prefix.
pub struct ReportWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl ReportWriter {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, line: &ReportLine) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: incompatible report: {message}")]
    Schema { path: PathBuf, message: String },
}

/// A parsed report file.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub path: PathBuf,
    pub strategy: String,
    pub header: ReportLine,
    pub rounds: Vec<RoundReport>,
    pub clients: Vec<ClientResult>,
    pub aggregate: Option<MetricsReport>,
}

impl Report {
    pub fn read(path: &Path) -> Result<Self, ReportError> {
        let schema = |message: String| ReportError::Schema {
            path: path.to_path_buf(),
            message,
        };
        let file = File::open(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut lines = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|source| ReportError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ReportLine = serde_json::from_str(&line).map_err(|e| schema(format!("line {}: {e}", i + 1)))?;
            lines.push(parsed);
        }
        let mut iter = lines.into_iter();
        let header = iter.next().ok_or_else(|| schema("empty file".into()))?;
        let strategy = match &header {
            ReportLine::Header {
                schema: v, strategy, ..
            } => {
                if *v != SCHEMA_VERSION {
                    return Err(schema(format!("schema version {v}, expected {SCHEMA_VERSION}")));
                }
                strategy.clone()
            }
            _ => return Err(schema("first line is not a header".into())),
        };
        let mut rounds = Vec::new();
        let mut fin = None;
        for line in iter {
            match line {
                ReportLine::Round(r) if fin.is_none() => rounds.push(r),
                ReportLine::Final { clients, aggregate, .. } if fin.is_none() => fin = Some((clients, aggregate)),
                _ => return Err(schema("unexpected line after the final record".into())),
            }
        }
        let (clients, aggregate) = fin.ok_or_else(|| schema("no final record (incomplete run?)".into()))?;
        Ok(Self {
            path: path.to_path_buf(),
            strategy,
            header,
            rounds,
            clients,
            aggregate,
        })
    }
}

/// One row of the comparison table. `client == None` is the aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub report: String,
    pub strategy: String,
    pub client: Option<usize>,
    pub mae: f64,
    pub rmse: f64,
    pub mape_percent: f64,
    /// Best-in-group flags for MAE, RMSE and MAPE. Ties are all marked.
    pub best: [bool; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareTable {
    pub rows: Vec<CompareRow>,
}

pub fn compare(paths: &[PathBuf]) -> Result<CompareTable, ReportError> {
    let reports = paths.iter().map(|p| Report::read(p)).collect::<Result<Vec<_>, _>>()?;
    let first = reports.first();
    for r in &reports {
        let ids: Vec<usize> = r.clients.iter().map(|c| c.client).collect();
        let expected: Vec<usize> = first
            .map(|f| f.clients.iter().map(|c| c.client).collect())
            .unwrap_or_default();
        if ids != expected {
            return Err(ReportError::Schema {
                path: r.path.clone(),
                message: format!("client set {ids:?} differs from {expected:?}"),
            });
        }
    }
    let mut rows = Vec::new();
    for r in &reports {
        let name = r
            .path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let name = if name == "report.jsonl" {
            r.path
                .parent()
                .and_then(Path::file_name)
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(name)
        } else {
            name
        };
        let mut push = |client: Option<usize>, m: &MetricsReport| {
            rows.push(CompareRow {
                report: name.clone(),
                strategy: r.strategy.clone(),
                client,
                mae: m.mae,
                rmse: m.rmse,
                mape_percent: m.mape_percent,
                best: [false; 3],
            })
        };
        if let Some(m) = &r.aggregate {
            push(None, m);
        }
        for c in &r.clients {
            if let Some(m) = &c.test {
                push(Some(c.client), m);
            }
        }
    }
    let groups: Vec<Option<usize>> = {
        let mut g: Vec<Option<usize>> = rows.iter().map(|r| r.client).collect();
        g.sort();
        g.dedup();
        g
    };
    for g in groups {
        for k in 0..3 {
            let value = |r: &CompareRow| [r.mae, r.rmse, r.mape_percent][k];
            let best = rows
                .iter()
                .filter(|r| r.client == g)
                .map(value)
                .fold(f64::INFINITY, f64::min);
            for r in rows.iter_mut().filter(|r| r.client == g) {
                r.best[k] = value(r) == best;
            }
        }
    }
    Ok(CompareTable { rows })
}

impl fmt::Display for CompareTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |v: f64, best: bool| {
            let mut s = format!("{v:.4}");
            s.push(if best { '*' } else { ' ' });
            s
        };
        let wr = self.rows.iter().map(|r| r.report.len()).max().unwrap_or(0).max(6);
        let ws = self.rows.iter().map(|r| r.strategy.len()).max().unwrap_or(0).max(8);
        writeln!(
            f,
            "{:<wr$}  {:<ws$}  {:>6}  {:>12}  {:>12}  {:>12}",
            "report", "strategy", "client", "MAE", "RMSE", "MAPE%"
        )?;
        for r in &self.rows {
            let client = r.client.map_or_else(|| "all".to_string(), |c| c.to_string());
            let mut line = String::new();
            write!(
                line,
                "{:<wr$}  {:<ws$}  {:>6}  {:>12}  {:>12}  {:>12}",
                r.report,
                r.strategy,
                client,
                cell(r.mae, r.best[0]),
                cell(r.rmse, r.best[1]),
                cell(r.mape_percent, r.best[2]),
            )?;
            writeln!(f, "{}", line.trim_end())?;
        }
        write!(f, "* best in its client group")
    }
}
