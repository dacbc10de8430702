//! Client time series: synthetic generation, CSV ingestion, windowing and
//! train/valid/test splits.

use std::f64::consts::TAU;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: row {row}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        /// 1-based data row, not counting the header.
        row: usize,
        /// 1-based column.
        column: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One client's raw observations, `values: [time_steps, n, H]`. Channel 0 is
/// the predicted quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSeries {
    pub client: usize,
    pub node_ids: Vec<String>,
    pub values: Tensor,
}

impl ClientSeries {
    pub fn new(client: usize, node_ids: Vec<String>, values: Tensor) -> Result<Self> {
        let shape = values.shape();
        if shape.len() != 3 {
            return Err(DataError::Config(format!(
                "client {client}: series must be [time_steps, nodes, features], got {shape:?}"
            )));
        }
        if shape[1] == 0 || shape[2] == 0 {
            return Err(DataError::Config(format!(
                "client {client}: series has no nodes or features"
            )));
        }
        if node_ids.len() != shape[1] {
            return Err(DataError::Config(format!(
                "client {client}: {} node ids for {} nodes",
                node_ids.len(),
                shape[1]
            )));
        }
        if !values.is_finite() {
            return Err(DataError::Config(format!(
                "client {client}: series contains non-finite values"
            )));
        }
        Ok(Self {
            client,
            node_ids,
            values,
        })
    }

    pub fn time_steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn node_count(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn features(&self) -> usize {
        self.values.shape()[2]
    }

    fn at(&self, t: usize, node: usize, feature: usize) -> f64 {
        let (n, h) = (self.node_count(), self.features());
        self.values.data()[(t * n + node) * h + feature]
    }
}

/// Parameters of the synthetic non-IID generator.
///
/// Each client draws its own offset, daily and weekly amplitudes, and
/// phases; `heterogeneity` scales how far those draws stray from the shared
/// base values. Offsets come from separate strata, one per client. Every
/// node gets a scale factor (averaging 1 within a client) and a small phase
/// lag. A
/// client-wide AR(1) disturbance adds short-term structure that periodic
/// terms cannot explain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub clients: usize,
    pub nodes: usize,
    /// Overrides `nodes` per client when set.
    pub nodes_per_client: Option<Vec<usize>>,
    pub length: usize,
    pub seed: u64,
    pub steps_per_day: usize,
    pub days_per_week: usize,
    pub base_level: f64,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub heterogeneity: f64,
    /// Largest per-node phase lag, in time steps.
    pub max_node_lag: f64,
    pub disturbance_scale: f64,
    pub disturbance_persistence: f64,
    pub noise: f64,
    pub demand: bool,
    pub history: usize,
    pub horizon: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            clients: 4,
            nodes: 8,
            nodes_per_client: None,
            length: 2000,
            seed: 0,
            steps_per_day: 48,
            days_per_week: 7,
            base_level: 50.0,
            daily_amplitude: 20.0,
            weekly_amplitude: 6.0,
            heterogeneity: 1.0,
            max_node_lag: 3.0,
            disturbance_scale: 2.0,
            disturbance_persistence: 0.9,
            noise: 2.0,
            demand: false,
            history: 12,
            horizon: 12,
        }
    }
}

impl SyntheticSpec {
    pub fn node_counts(&self) -> Vec<usize> {
        match &self.nodes_per_client {
            Some(v) => v.clone(),
            None => vec![self.nodes; self.clients],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(DataError::Config("synthetic.clients must be at least 1".into()));
        }
        let counts = self.node_counts();
        if counts.len() != self.clients {
            return Err(DataError::Config(format!(
                "synthetic.nodes_per_client has {} entries for {} clients",
                counts.len(),
                self.clients
            )));
        }
        if counts.contains(&0) {
            return Err(DataError::Config("synthetic.nodes must be at least 1".into()));
        }
        if self.steps_per_day == 0 || self.days_per_week == 0 {
            return Err(DataError::Config(
                "synthetic.steps_per_day and days_per_week must be positive".into(),
            ));
        }
        if self.history == 0 || self.horizon == 0 {
            return Err(DataError::Config(
                "synthetic.history and horizon must be at least 1".into(),
            ));
        }
        let min = min_series_length(self.history, self.horizon);
        if self.length < min {
            return Err(DataError::Config(format!(
                "synthetic.length {} is too short: at least {min} steps are needed for one window per split",
                self.length
            )));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("heterogeneity", self.heterogeneity),
            ("max_node_lag", self.max_node_lag),
            ("disturbance_scale", self.disturbance_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DataError::Config(format!(
                    "synthetic.{name} must be finite and non-negative"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.disturbance_persistence) {
            return Err(DataError::Config(
                "synthetic.disturbance_persistence must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

struct ClientProfile {
    offset: f64,
    daily_amplitude: f64,
    daily_phase: f64,
    weekly_amplitude: f64,
    weekly_phase: f64,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<ClientSeries>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..=1.0);
    let het = spec.heterogeneity;
    let day = spec.steps_per_day as f64;
    let week = day * spec.days_per_week as f64;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");

    // Client levels sit in distinct, shuffled strata of [-1, 1] so no two
    // clients share a mean by chance.
    let mut strata: Vec<usize> = (0..spec.clients).collect();
    strata.shuffle(&mut rng);
    let count = spec.clients as f64;

    let mut out = Vec::with_capacity(spec.clients);
    for (client, n) in spec.node_counts().into_iter().enumerate() {
        let level = (2.0 * strata[client] as f64 + 1.0 + 0.5 * unit(&mut rng)) / count - 1.0;
        let profile = ClientProfile {
            offset: spec.base_level * (1.0 + 0.4 * het * level),
            daily_amplitude: spec.daily_amplitude * (1.0 + 0.5 * het * unit(&mut rng)),
            daily_phase: 0.5 * TAU * het * unit(&mut rng),
            weekly_amplitude: spec.weekly_amplitude * (1.0 + 0.5 * het * unit(&mut rng)),
            weekly_phase: 0.5 * TAU * het * unit(&mut rng),
        };
        let mut scales: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..=1.4)).collect();
        let mean_scale = scales.iter().sum::<f64>() / n as f64;
        scales.iter_mut().for_each(|s| *s /= mean_scale);
        let lags: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=spec.max_node_lag)).collect();

        let mut values = Vec::with_capacity(spec.length * n);
        let mut disturbance = 0.0;
        let rho = spec.disturbance_persistence;
        let innovation = spec.disturbance_scale * (1.0 - rho * rho).sqrt();
        for t in 0..spec.length {
            disturbance = rho * disturbance + innovation * noise.sample(&mut rng);
            for j in 0..n {
                let tt = t as f64 - lags[j];
                let daily = profile.daily_amplitude * (TAU * tt / day + profile.daily_phase).sin();
                let weekly = profile.weekly_amplitude * (TAU * tt / week + profile.weekly_phase).sin();
                let mut v = scales[j] * (profile.offset + daily + weekly + disturbance);
                if spec.noise > 0.0 {
                    v += spec.noise * noise.sample(&mut rng);
                }
                if spec.demand {
                    v = v.max(0.0).round();
                }
                values.push(v);
            }
        }
        let ids = (0..n).map(|j| format!("c{client}n{j}")).collect();
        let tensor = Tensor::new(&[spec.length, n, 1], values).expect("length matches shape");
        out.push(ClientSeries::new(client, ids, tensor)?);
    }
    Ok(out)
}

/// Reads one channel: a header of node identifiers and one row per step.
pub fn load_csv(path: &Path, client: usize) -> Result<ClientSeries> {
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let (ids, rows) = read_table(BufReader::new(file), path)?;
    let (steps, n) = (rows.len(), ids.len());
    let values = Tensor::new(&[steps, n, 1], rows.concat()).expect("rows are rectangular");
    ClientSeries::new(client, ids, values)
}

/// Reads one file per feature channel; the first file is the target. All
/// files must agree on node ids and length.
pub fn load_csv_channels(paths: &[PathBuf], client: usize) -> Result<ClientSeries> {
    let Some(first) = paths.first() else {
        return Err(DataError::Config(format!("client {client}: no CSV files given")));
    };
    let channels: Vec<ClientSeries> = paths.iter().map(|p| load_csv(p, client)).collect::<Result<_>>()?;
    let base = &channels[0];
    for (series, path) in channels.iter().zip(paths).skip(1) {
        if series.node_ids != base.node_ids || series.time_steps() != base.time_steps() {
            return Err(DataError::Malformed {
                path: path.clone(),
                message: format!("node ids or length differ from {}", first.display()),
            });
        }
    }
    let (steps, n, h) = (base.time_steps(), base.node_count(), channels.len());
    let mut data = Vec::with_capacity(steps * n * h);
    for t in 0..steps {
        for j in 0..n {
            for c in &channels {
                data.push(c.at(t, j, 0));
            }
        }
    }
    ClientSeries::new(
        client,
        base.node_ids.clone(),
        Tensor::new(&[steps, n, h], data).expect("shape"),
    )
}

fn read_table<R: Read>(reader: R, path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let malformed = |message: String| DataError::Malformed {
        path: path.to_path_buf(),
        message,
    };
    let ids: Vec<String> = csv
        .headers()
        .map_err(|e| malformed(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if ids.is_empty() || ids.iter().all(String::is_empty) {
        return Err(malformed("empty file: no header row".into()));
    }
    let mut rows = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| malformed(format!("row {row}: {e}")))?;
        if record.len() != ids.len() {
            return Err(DataError::Parse {
                path: path.to_path_buf(),
                row,
                column: record.len().min(ids.len()) + 1,
                message: format!("expected {} cells, found {}", ids.len(), record.len()),
            });
        }
        let mut values = Vec::with_capacity(ids.len());
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                path: path.to_path_buf(),
                row,
                column: j + 1,
                message: format!("cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(DataError::Parse {
                    path: path.to_path_buf(),
                    row,
                    column: j + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(malformed("no data rows".into()));
    }
    Ok((ids, rows))
}

/// Writes each feature channel `c` of `series`. With one channel the file is
/// exactly `path`; otherwise channel `c` goes to `<stem>.<c>.csv`.
pub fn write_csv(series: &ClientSeries, path: &Path) -> Result<Vec<PathBuf>> {
    let h = series.features();
    let paths: Vec<PathBuf> = if h == 1 {
        vec![path.to_path_buf()]
    } else {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
        (0..h).map(|c| path.with_file_name(format!("{stem}.{c}.csv"))).collect()
    };
    for (c, p) in paths.iter().enumerate() {
        let io = |source| DataError::Io {
            path: p.clone(),
            source,
        };
        let mut w = BufWriter::new(File::create(p).map_err(io)?);
        writeln!(w, "{}", series.node_ids.join(",")).map_err(io)?;
        for t in 0..series.time_steps() {
            let row: Vec<String> = (0..series.node_count())
                .map(|j| format!("{:?}", series.at(t, j, c)))
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }
    Ok(paths)
}

/// History block `x: [T, n, H]` (normalized) and target block `y: [T', n]`
/// (original units).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSample {
    pub x: Tensor,
    pub y: Tensor,
    /// Index of the first target step in the source series.
    pub target_start: usize,
}

/// Per-(node, feature) z-score statistics, flattened `node * H + feature`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations below this are treated as one.
pub const STD_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub client: usize,
    pub nodes: usize,
    pub features: usize,
    pub history: usize,
    pub horizon: usize,
    pub train: Vec<WindowedSample>,
    pub valid: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
    pub stats: NormStats,
    /// Time-axis cut points `[train_end, valid_end]`.
    pub cuts: [usize; 2],
}

impl SplitDataset {
    /// Mean and std of the target channel for `node`.
    pub fn target_stats(&self, node: usize) -> (f64, f64) {
        let k = node * self.features;
        (self.stats.mean[k], self.stats.std[k])
    }
}

pub fn split_points(length: usize) -> [usize; 2] {
    [length * 6 / 10, length * 8 / 10]
}

fn windows_in(len: usize, history: usize, horizon: usize) -> usize {
    (len + 1).saturating_sub(history + horizon)
}

/// Shortest series that yields at least one window in each split.
pub fn min_series_length(history: usize, horizon: usize) -> usize {
    let w = history + horizon;
    (w..)
        .find(|&l| {
            let [a, b] = split_points(l);
            a >= w && b - a >= w && l - b >= w
        })
        .expect("a long enough series exists")
}

pub fn window_and_split(series: &ClientSeries, history: usize, horizon: usize) -> Result<SplitDataset> {
    if history == 0 || horizon == 0 {
        return Err(DataError::Config("history and horizon must be at least 1".into()));
    }
    let l = series.time_steps();
    let min = min_series_length(history, horizon);
    if l < min {
        return Err(DataError::Config(format!(
            "client {}: series of length {l} is too short; at least {min} steps are required",
            series.client
        )));
    }
    let (n, h) = (series.node_count(), series.features());
    let [train_end, valid_end] = split_points(l);

    let mut mean = vec![0.0; n * h];
    let mut std = vec![0.0; n * h];
    for t in 0..train_end {
        for (k, m) in mean.iter_mut().enumerate() {
            *m += series.at(t, k / h, k % h);
        }
    }
    mean.iter_mut().for_each(|m| *m /= train_end as f64);
    for t in 0..train_end {
        for (k, s) in std.iter_mut().enumerate() {
            *s += (series.at(t, k / h, k % h) - mean[k]).powi(2);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / train_end as f64).sqrt();
        if *s < STD_GUARD {
            *s = 1.0;
        }
    }

    let windows = |start: usize, end: usize| -> Vec<WindowedSample> {
        (0..windows_in(end - start, history, horizon))
            .map(|i| {
                let t0 = start + i;
                let mut x = Vec::with_capacity(history * n * h);
                for t in t0..t0 + history {
                    for k in 0..n * h {
                        x.push((series.at(t, k / h, k % h) - mean[k]) / std[k]);
                    }
                }
                let mut y = Vec::with_capacity(horizon * n);
                for t in t0 + history..t0 + history + horizon {
                    for j in 0..n {
                        y.push(series.at(t, j, 0));
                    }
                }
                WindowedSample {
                    x: Tensor::new(&[history, n, h], x).expect("shape"),
                    y: Tensor::new(&[horizon, n], y).expect("shape"),
                    target_start: t0 + history,
                }
            })
            .collect()
    };

    Ok(SplitDataset {
        client: series.client,
        nodes: n,
        features: h,
        history,
        horizon,
        train: windows(0, train_end),
        valid: windows(train_end, valid_end),
        test: windows(valid_end, l),
        stats: NormStats { mean, std },
        cuts: [train_end, valid_end],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: Vec<f64>, n: usize) -> ClientSeries {
        let steps = values.len() / n;
        let ids = (0..n).map(|j| format!("n{j}")).collect();
        ClientSeries::new(0, ids, Tensor::new(&[steps, n, 1], values).unwrap()).unwrap()
    }

    #[test]
    fn noiseless_generation_is_reproducible() {
        let spec = SyntheticSpec {
            noise: 0.0,
            length: 200,
            ..SyntheticSpec::default()
        };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
    }

    #[test]
    fn demand_mode_yields_counts() {
        let spec = SyntheticSpec {
            demand: true,
            base_level: 5.0,
            length: 300,
            ..SyntheticSpec::default()
        };
        for c in generate_synthetic(&spec).unwrap() {
            assert!(c.values.data().iter().all(|v| *v >= 0.0 && v.fract() == 0.0));
        }
    }

    #[test]
    fn short_synthetic_length_names_minimum() {
        let spec = SyntheticSpec {
            length: 30,
            ..SyntheticSpec::default()
        };
        let msg = generate_synthetic(&spec).unwrap_err().to_string();
        assert!(msg.contains(&min_series_length(12, 12).to_string()), "{msg}");
    }

    #[test]
    fn train_window_count() {
        for l in [10usize, 17, 50, 101] {
            let s = series((0..l).map(|v| v as f64).collect(), 1);
            let d = window_and_split(&s, 1, 1).unwrap();
            assert_eq!(d.train.len(), l * 6 / 10 - 1);
        }
    }

    #[test]
    fn windows_respect_cuts_and_are_contiguous() {
        let s = series((0..240).map(|v| v as f64).collect(), 2);
        let d = window_and_split(&s, 4, 3).unwrap();
        let [a, b] = d.cuts;
        let check = |ws: &[WindowedSample], lo: usize, hi: usize| {
            for w in ws {
                let start = w.target_start - 4;
                assert!(start >= lo && w.target_start + 3 <= hi);
                // value at step t, node 0 equals 2t
                assert_eq!(w.y.data()[0], (2 * w.target_start) as f64);
            }
        };
        check(&d.train, 0, a);
        check(&d.valid, a, b);
        check(&d.test, b, 120);
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let s = series(vec![7.0; 60], 2);
        let d = window_and_split(&s, 2, 2).unwrap();
        assert!(d.train.iter().all(|w| w.x.data().iter().all(|v| *v == 0.0)));
        assert_eq!(d.train[0].y.data(), &[7.0, 7.0, 7.0, 7.0]);
    }

    #[test]
    fn too_short_series_is_rejected() {
        let s = series(vec![1.0; 20], 1);
        let err = window_and_split(&s, 12, 12).unwrap_err().to_string();
        assert!(err.contains(&min_series_length(12, 12).to_string()), "{err}");
    }
}
