//! Dataset ingestion, normalization and chronological windowing.

use std::fs;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::spatial::RoadGraph;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Raw readings on a road network, `steps × nodes`, at a fixed interval.
#[derive(Clone, Debug)]
pub struct EmissionDataset {
    pub graph: RoadGraph,
    pub timestamps: Vec<NaiveDateTime>,
    pub series: Tensor,
    pub step_minutes: u32,
}

/// What ingestion had to fill in.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ImputationReport {
    pub missing: usize,
    pub total: usize,
}

impl ImputationReport {
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.missing as f64 / self.total as f64
        }
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    NaiveDateTime::parse_from_str(s, TIMESTAMP_FORMAT)
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S"))
        .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M"))
        .ok()
        .or_else(|| DateTime::parse_from_rfc3339(s).ok().map(|d| d.naive_utc()))
}

fn parse_cell(s: &str) -> Result<f64> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") || s.eq_ignore_ascii_case("na") {
        return Ok(f64::NAN);
    }
    let v: f64 = s
        .parse()
        .map_err(|_| Error::Data(format!("cannot parse reading {s:?}")))?;
    if v.is_infinite() {
        return Err(Error::Data(format!("infinite reading {s:?}")));
    }
    Ok(v)
}

/// Wide CSV: timestamp column then one column per node id.
pub struct SeriesTable {
    pub node_ids: Vec<String>,
    pub timestamps: Vec<NaiveDateTime>,
    /// `steps × nodes`; missing cells are NaN.
    pub values: Tensor,
}

pub fn read_series_csv(path: &Path) -> Result<SeriesTable> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })?;
    let header = reader.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Data(format!(
            "{}: expected a timestamp column and at least one node column",
            path.display()
        )));
    }
    let node_ids: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                line + 2,
                rec.len(),
                header.len()
            )));
        }
        let ts = parse_timestamp(&rec[0]).ok_or_else(|| {
            Error::Data(format!("{}: bad timestamp {:?} on row {}", path.display(), &rec[0], line + 2))
        })?;
        timestamps.push(ts);
        for cell in rec.iter().skip(1) {
            values.push(parse_cell(cell)?);
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    let values = Tensor::matrix(timestamps.len(), node_ids.len(), values)?;
    Ok(SeriesTable {
        node_ids,
        timestamps,
        values,
    })
}

pub fn write_series_csv(path: &Path, node_ids: &[String], timestamps: &[NaiveDateTime], values: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{other:?}")),
    })?;
    let mut header = vec!["timestamp".to_string()];
    header.extend(node_ids.iter().cloned());
    w.write_record(&header)?;
    for (r, ts) in timestamps.iter().enumerate() {
        let mut row = vec![ts.format(TIMESTAMP_FORMAT).to_string()];
        row.extend(values.row(r).iter().map(|v| format!("{v}")));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Forward fill then back fill, column by column. A column with no
/// observation at all is an error.
pub fn impute(values: &mut Tensor, node_ids: &[String]) -> Result<ImputationReport> {
    let (rows, cols) = (values.rows(), values.cols());
    let mut missing = 0;
    for c in 0..cols {
        let mut last = None;
        for r in 0..rows {
            let v = values.get(r, c);
            if v.is_nan() {
                missing += 1;
                if let Some(l) = last {
                    values.set(r, c, l);
                }
            } else {
                last = Some(v);
            }
        }
        let first = (0..rows).map(|r| values.get(r, c)).find(|v| !v.is_nan());
        let Some(first) = first else {
            return Err(Error::Data(format!("node {} has no observations", node_ids[c])));
        };
        for r in 0..rows {
            if !values.get(r, c).is_nan() {
                break;
            }
            values.set(r, c, first);
        }
    }
    Ok(ImputationReport {
        missing,
        total: rows * cols,
    })
}

fn infer_step(timestamps: &[NaiveDateTime]) -> Result<u32> {
    if timestamps.len() < 2 {
        return Err(Error::Data("need at least two timestamps".into()));
    }
    let step = (timestamps[1] - timestamps[0]).num_minutes();
    if step <= 0 {
        return Err(Error::Data("timestamps must be strictly increasing".into()));
    }
    for (i, w) in timestamps.windows(2).enumerate() {
        if (w[1] - w[0]).num_minutes() != step {
            return Err(Error::Data(format!(
                "irregular sampling between rows {} and {}",
                i + 2,
                i + 3
            )));
        }
    }
    Ok(step as u32)
}

impl EmissionDataset {
    pub fn new(graph: RoadGraph, timestamps: Vec<NaiveDateTime>, series: Tensor) -> Result<Self> {
        if series.rows() != timestamps.len() || series.cols() != graph.node_count() {
            return Err(Error::Data(format!(
                "series {:?} does not match {} timestamps and {} nodes",
                series.shape(),
                timestamps.len(),
                graph.node_count()
            )));
        }
        if !series.is_finite() {
            return Err(Error::Data("series contains non-finite readings".into()));
        }
        let step_minutes = infer_step(&timestamps)?;
        Ok(EmissionDataset {
            graph,
            timestamps,
            series,
            step_minutes,
        })
    }

    /// Reads `series.csv` and `graph.json`, reordering graph nodes to the CSV
    /// column order and imputing gaps.
    pub fn load(series_csv: &Path, graph_json: &Path, alpha: f64) -> Result<(Self, ImputationReport)> {
        let mut table = read_series_csv(series_csv)?;
        let graph = RoadGraph::load_json(graph_json, alpha)?;
        let order = table
            .node_ids
            .iter()
            .map(|id| {
                graph.node_ids().iter().position(|g| g == id).ok_or_else(|| {
                    Error::Data(format!("series column {id:?} is not a node of the graph"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if order.len() != graph.node_count() {
            return Err(Error::Data(format!(
                "graph has {} nodes, series has {} columns",
                graph.node_count(),
                order.len()
            )));
        }
        let graph = graph.subgraph(&order)?;
        let report = impute(&mut table.values, &table.node_ids)?;
        if report.missing > 0 {
            log::info!(
                "imputed {} of {} readings ({:.3}%)",
                report.missing,
                report.total,
                100.0 * report.rate()
            );
        }
        Ok((EmissionDataset::new(graph, table.timestamps, table.values)?, report))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_series_csv(&dir.join("series.csv"), self.graph.node_ids(), &self.timestamps, &self.series)?;
        self.graph.save_json(&dir.join("graph.json"))
    }

    pub fn steps(&self) -> usize {
        self.series.rows()
    }

    pub fn nodes(&self) -> usize {
        self.series.cols()
    }

    pub fn steps_per_day(&self) -> usize {
        (24 * 60 / self.step_minutes) as usize
    }

    /// Keeps only the listed node columns.
    pub fn select_nodes(&self, keep: &[usize]) -> Result<Self> {
        let series = Tensor::from_fn(self.steps(), keep.len(), |r, c| self.series.get(r, keep[c]));
        Ok(EmissionDataset {
            graph: self.graph.subgraph(keep)?,
            timestamps: self.timestamps.clone(),
            series,
            step_minutes: self.step_minutes,
        })
    }

    pub fn hour_of(&self, step: usize) -> u32 {
        self.timestamps[step].hour()
    }
}

/// Per-node z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Standard deviations at or below this fraction of the node's scale count
/// as constant.
const MIN_RELATIVE_STD: f64 = 1e-12;

impl NormStats {
    /// Statistics over `rows` of `series`, population standard deviation.
    pub fn fit(series: &Tensor, rows: Range<usize>) -> Self {
        let n = rows.len() as f64;
        let mut mean = vec![0.0; series.cols()];
        let mut std = vec![0.0; series.cols()];
        for c in 0..series.cols() {
            let m = rows.clone().map(|r| series.get(r, c)).sum::<f64>() / n;
            let v = rows.clone().map(|r| (series.get(r, c) - m).powi(2)).sum::<f64>() / n;
            mean[c] = m;
            std[c] = v.sqrt();
        }
        NormStats { mean, std }
    }

    /// Indices of nodes whose standard deviation is effectively zero.
    pub fn constant_nodes(&self) -> Vec<usize> {
        (0..self.std.len())
            .filter(|&c| self.std[c] <= MIN_RELATIVE_STD * self.mean[c].abs().max(1.0))
            .collect()
    }

    pub fn select(&self, keep: &[usize]) -> Self {
        NormStats {
            mean: keep.iter().map(|&i| self.mean[i]).collect(),
            std: keep.iter().map(|&i| self.std[i]).collect(),
        }
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        Tensor::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) * self.std[c] + self.mean[c])
    }
}

/// Order of the two held-out partitions after the training block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitOrder {
    /// Train, test, validation.
    #[default]
    TrainTestVal,
    TrainValTest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Contiguous step ranges of the three partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partitions {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Partitions {
    /// 7:2:1 of `steps`, the first two rounded down and the last taking the
    /// remainder.
    pub fn new(steps: usize, order: SplitOrder) -> Self {
        let train = steps * 7 / 10;
        let second = steps * 2 / 10;
        let train_r = 0..train;
        let mid = train..train + second;
        let tail = train + second..steps;
        match order {
            SplitOrder::TrainTestVal => Partitions {
                train: train_r,
                test: mid,
                val: tail,
            },
            SplitOrder::TrainValTest => Partitions {
                train: train_r,
                val: mid,
                test: tail,
            },
        }
    }

    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

/// Sliding windows (stride 1) inside one partition, stored as start steps.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub split: Split,
    pub lookback: usize,
    pub horizon: usize,
    pub starts: Vec<usize>,
}

impl WindowSet {
    pub fn new(split: Split, range: Range<usize>, lookback: usize, horizon: usize) -> Result<Self> {
        let need = lookback + horizon;
        if range.len() < need {
            return Err(Error::Data(format!(
                "{split:?} partition has {} steps; at least {need} are needed for lookback {lookback} + horizon {horizon}",
                range.len()
            )));
        }
        let starts = (range.start..=range.end - need).collect();
        Ok(WindowSet {
            split,
            lookback,
            horizon,
            starts,
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn input(&self, series: &Tensor, i: usize) -> Tensor {
        rows(series, self.starts[i], self.lookback)
    }

    pub fn target(&self, series: &Tensor, i: usize) -> Tensor {
        rows(series, self.starts[i] + self.lookback, self.horizon)
    }

    /// First step of window `i`'s target.
    pub fn target_start(&self, i: usize) -> usize {
        self.starts[i] + self.lookback
    }
}

fn rows(series: &Tensor, start: usize, len: usize) -> Tensor {
    let c = series.cols();
    Tensor::matrix(len, c, series.data()[start * c..(start + len) * c].to_vec()).expect("window bounds")
}

/// Train/validation/test windows over one partitioning.
#[derive(Clone, Debug)]
pub struct Splits {
    pub partitions: Partitions,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl Splits {
    pub fn get(&self, split: Split) -> &WindowSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn window_split(steps: usize, lookback: usize, horizon: usize, order: SplitOrder) -> Result<Splits> {
    let partitions = Partitions::new(steps, order);
    Ok(Splits {
        train: WindowSet::new(Split::Train, partitions.train.clone(), lookback, horizon)?,
        val: WindowSet::new(Split::Val, partitions.val.clone(), lookback, horizon)?,
        test: WindowSet::new(Split::Test, partitions.test.clone(), lookback, horizon)?,
        partitions,
    })
}

/// `k` distinct indices below `n`, drawn with a seeded generator and sorted.
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

/// A dataset normalized with training-partition statistics and windowed.
#[derive(Clone, Debug)]
pub struct Prepared {
    /// Normalized dataset with constant nodes removed.
    pub dataset: EmissionDataset,
    pub stats: NormStats,
    pub dropped: Vec<String>,
    pub splits: Splits,
}

pub fn prepare(ds: &EmissionDataset, lookback: usize, horizon: usize, order: SplitOrder) -> Result<Prepared> {
    let splits = window_split(ds.steps(), lookback, horizon, order)?;
    let stats = NormStats::fit(&ds.series, splits.partitions.train.clone());
    let constant = stats.constant_nodes();
    let dropped: Vec<String> = constant.iter().map(|&i| ds.graph.node_ids()[i].clone()).collect();
    for id in &dropped {
        log::warn!("dropping node {id}: constant over the training partition");
    }
    let keep: Vec<usize> = (0..ds.nodes()).filter(|i| !constant.contains(i)).collect();
    if keep.is_empty() {
        return Err(Error::Data("every node is constant over the training partition".into()));
    }
    let kept = if dropped.is_empty() { ds.clone() } else { ds.select_nodes(&keep)? };
    let stats = stats.select(&keep);
    let dataset = EmissionDataset {
        series: stats.normalize(&kept.series),
        ..kept
    };
    Ok(Prepared {
        dataset,
        stats,
        dropped,
        splits,
    })
}
