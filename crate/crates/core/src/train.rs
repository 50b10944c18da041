//! Optimizer, schedule, early stopping, the training loop and evaluation.

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamGrads, ParamStore, Tensor};
use crate::data::{Prepared, WindowSet};
use crate::error::{Error, Result};
use crate::model::{loss_breakdown, LossBreakdown, Model};
use crate::spatial::RoadGraph;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SDSTM_THREADS";

/// Worker count: `SDSTM_THREADS` if set and positive, else all cores.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in the store.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            let Some(g) = t.grad().map(|g| g.to_vec()) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Half-cosine from `base` at epoch 0 to zero at epoch `epochs − 1`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    let frac = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Stops after `patience` consecutive epochs without a new best.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, val: f64) -> StopDecision {
        let improved = val < self.best;
        if improved {
            self.best = val;
            self.best_epoch = Some(epoch);
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        StopDecision {
            improved,
            stop: self.bad >= self.patience,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best_epoch.map(|e| (e, self.best))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    /// Global gradient-norm clip; `None` disables it.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Training windows drawn per epoch (after shuffling); `None` uses all.
    pub windows_per_epoch: Option<usize>,
    /// Validation windows evaluated per epoch, evenly spaced; `None` uses all.
    pub val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            patience: 3,
            clip_norm: Some(5.0),
            seed: 0,
            windows_per_epoch: None,
            val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch_size and patience must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        if self.windows_per_epoch == Some(0) || self.val_windows == Some(0) {
            return Err(Error::Config("window caps must be >= 1".into()));
        }
        Ok(())
    }
}

/// One epoch of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val_mse: f64,
    pub val_mae: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
}

struct WindowResult {
    grads: Option<ParamGrads>,
    breakdown: LossBreakdown,
}

/// Forward (and optionally backward) pass on one window.
fn run_window(
    model: &Model,
    graph: &RoadGraph,
    input: &Tensor,
    target: &Tensor,
    backward: bool,
) -> Result<WindowResult> {
    let mut g = Graph::new();
    let x = g.constant_ref(input);
    let y = g.constant_ref(target);
    let out = model.forward(&mut g, graph, x)?;
    let loss = g.mse(out.y_hat, y)?;
    let parts = model.decompose(target)?;
    let mut breakdown = loss_breakdown(
        target,
        g.value(out.y_ts_hat),
        g.value(out.y_td_hat),
        &parts.x_ts,
        &parts.x_td,
    )?;
    breakdown.l_total = g.value(loss).data()[0];
    let grads = if backward {
        Some(g.backward(loss)?.param_grads(&g, model.store()))
    } else {
        None
    };
    Ok(WindowResult { grads, breakdown })
}

/// Trains `model` in place and leaves it holding the best-validation
/// parameters.
pub fn train(model: &mut Model, data: &Prepared, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    model: &mut Model,
    data: &Prepared,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let series = &data.dataset.series;
    let graph = &data.dataset.graph;
    let (train_w, val_w) = (&data.splits.train, &data.splits.val);
    if train_w.is_empty() || val_w.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let workers = pool(worker_threads())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.store());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.store().clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let val_subset = spaced_subset(val_w.len(), cfg.val_windows);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let mut order: Vec<usize> = (0..train_w.len()).collect();
        order.shuffle(&mut rng);
        if let Some(cap) = cfg.windows_per_epoch {
            order.truncate(cap);
        }
        let mut sum = LossBreakdown::default();
        let mut grad_norm_sum = 0.0;
        let mut batches = 0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<WindowResult>> = workers.install(|| {
                batch
                    .par_iter()
                    .map(|&w| {
                        let input = train_w.input(series, w);
                        let target = train_w.target(series, w);
                        run_window(model, graph, &input, &target, lr > 0.0)
                    })
                    .collect()
            });
            let store = model.store_mut();
            store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = LossBreakdown::default();
            for r in results {
                let r = r?;
                if !r.breakdown.l_total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                batch_loss.add(&r.breakdown);
                if let Some(gr) = r.grads {
                    if !gr.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch, batch: b });
                    }
                    store.accumulate(&gr, scale);
                }
            }
            sum.add(&batch_loss);
            if lr > 0.0 {
                let norm = store.grad_norm();
                grad_norm_sum += norm;
                if let Some(clip) = cfg.clip_norm {
                    if norm > clip {
                        store.scale_grads(clip / norm);
                    }
                }
                adam.step(store, lr);
            }
            batches += 1;
        }
        let train_loss = sum.scaled(1.0 / order.len() as f64);
        let val = evaluate_subset(model, graph, series, val_w, &val_subset)?;
        if !val.mse.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: batches });
        }
        let record = EpochRecord {
            epoch,
            lr,
            train: train_loss,
            val_mse: val.mse,
            val_mae: val.mae,
            grad_norm: grad_norm_sum / batches.max(1) as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} train {:.5} val {:.5} ({:.1}s)",
            record.train.l_total,
            record.val_mse,
            record.seconds
        );
        on_epoch(&record);
        history.push(record);
        let decision = stopper.observe(epoch, val.mse);
        if decision.improved {
            best.copy_values_from(model.store())?;
        }
        if decision.stop {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    model.store_mut().copy_values_from(&best)?;
    let (best_epoch, best_val_mse) = stopper.best().expect("at least one epoch ran");
    Ok(TrainReport {
        history,
        best_epoch,
        best_val_mse,
        stopped_early,
    })
}

fn spaced_subset(len: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < len => (0..c).map(|i| i * len / c).collect(),
        _ => (0..len).collect(),
    }
}

/// Mean squared and absolute error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Acc {
    se: f64,
    ae: f64,
    n: usize,
}

impl Acc {
    fn push(&mut self, err: f64) {
        self.se += err * err;
        self.ae += err.abs();
        self.n += 1;
    }

    fn merge(&mut self, o: &Acc) {
        self.se += o.se;
        self.ae += o.ae;
        self.n += o.n;
    }

    fn metrics(&self) -> Metrics {
        if self.n == 0 {
            return Metrics::default();
        }
        Metrics {
            mse: self.se / self.n as f64,
            mae: self.ae / self.n as f64,
            count: self.n,
        }
    }
}

/// Plain metrics of a prediction against a target.
pub fn metrics(pred: &Tensor, target: &Tensor) -> Result<Metrics> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("metrics", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let mut acc = Acc::default();
    for (p, t) in pred.data().iter().zip(target.data()) {
        acc.push(p - t);
    }
    Ok(acc.metrics())
}

/// Repeats the last observed row across the horizon.
pub fn persistence_forecast(input: &Tensor, horizon: usize) -> Tensor {
    let last = input.row(input.rows() - 1).to_vec();
    Tensor::from_fn(horizon, input.cols(), |_, c| last[c])
}

fn evaluate_subset(
    model: &Model,
    graph: &RoadGraph,
    series: &Tensor,
    windows: &WindowSet,
    subset: &[usize],
) -> Result<Metrics> {
    let preds: Vec<Result<Acc>> = pool(worker_threads())?.install(|| {
        subset
            .par_iter()
            .map(|&w| {
                let pred = model.predict(graph, &windows.input(series, w))?;
                let target = windows.target(series, w);
                let mut acc = Acc::default();
                for (p, t) in pred.data().iter().zip(target.data()) {
                    acc.push(p - t);
                }
                Ok(acc)
            })
            .collect()
    });
    let mut total = Acc::default();
    for p in preds {
        total.merge(&p?);
    }
    Ok(total.metrics())
}

/// Which target steps enter an evaluation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalFilter {
    /// Clock hours `start..end` of the target timestamp (half-open).
    pub hours: Option<Range<u32>>,
}

/// Model and persistence errors over a split.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub model: Metrics,
    pub persistence: Metrics,
    pub windows: usize,
    /// Per node: (model, persistence).
    pub per_node: Vec<(Metrics, Metrics)>,
    /// Per clock hour 0..24: (model, persistence).
    pub per_hour: Vec<(Metrics, Metrics)>,
}

struct WindowAcc {
    node: Vec<(Acc, Acc)>,
    hour: Vec<(Acc, Acc)>,
}

/// Evaluates every window of `windows` in `data`.
pub fn evaluate(model: &Model, data: &Prepared, windows: &WindowSet, filter: &EvalFilter) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::Data(format!("{:?} split has no windows", windows.split)));
    }
    let ds = &data.dataset;
    let n = ds.nodes();
    if model.nodes() != n {
        return Err(Error::Config(format!(
            "model expects {} nodes, dataset has {n}",
            model.nodes()
        )));
    }
    let hour_ok = |h: u32| filter.hours.as_ref().is_none_or(|r| r.contains(&h));
    let parts: Vec<Result<WindowAcc>> = pool(worker_threads())?.install(|| {
        (0..windows.len())
            .into_par_iter()
            .map(|w| {
                let input = windows.input(&ds.series, w);
                let target = windows.target(&ds.series, w);
                let pred = model.predict(&ds.graph, &input)?;
                let base = persistence_forecast(&input, windows.horizon);
                let mut acc = WindowAcc {
                    node: vec![(Acc::default(), Acc::default()); n],
                    hour: vec![(Acc::default(), Acc::default()); 24],
                };
                for h in 0..windows.horizon {
                    let hour = ds.hour_of(windows.target_start(w) + h);
                    if !hour_ok(hour) {
                        continue;
                    }
                    for c in 0..n {
                        let t = target.get(h, c);
                        let (em, ep) = (pred.get(h, c) - t, base.get(h, c) - t);
                        acc.node[c].0.push(em);
                        acc.node[c].1.push(ep);
                        acc.hour[hour as usize].0.push(em);
                        acc.hour[hour as usize].1.push(ep);
                    }
                }
                Ok(acc)
            })
            .collect()
    });
    let mut node = vec![(Acc::default(), Acc::default()); n];
    let mut hour = vec![(Acc::default(), Acc::default()); 24];
    for p in parts {
        let p = p?;
        for (dst, src) in node.iter_mut().zip(&p.node).chain(hour.iter_mut().zip(&p.hour)) {
            dst.0.merge(&src.0);
            dst.1.merge(&src.1);
        }
    }
    let (mut m, mut b) = (Acc::default(), Acc::default());
    for (a, p) in &node {
        m.merge(a);
        b.merge(p);
    }
    if m.n == 0 {
        return Err(Error::Data("no target steps fall inside the hour filter".into()));
    }
    Ok(EvalReport {
        model: m.metrics(),
        persistence: b.metrics(),
        windows: windows.len(),
        per_node: node.iter().map(|(a, p)| (a.metrics(), p.metrics())).collect(),
        per_hour: hour.iter().map(|(a, p)| (a.metrics(), p.metrics())).collect(),
    })
}
