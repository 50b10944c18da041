use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::{json, Value};

use sdstm_core::autodiff::{Graph, Tensor};
use sdstm_core::checkpoint::Checkpoint;
use sdstm_core::data::{
    prepare, sample_indices, window_split, write_series_csv, EmissionDataset, NormStats, Prepared, Split,
};
use sdstm_core::koopman::operator_diagnostics;
use sdstm_core::model::Model;
use sdstm_core::synth::{generate_synthetic, SynthConfig};
use sdstm_core::train::{evaluate, train_with, EvalFilter, EvalReport, Metrics, TrainReport};
use sdstm_core::wavelet::degree_of_variation;
use sdstm_core::Error;

use crate::config::{model_conflicts, read_file, Keys, RunConfig};
use crate::{DataArgs, DecomposeArgs, EvalArgs, GenerateArgs, ModelArgs, PredictArgs, TrainArgs};

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        nodes: a.nodes,
        days: a.days,
        seed: a.seed,
        step_minutes: a.step_minutes,
        noise: a.noise.unwrap_or(defaults.noise),
        alpha: a.alpha.unwrap_or(defaults.alpha),
        ..defaults
    };
    let ds = generate_synthetic(&cfg)?;
    ds.save(&a.out)?;
    write_json(&a.out.join("synth_config.json"), &serde_json::to_value(&cfg)?)?;
    log::info!("wrote {} steps x {} nodes to {}", ds.steps(), ds.nodes(), a.out.display());
    Ok(())
}

fn data_paths(d: &DataArgs) -> Result<(PathBuf, PathBuf), Error> {
    let pick = |explicit: &Option<PathBuf>, file: &str| {
        explicit
            .clone()
            .or_else(|| d.data.as_ref().map(|dir| dir.join(file)))
            .ok_or_else(|| Error::Config(format!("no dataset given: pass --data or --series/--graph ({file})")))
    };
    Ok((pick(&d.series, "series.csv")?, pick(&d.graph, "graph.json")?))
}

fn load_dataset(d: &DataArgs, alpha: f64) -> Result<EmissionDataset> {
    let (series, graph) = data_paths(d)?;
    let (ds, report) = EmissionDataset::load(&series, &graph, alpha)?;
    if report.missing > 0 {
        log::warn!("imputed {} missing readings", report.missing);
    }
    Ok(ds)
}

/// File keys merged with whichever flags were given.
fn config_keys(m: &ModelArgs, extra: &[(&str, Option<Value>)]) -> Result<Keys, Error> {
    let mut keys = match &m.config {
        Some(p) => read_file(p)?,
        None => Keys::new(),
    };
    let flags = [
        ("horizon", m.horizon.map(Value::from)),
        ("lookback", m.lookback.map(Value::from)),
        ("blocks", m.blocks.map(Value::from)),
        ("segment_length", m.segment_len.map(Value::from)),
        ("embed_dim", m.embed_dim.map(Value::from)),
        ("wavelet_levels", m.levels.map(Value::from)),
        ("ridge", m.ridge.map(Value::from)),
        ("alpha", m.alpha.map(Value::from)),
        ("seed", m.seed.map(Value::from)),
        ("split_order", m.val_before_test.then(|| json!("train_val_test"))),
    ];
    for (k, v) in flags.into_iter().chain(extra.iter().cloned()) {
        if let Some(v) = v {
            keys.insert(k.to_string(), v);
        }
    }
    Ok(keys)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn metrics_json(m: &Metrics) -> Value {
    json!({"mse": m.mse, "mae": m.mae, "count": m.count})
}

fn history_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch", "lr", "l_ts", "l_td", "l_cross", "l_total", "val_mse", "val_mae", "grad_norm", "seconds",
    ])?;
    for r in &report.history {
        w.write_record(&[
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train.l_ts.to_string(),
            r.train.l_td.to_string(),
            r.train.l_cross.to_string(),
            r.train.l_total.to_string(),
            r.val_mse.to_string(),
            r.val_mae.to_string(),
            r.grad_norm.to_string(),
            format!("{:.3}", r.seconds),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let extra = [
        ("epochs", a.epochs.map(Value::from)),
        ("lr", a.lr.map(Value::from)),
        ("batch_size", a.batch_size.map(Value::from)),
        ("patience", a.patience.map(Value::from)),
        ("windows_per_epoch", a.windows_per_epoch.map(Value::from)),
        ("val_windows", a.val_windows.map(Value::from)),
    ];
    let cfg = RunConfig::resolve(&config_keys(&a.model, &extra)?)?;
    let ds = load_dataset(&a.data, cfg.alpha)?;
    let data = prepare(&ds, cfg.model.lookback, cfg.model.horizon, cfg.split_order)?;
    let mut model = Model::new(cfg.model.clone(), data.dataset.nodes(), cfg.train.seed)?;
    log::info!("{} parameters, {} training windows", model.store().numel(), data.splits.train.len());
    let report = train_with(&mut model, &data, &cfg.train, |r| {
        log::info!("epoch {} train {:.5} val {:.5}", r.epoch, r.train.l_total, r.val_mse)
    })?;
    let test = evaluate(&model, &data, &data.splits.test, &EvalFilter::default())?;

    let mut ck = Checkpoint::from_model(
        &model,
        data.dataset.graph.node_ids().to_vec(),
        Some(data.stats.clone()),
        Some(cfg.train.clone()),
    )?;
    ck.alpha = Some(cfg.alpha);
    ck.split_order = Some(cfg.split_order);

    create_out(&a.out)?;
    write_json(&a.out.join("config.json"), &Value::Object(cfg.to_keys()))?;
    ck.save(&a.out.join("checkpoint.json"))?;
    history_csv(&a.out.join("history.csv"), &report)?;
    write_json(
        &a.out.join("metrics.json"),
        &json!({
            "units": "normalized",
            "test": metrics_json(&test.model),
            "test_persistence": metrics_json(&test.persistence),
            "test_windows": test.windows,
            "best_epoch": report.best_epoch,
            "best_val_mse": report.best_val_mse,
            "epochs_run": report.history.len(),
            "stopped_early": report.stopped_early,
            "dropped_nodes": data.dropped,
        }),
    )?;
    println!(
        "test mse {:.5} mae {:.5} (persistence mse {:.5}); best epoch {}",
        test.model.mse, test.model.mae, test.persistence.mse, report.best_epoch
    );
    Ok(())
}

/// Restricts `ds` to the checkpoint's nodes, in its order, and normalizes
/// with its statistics.
fn prepare_for(ds: &EmissionDataset, ck: &Checkpoint) -> Result<Prepared, Error> {
    let order = ck
        .node_ids
        .iter()
        .map(|id| {
            ds.graph
                .node_ids()
                .iter()
                .position(|g| g == id)
                .ok_or_else(|| Error::Data(format!("checkpoint node {id:?} is not in the dataset")))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let kept = ds.select_nodes(&order)?;
    let (lookback, horizon) = (ck.model.lookback, ck.model.horizon);
    let splits = window_split(kept.steps(), lookback, horizon, ck.split_order.unwrap_or_default())?;
    let stats = match &ck.stats {
        Some(s) if s.mean.len() == order.len() && s.std.len() == order.len() => s.clone(),
        Some(_) => return Err(Error::Data("checkpoint statistics do not match its node list".into())),
        None => NormStats::fit(&kept.series, splits.partitions.train.clone()),
    };
    let dataset = EmissionDataset {
        series: stats.normalize(&kept.series),
        ..kept
    };
    Ok(Prepared {
        dataset,
        stats,
        dropped: Vec::new(),
        splits,
    })
}

fn load_checkpoint(path: &Path, m: Option<&ModelArgs>) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if let Some(m) = m {
        let keys = config_keys(m, &[])?;
        let conflicts = model_conflicts(&keys, &ck.model);
        if !conflicts.is_empty() {
            return Err(Error::Config(format!("config does not match checkpoint: {}", conflicts.join(", "))).into());
        }
    }
    Ok(ck)
}

pub fn parse_hours(s: &str) -> Result<Range<u32>, Error> {
    let bad = || Error::Config(format!("hours must look like START-END with 0 <= START < END <= 24, got {s:?}"));
    let (a, b) = s.split_once(['-', ':']).ok_or_else(bad)?;
    let start: u32 = a.trim().parse().map_err(|_| bad())?;
    let end: u32 = b.trim().parse().map_err(|_| bad())?;
    if start >= end || end > 24 {
        return Err(bad());
    }
    Ok(start..end)
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "val" | "validation" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Config(format!("unknown split {s:?}; use train, val or test"))),
    }
}

fn error_csv(path: &Path, label: &str, rows: &[(String, Metrics, Metrics)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([label, "count", "mse", "mae", "persistence_mse", "persistence_mae"])?;
    for (key, m, p) in rows {
        w.write_record(&[
            key.clone(),
            m.count.to_string(),
            m.mse.to_string(),
            m.mae.to_string(),
            p.mse.to_string(),
            p.mae.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

struct OperatorRow {
    window: usize,
    target_start: usize,
    block: usize,
    spectral_radius: f64,
    frobenius_norm: f64,
}

/// Per-window K_td diagnostics and the mean ratio `‖X⁽²⁾‖ / ‖x_td⁽¹⁾‖`.
fn operator_scan(model: &Model, data: &Prepared, split: Split) -> Result<(Vec<OperatorRow>, f64)> {
    let windows = data.splits.get(split);
    let (series, graph) = (&data.dataset.series, &data.dataset.graph);
    let mut rows = Vec::new();
    let (mut ratio_sum, mut ratio_n) = (0.0, 0usize);
    for w in 0..windows.len() {
        let input = windows.input(series, w);
        let mut g = Graph::new();
        let x = g.constant_ref(&input);
        let out = model.forward(&mut g, graph, x)?;
        for (b, bv) in out.blocks.iter().enumerate() {
            let d = operator_diagnostics(g.value(bv.dynamic.operator))?;
            rows.push(OperatorRow {
                window: w,
                target_start: windows.target_start(w),
                block: b,
                spectral_radius: d.spectral_radius,
                frobenius_norm: d.frobenius_norm,
            });
        }
        let first = &out.blocks[0];
        let td = g.value(first.decomposed.x_td).frobenius_norm();
        if td > 0.0 {
            ratio_sum += g.value(first.next_input).frobenius_norm() / td;
            ratio_n += 1;
        }
    }
    Ok((rows, if ratio_n > 0 { ratio_sum / ratio_n as f64 } else { 0.0 }))
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, Some(&a.model))?;
    let split = parse_split(&a.split)?;
    let filter = EvalFilter {
        hours: a.hours.as_deref().map(parse_hours).transpose()?,
    };
    let alpha = a.model.alpha.or(ck.alpha).unwrap_or(crate::config::DEFAULT_ALPHA);
    let ds = load_dataset(&a.data, alpha)?;
    let data = prepare_for(&ds, &ck)?;
    let model = ck.to_model()?;
    let report: EvalReport = evaluate(&model, &data, data.splits.get(split), &filter)?;
    let (operators, residual_ratio) = operator_scan(&model, &data, split)?;

    create_out(&a.out)?;
    let mut cfg_keys = serde_json::to_value(&ck.model)?;
    if let Value::Object(m) = &mut cfg_keys {
        m.insert("alpha".into(), alpha.into());
        m.insert("split".into(), a.split.clone().into());
        m.insert("hours".into(), a.hours.clone().into());
        m.insert("checkpoint".into(), a.checkpoint.display().to_string().into());
    }
    write_json(&a.out.join("config.json"), &cfg_keys)?;
    let ids = data.dataset.graph.node_ids();
    let per_node: Vec<_> = report
        .per_node
        .iter()
        .enumerate()
        .map(|(i, (m, p))| (ids[i].clone(), *m, *p))
        .collect();
    error_csv(&a.out.join("per_node_error.csv"), "node_id", &per_node)?;
    let per_hour: Vec<_> = report
        .per_hour
        .iter()
        .enumerate()
        .filter(|(_, (m, _))| m.count > 0)
        .map(|(h, (m, p))| (h.to_string(), *m, *p))
        .collect();
    error_csv(&a.out.join("per_hour_error.csv"), "hour", &per_hour)?;

    let mut w = csv::Writer::from_path(a.out.join("k_td_spectral_radius.csv"))?;
    w.write_record(["window", "target_start", "block", "spectral_radius", "frobenius_norm"])?;
    for r in &operators {
        w.write_record(&[
            r.window.to_string(),
            r.target_start.to_string(),
            r.block.to_string(),
            r.spectral_radius.to_string(),
            r.frobenius_norm.to_string(),
        ])?;
    }
    w.flush()?;
    let max_radius = operators.iter().map(|r| r.spectral_radius).fold(0.0, f64::max);
    write_json(
        &a.out.join("metrics.json"),
        &json!({
            "units": "normalized",
            "split": a.split,
            "hours": filter.hours.as_ref().map(|r| [r.start, r.end]),
            "windows": report.windows,
            "model": metrics_json(&report.model),
            "persistence": metrics_json(&report.persistence),
            "k_td_max_spectral_radius": max_radius,
            "mean_residual_ratio": residual_ratio,
        }),
    )?;
    println!(
        "{} mse {:.5} mae {:.5} | persistence mse {:.5} mae {:.5}",
        a.split, report.model.mse, report.model.mae, report.persistence.mse, report.persistence.mae
    );
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint, None)?;
    let ds = load_dataset(&a.data, ck.alpha.unwrap_or(crate::config::DEFAULT_ALPHA))?;
    let data = prepare_for(&ds, &ck)?;
    let model = ck.to_model()?;
    let (lookback, horizon) = (ck.model.lookback, ck.model.horizon);
    let end = a.end.unwrap_or(data.dataset.steps());
    if end < lookback || end > data.dataset.steps() {
        return Err(Error::Config(format!(
            "--end {end} must lie in {lookback}..={} for a look-back of {lookback}",
            data.dataset.steps()
        ))
        .into());
    }
    let input = data.dataset.series.rows_range(end - lookback..end);
    let pred = data.stats.denormalize(&model.predict(&data.dataset.graph, &input)?);
    let step = chrono::Duration::minutes(data.dataset.step_minutes as i64);
    let last = data.dataset.timestamps[end - 1];
    let stamps: Vec<_> = (1..=horizon).map(|k| last + step * k as i32).collect();
    create_out(&a.out)?;
    write_series_csv(&a.out.join("predictions.csv"), data.dataset.graph.node_ids(), &stamps, &pred)?;
    println!("wrote {horizon} steps after {last}");
    Ok(())
}

pub fn decompose(a: &DecomposeArgs) -> Result<()> {
    let (model, data) = match &a.checkpoint {
        Some(path) => {
            let ck = load_checkpoint(path, Some(&a.model))?;
            let alpha = a.model.alpha.or(ck.alpha).unwrap_or(crate::config::DEFAULT_ALPHA);
            let ds = load_dataset(&a.data, alpha)?;
            (ck.to_model()?, prepare_for(&ds, &ck)?)
        }
        None => {
            let cfg = RunConfig::resolve(&config_keys(&a.model, &[])?)?;
            let ds = load_dataset(&a.data, cfg.alpha)?;
            let data = prepare(&ds, cfg.model.lookback, cfg.model.horizon, cfg.split_order)?;
            (Model::new(cfg.model, data.dataset.nodes(), cfg.train.seed)?, data)
        }
    };
    let ds = &data.dataset;
    let ids = ds.graph.node_ids();
    let period = a.period.unwrap_or(ds.steps_per_day());
    if a.start >= ds.steps() || period == 0 {
        return Err(Error::Config(format!("--start {} or --period {period} out of range", a.start)).into());
    }
    let subsets = a.subsets.min((ds.steps() - a.start) / period);
    if subsets < 2 {
        return Err(Error::Data(format!(
            "{} steps from {} hold {subsets} subsets of {period}; need at least 2",
            ds.steps() - a.start,
            a.start
        ))
        .into());
    }
    let nodes: Vec<usize> = if a.node_ids.is_empty() {
        sample_indices(ds.nodes(), a.sample, a.model.seed.unwrap_or(0))
    } else {
        a.node_ids
            .iter()
            .map(|id| {
                ids.iter()
                    .position(|g| g == id)
                    .ok_or_else(|| Error::Data(format!("unknown node id {id:?}")))
            })
            .collect::<std::result::Result<_, _>>()?
    };
    let range = a.start..a.start + subsets * period;
    let parts = model.decompose_subsets(&ds.series.rows_range(range.clone()), period)?;

    let stamps = &ds.timestamps[range];
    let s = &data.stats;
    let raw_ts = Tensor::from_fn(parts.x_ts.rows(), parts.x_ts.cols(), |r, c| parts.x_ts.get(r, c) * s.std[c] + s.mean[c]);
    let raw_td = Tensor::from_fn(parts.x_td.rows(), parts.x_td.cols(), |r, c| parts.x_td.get(r, c) * s.std[c]);
    create_out(&a.out)?;
    write_series_csv(&a.out.join("x_ts.csv"), ids, stamps, &raw_ts)?;
    write_series_csv(&a.out.join("x_td.csv"), ids, stamps, &raw_td)?;
    write_series_csv(&a.out.join("gamma.csv"), ids, stamps, &parts.gamma)?;

    let mut text = format!(
        "# degree of variation: {subsets} subsets of {period} steps from step {}\n# node_id stable dynamic dynamic_gt_stable\n",
        a.start
    );
    let mut wins = 0;
    for &i in &nodes {
        let (st, dy) = degree_of_variation(&parts.x_ts.column(i), &parts.x_td.column(i), period)?;
        wins += usize::from(dy > st);
        text.push_str(&format!("{} {st:.6e} {dy:.6e} {}\n", ids[i], dy > st));
    }
    text.push_str(&format!("# dynamic > stable on {wins} of {} nodes\n", nodes.len()));
    let mut f = fs::File::create(a.out.join("degree_of_variation.txt"))?;
    f.write_all(text.as_bytes())?;
    print!("{text}");
    Ok(())
}
