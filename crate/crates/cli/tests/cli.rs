use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn sdstm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdstm"))
        .args(args)
        .env("SDSTM_THREADS", "1")
        .output()
        .expect("run sdstm")
}

fn ok(args: &[&str]) -> String {
    let out = sdstm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn numbers(path: &Path) -> Vec<Vec<f64>> {
    read_csv(path).1.iter().map(|r| r[1..].iter().map(|v| v.parse().unwrap()).collect()).collect()
}

/// A small dataset plus a briefly trained checkpoint, shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    root: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let run = root.join("run");
        ok(&["generate", "--out", s(&data), "--nodes", "6", "--days", "6", "--seed", "3"]);
        ok(&[
            "train", "--data", s(&data), "--out", s(&run), "--horizon", "8", "--blocks", "1", "--embed-dim", "8",
            "--epochs", "3", "--windows-per-epoch", "32", "--val-windows", "16", "--seed", "1",
        ]);
        Fixture {
            _dir: dir,
            data,
            run,
            root,
        }
    })
}

#[test]
fn generate_writes_a_month_of_five_minute_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--out", s(&a), "--nodes", "20", "--days", "31", "--seed", "7"]);
    ok(&["generate", "--out", s(&b), "--nodes", "20", "--days", "31", "--seed", "7"]);
    let (header, rows) = read_csv(&a.join("series.csv"));
    assert_eq!(rows.len(), 31 * 288);
    assert_eq!(header.len(), 21);
    assert_eq!(header[0], "timestamp");
    for f in ["series.csv", "graph.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let graph: Value = serde_json::from_slice(&fs::read(a.join("graph.json")).unwrap()).unwrap();
    assert_eq!(graph["nodes"].as_array().unwrap().len(), 20);
}

#[test]
fn single_node_generation_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let res = sdstm(&["generate", "--out", s(&out), "--nodes", "1"]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn missing_dataset_fails_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let res = sdstm(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(3));
    assert!(!out.exists());
    let res = sdstm(&["train", "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn bad_config_file_rejected() {
    let f = fixture();
    let cfg = f.root.join("bad.json");
    fs::write(&cfg, r#"{"horizon": 8, "no_such_key": 1}"#).unwrap();
    let out = f.root.join("badrun");
    let res = sdstm(&["train", "--data", s(&f.data), "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn train_writes_checkpoint_history_and_metrics() {
    let f = fixture();
    for file in ["checkpoint.json", "history.csv", "metrics.json", "config.json"] {
        assert!(f.run.join(file).exists(), "{file}");
    }
    let (header, rows) = read_csv(&f.run.join("history.csv"));
    for col in ["l_ts", "l_td", "l_cross", "l_total"] {
        assert!(header.iter().any(|h| h == col), "{col}");
    }
    assert!(!rows.is_empty() && rows.len() <= 3);
    let m: Value = serde_json::from_slice(&fs::read(f.run.join("metrics.json")).unwrap()).unwrap();
    assert!(m["test"]["mse"].as_f64().unwrap() > 0.0);
    assert!(m["test"]["mae"].as_f64().unwrap() > 0.0);
    assert!(m["test_persistence"]["mse"].is_f64());
    let cfg: Value = serde_json::from_slice(&fs::read(f.run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["lookback"], 16);
    assert_eq!(cfg["horizon"], 8);
    assert_eq!(cfg["epochs"], 3);
    assert_eq!(cfg["wavelet_levels"], 4);
}

#[test]
fn eval_reports_nodes_hours_and_operators() {
    let f = fixture();
    let out = f.root.join("eval");
    ok(&["eval", "--data", s(&f.data), "--checkpoint", s(&f.run.join("checkpoint.json")), "--out", s(&out), "--hours", "8-9"]);
    let (header, nodes) = read_csv(&out.join("per_node_error.csv"));
    assert_eq!(nodes.len(), 6);
    assert!(header.iter().any(|h| h == "persistence_mse"));
    let (_, hours) = read_csv(&out.join("per_hour_error.csv"));
    assert_eq!(hours.len(), 1);
    assert_eq!(hours[0][0], "8");
    let m: Value = serde_json::from_slice(&fs::read(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["hours"], serde_json::json!([8, 9]));
    let (_, ops) = read_csv(&out.join("k_td_spectral_radius.csv"));
    assert_eq!(ops.len(), m["windows"].as_u64().unwrap() as usize);
    assert!(ops.iter().all(|r| r[3].parse::<f64>().unwrap().is_finite()));
}

#[test]
fn eval_rejects_a_conflicting_config() {
    let f = fixture();
    let res = sdstm(&[
        "eval", "--data", s(&f.data), "--checkpoint", s(&f.run.join("checkpoint.json")), "--out",
        s(&f.root.join("conflict")), "--blocks", "2",
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(!f.root.join("conflict").exists());
}

#[test]
fn predict_writes_the_next_horizon() {
    let f = fixture();
    let out = f.root.join("predict");
    ok(&["predict", "--data", s(&f.data), "--checkpoint", s(&f.run.join("checkpoint.json")), "--out", s(&out)]);
    let (header, rows) = read_csv(&out.join("predictions.csv"));
    assert_eq!(rows.len(), 8);
    assert_eq!(header.len(), 7);
    assert_eq!(rows[0][0], "2024-03-07T00:00:00");
}

#[test]
fn decompose_is_additive_and_gated() {
    let f = fixture();
    let out = f.root.join("decompose");
    let text = ok(&[
        "decompose", "--data", s(&f.data), "--checkpoint", s(&f.run.join("checkpoint.json")), "--out", s(&out),
        "--subsets", "5",
    ]);
    assert!(text.contains("of 4 nodes"));
    let series = numbers(&f.data.join("series.csv"));
    let ts = numbers(&out.join("x_ts.csv"));
    let td = numbers(&out.join("x_td.csv"));
    let gamma = numbers(&out.join("gamma.csv"));
    assert_eq!(ts.len(), 5 * 288);
    for r in 0..ts.len() {
        for c in 0..6 {
            assert!((ts[r][c] + td[r][c] - series[r][c]).abs() <= 1e-9 * series[r][c].abs().max(1.0));
            assert!(gamma[r][c] > 0.0 && gamma[r][c] < 1.0);
        }
    }
    let dov = fs::read_to_string(out.join("degree_of_variation.txt")).unwrap();
    assert_eq!(dov.lines().filter(|l| !l.starts_with('#')).count(), 4);
}

#[test]
fn decompose_without_checkpoint_and_with_named_nodes() {
    let f = fixture();
    let out = f.root.join("fresh");
    ok(&["decompose", "--data", s(&f.data), "--out", s(&out), "--node-ids", "road_001,road_004", "--horizon", "8"]);
    let dov = fs::read_to_string(out.join("degree_of_variation.txt")).unwrap();
    assert!(dov.contains("road_001") && dov.contains("road_004"));
    let res = sdstm(&["decompose", "--data", s(&f.data), "--out", s(&f.root.join("bad")), "--node-ids", "road_999"]);
    assert_eq!(res.status.code(), Some(3));
}
