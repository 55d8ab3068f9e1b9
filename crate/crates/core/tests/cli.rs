use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fltop::federation::bandwidth_cost;

fn fltop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fltop")).args(args).output().unwrap()
}

fn write_config(dir: &Path, scheme: &str, rounds: usize) -> std::path::PathBuf {
    let out = dir.join("out");
    let text = format!(
        r#"{{
  "dataset": {{"source": "synthetic_clusters", "samples": 600, "features": 8, "classes": 3, "separation": 1.5}},
  "model": {{"hidden": [12]}},
  "federation": {{
    "scheme": "{scheme}", "num_clients": 10, "sampling": 0.3, "rounds": {rounds},
    "local": {{"iterations": 3, "learning_rate": 0.2, "batch_size": 8}},
    "ratio": 0.2, "sigma": 1.0, "calibration_trials": 5
  }},
  "output_dir": "{}"
}}"#,
        out.display()
    );
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_trace_summary_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fl-top-dp", 4);
    let o = fltop(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "round,accuracy,balanced_accuracy,auroc,down_kb,up_kb,epsilon,clamps");
    assert_eq!(lines.len(), 5);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["scheme"], "fl-top-dp");
    assert_eq!(summary["metric"], "accuracy");
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert!(resolved["federation"]["sensitivity"].is_f64());
    assert_eq!(resolved["federation"]["seeds"]["masks"], 4);
}

#[test]
fn rerun_from_resolved_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fl-basic-dp", 3);
    assert!(fltop(&["run", cfg.to_str().unwrap()]).status.success());
    let out = dir.path().join("out");
    let first = fs::read(out.join("trace.csv")).unwrap();
    let again = dir.path().join("again");
    let o = fltop(&[
        "run",
        out.join("resolved_config.json").to_str().unwrap(),
        "--output-dir",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(fs::read(again.join("trace.csv")).unwrap(), first);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fl-turbo", 3);
    let o = fltop(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("fl-top-bis-dp") && err.contains("fl-bas-4"), "{err}");

    let o = fltop(&["run", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = fltop(&["accountant", "--sigma", "1", "--sampling", "0.1", "--rounds", "0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = fltop(&["accountant", "--sigma", "1", "--sampling", "1.5", "--rounds", "3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn accountant_prints_epsilon_and_lambda() {
    let o = fltop(&["accountant", "--sigma", "1.54", "--sampling", "0.016667", "--rounds", "200", "--delta", "1e-5"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    let eps: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("epsilon = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((eps - 1.0).abs() < 0.05, "{eps}");
    assert!(text.contains("lambda = "));
    let o = fltop(&["accountant", "--sigma", "1.49", "--sampling", "0.019960", "--rounds", "62"]);
    let text = String::from_utf8_lossy(&o.stdout);
    let eps: f64 = text.lines().next().unwrap()["epsilon = ".len()..].parse().unwrap();
    assert!((eps - 0.91).abs() < 0.03, "{eps}");
}

#[test]
fn sweep_dedupes_ratios_and_bills_bandwidth_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fl-bas-2", 3);
    let out = dir.path().join("sweep");
    let o = fltop(&[
        "sweep",
        cfg.to_str().unwrap(),
        "--ratios",
        "0.1,0.3,0.1",
        "--output-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    // 8*12+12 + 12*3+3 parameters
    let n = 147;
    for row in &rows {
        let ratio: f64 = row[0].parse().unwrap();
        let round: usize = row[4].parse().unwrap();
        let k = (ratio * n as f64).round();
        let r = k / n as f64;
        let down: f64 = row[5].parse().unwrap();
        let up: f64 = row[6].parse().unwrap();
        assert_eq!(down, bandwidth_cost(r, n, round, 0.3, false));
        assert_eq!(up, bandwidth_cost(r, n, round, 0.3, true));
    }

    let o = fltop(&["sweep", cfg.to_str().unwrap(), "--ratios"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn select_topk_and_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fl-top", 1);
    let idx = dir.path().join("topk.txt");
    let o = fltop(&["select-topk", cfg.to_str().unwrap(), "--out", idx.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let set = fltop::compression::IndexSet::load(&idx, 147).unwrap();
    assert_eq!(set.len(), 29);

    let o = fltop(&["calibrate", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    let s: f64 = String::from_utf8_lossy(&o.stdout).trim()["sensitivity = ".len()..].parse().unwrap();
    assert!(s > 0.0 && s.is_finite());
}

#[test]
fn oversized_runs_need_full_scale_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "fl-std", 1);
    let text = fs::read_to_string(&cfg).unwrap().replace("\"hidden\": [12]", "\"hidden\": [20000, 2000]")
        .replace("\"rounds\": 1", "\"rounds\": 1000");
    fs::write(&cfg, text).unwrap();
    let o = fltop(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--full-scale"));
}

#[test]
fn idx_dataset_config_runs() {
    use fltop::data::idx::{self, IdxArray};
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, count: usize, seed: u8| {
        let images = IdxArray {
            dims: vec![count, 4, 4],
            data: (0..count * 16).map(|i| (i as u8).wrapping_mul(37).wrapping_add(seed)).collect(),
        };
        let labels = IdxArray {
            dims: vec![count],
            data: (0..count).map(|i| (i % 3) as u8).collect(),
        };
        idx::write(dir.path().join(format!("{name}-images")), &images).unwrap();
        idx::write(dir.path().join(format!("{name}-labels")), &labels).unwrap();
    };
    write("train", 120, 1);
    write("test", 30, 2);
    let p = |s: &str| dir.path().join(s).display().to_string();
    let text = format!(
        r#"{{"dataset": {{"source": "idx", "train_images": "{}", "train_labels": "{}", "test_images": "{}", "test_labels": "{}"}},
            "model": {{"hidden": [8]}},
            "federation": {{"scheme": "fl-top", "num_clients": 6, "sampling": 0.5, "rounds": 2,
                "local": {{"iterations": 2, "learning_rate": 0.1, "batch_size": 5}}, "ratio": 0.1}},
            "output_dir": "{}"}}"#,
        p("train-images"),
        p("train-labels"),
        p("test-images"),
        p("test-labels"),
        p("out")
    );
    let cfg = dir.path().join("idx.json");
    fs::write(&cfg, &text).unwrap();
    let o = fltop(&["run", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(dir.path().join("out/trace.csv")).unwrap().lines().count(), 3);

    fs::write(&cfg, text.replace("test-labels", "nope-labels")).unwrap();
    assert_eq!(fltop(&["run", cfg.to_str().unwrap()]).status.code(), Some(2));
}
