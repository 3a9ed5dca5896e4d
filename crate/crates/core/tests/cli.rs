use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use roadtwin::harness::PipelineConfig;
use serde_json::{json, Value};
use tempfile::TempDir;

fn roadtwin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roadtwin"))
        .args(["--threads", "1"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Short run so each test stays quick. A twin rate equal to the
/// ground-truth rate puts both streams on the same time grid.
fn write_config(dir: &Path, duration: f64, twin_rate: f64) -> PathBuf {
    let mut cfg = PipelineConfig::default();
    cfg.scenario.duration = duration;
    cfg.twin_rate = twin_rate;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

fn simulate(dir: &Path, cfg: &Path, out: &str) -> PathBuf {
    let out_dir = dir.join(out);
    let o = roadtwin(&["simulate", "--config", s(cfg), "--out-dir", s(&out_dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out_dir
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

/// Twin records copied from ground truth, every x moved by `shift`.
fn twin_from_truth(truth: &Path, out: &Path, shift: f64) {
    let mut id = [0.0; 16];
    for k in 0..4 {
        id[5 * k] = 1.0;
    }
    let text: Vec<String> = lines(truth)
        .iter()
        .map(|l| {
            let g: Value = serde_json::from_str(l).unwrap();
            json!({
                "t": g["t"], "gid": g["id"], "x": g["x"].as_f64().unwrap() + shift, "y": g["y"],
                "vx": g["vx"], "vy": g["vy"], "cov": id, "class": g["class"],
            })
            .to_string()
        })
        .collect();
    std::fs::write(out, text.join("\n") + "\n").unwrap();
}

fn evaluate(dir: &Path, cfg: &Path, truth: &Path, twin: &Path, extra: &[&str]) -> (i32, Option<Value>) {
    let report = dir.join("report.json");
    let _ = std::fs::remove_file(&report);
    let mut args = vec!["evaluate", "--config", s(cfg), "--truth", s(truth), "--twin", s(twin), "--report", s(&report)];
    args.extend_from_slice(extra);
    let o = roadtwin(&args);
    let parsed = std::fs::read_to_string(&report).ok().map(|t| serde_json::from_str(&t).unwrap());
    (code(&o), parsed)
}

#[test]
fn simulate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 20.0, 1.0);
    let a = simulate(dir.path(), &cfg, "a");
    let b = simulate(dir.path(), &cfg, "b");
    for f in ["ground_truth.jsonl", "detections.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(!lines(&a.join("ground_truth.jsonl")).is_empty());
}

#[test]
fn zero_duration_gives_empty_streams() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 0.0, 1.0);
    let out = simulate(dir.path(), &cfg, "run");
    assert!(lines(&out.join("ground_truth.jsonl")).is_empty());
    assert!(lines(&out.join("detections.jsonl")).is_empty());
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nno_such_key = 3\n").unwrap();
    let o = roadtwin(&["simulate", "--config", s(&cfg), "--out-dir", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let mut bad = PipelineConfig::default();
    bad.scenario.lane_width = -1.0;
    std::fs::write(&cfg, bad.to_toml_string()).unwrap();
    let o = roadtwin(&["simulate", "--config", s(&cfg), "--out-dir", s(&dir.path().join("x"))]);
    assert_eq!(code(&o), 2);

    assert_eq!(code(&roadtwin(&["simulate"])), 2);
}

#[test]
fn out_of_order_detections_exit_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 5.0, 1.0);
    let run = simulate(dir.path(), &cfg, "run");
    let mut det = lines(&run.join("detections.jsonl"));
    let last = det.pop().unwrap();
    det.insert(0, last);
    let bad = dir.path().join("shuffled.jsonl");
    std::fs::write(&bad, det.join("\n") + "\n").unwrap();
    let o = roadtwin(&["track", "--config", s(&cfg), "--detections", s(&bad), "--mp", "mp1", "--out", s(&dir.path().join("t.jsonl"))]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));

    std::fs::write(&bad, "{\"t\": 0.0, \"sensor_id\": 5}\n").unwrap();
    let o = roadtwin(&["track", "--config", s(&cfg), "--detections", s(&bad), "--mp", "mp1", "--out", s(&dir.path().join("t.jsonl"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn track_fuse_evaluate_chain_and_missing_stream() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 20.0, 5.4);
    let run = simulate(dir.path(), &cfg, "run");
    let det = run.join("detections.jsonl");
    let mut tracks = Vec::new();
    for mp in ["mp1", "mp2"] {
        let out = dir.path().join(format!("tracks_{mp}.jsonl"));
        let o = roadtwin(&["track", "--config", s(&cfg), "--detections", s(&det), "--mp", mp, "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        tracks.push(out);
    }
    let twin = dir.path().join("twin.jsonl");
    let o = roadtwin(&["fuse", "--config", s(&cfg), "--tracks", s(&tracks[0]), "--out", s(&twin)]);
    assert_eq!(code(&o), 4);

    let o = roadtwin(&["fuse", "--config", s(&cfg), "--tracks", s(&tracks[0]), s(&tracks[1]), "--out", s(&twin)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (c, report) = evaluate(dir.path(), &cfg, &run.join("ground_truth.jsonl"), &twin, &[]);
    assert_eq!(c, 0);
    let r = report.unwrap();
    assert!(r["tp"].as_u64().unwrap() > 0);
    assert!(dir.path().join("error_map.csv").exists());
}

#[test]
fn exact_copy_and_shifted_twin() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 30.0, 1.0);
    let run = simulate(dir.path(), &cfg, "run");
    let truth = run.join("ground_truth.jsonl");
    let twin = dir.path().join("twin.jsonl");

    twin_from_truth(&truth, &twin, 0.0);
    let (c, r) = evaluate(dir.path(), &cfg, &truth, &twin, &[]);
    assert_eq!(c, 0);
    let r = r.unwrap();
    assert_eq!(r["precision"], 1.0);
    assert_eq!(r["recall"], 1.0);
    assert_eq!(r["rmse"], 0.0);

    twin_from_truth(&truth, &twin, 2.0);
    let (c, shifted) = evaluate(dir.path(), &cfg, &truth, &twin, &[]);
    assert_eq!(c, 0);
    let shifted = shifted.unwrap();
    assert!((shifted["rmse_x"].as_f64().unwrap() - 2.0).abs() <= 1e-9);
    assert_eq!(shifted["rmse_y"], 0.0);
    assert_eq!(shifted["recall"], 1.0);
}

#[test]
fn disjoint_time_ranges_exit_5() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), 30.0, 1.0);
    let run = simulate(dir.path(), &cfg, "run");
    let truth_all = run.join("ground_truth.jsonl");
    let early: Vec<String> = lines(&truth_all)
        .into_iter()
        .filter(|l| serde_json::from_str::<Value>(l).unwrap()["t"].as_f64().unwrap() < 10.0)
        .collect();
    let late = dir.path().join("late_truth.jsonl");
    let truth = dir.path().join("early_truth.jsonl");
    std::fs::write(&truth, early.join("\n") + "\n").unwrap();
    let late_lines: Vec<String> = lines(&truth_all)
        .into_iter()
        .filter(|l| serde_json::from_str::<Value>(l).unwrap()["t"].as_f64().unwrap() > 20.0)
        .collect();
    std::fs::write(&late, late_lines.join("\n") + "\n").unwrap();
    let twin = dir.path().join("twin.jsonl");
    twin_from_truth(&late, &twin, 0.0);
    let (c, report) = evaluate(dir.path(), &cfg, &truth, &twin, &[]);
    assert_eq!(c, 5);
    assert!(report.is_none());
}

#[test]
fn boundary_exclusion_does_not_lower_recall() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = roadtwin(&["pipeline", "--out-dir", s(&out), "--exclude-boundary"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("Precision") && stdout.contains("Recall"));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["boundary_band"], 10.0);
    assert!(r["recall_excluding_boundary"].as_f64().unwrap() >= r["recall"].as_f64().unwrap());
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    for k in ["ground_truth", "detections", "tracks_mp1", "tracks_mp2", "twin", "report", "error_map"] {
        assert!(Path::new(manifest["outputs"][k].as_str().unwrap()).exists(), "{k}");
    }
}

#[test]
fn default_config_matches_the_shipped_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("default.toml");
    assert_eq!(code(&roadtwin(&["default-config", "--out", s(&out)])), 0);
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    assert_eq!(std::fs::read_to_string(out).unwrap(), std::fs::read_to_string(shipped).unwrap());
}
