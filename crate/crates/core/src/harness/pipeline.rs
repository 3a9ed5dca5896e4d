//! The simulate → track → fuse → evaluate stages.
//!
//! Every stage is a pure function of the config and its inputs. Sensor
//! streams run in parallel but are collected in config order, so thread
//! count never changes the output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::records::{
    nearest_tick, read_jsonl, twin_frames, write_jsonl, DetectionRecord, GroundTruthRecord, TrackHeader, TrackLine,
    TrackRecord, TwinRecord,
};
use super::HarnessError;
use crate::evaluation::{evaluate, EvalError, MetricsReport, TwinFrame};
use crate::fusion::{fuse_measurement_point, Backend, DigitalTwinFrame, SensorTracks, Tracklet};
use crate::scenario::{GroundTruthFrame, World};
use crate::seed;
use crate::sensing::{Detection, DropCounts, Sensor, SensorSpec};
use crate::tracker::{GmPhdTracker, Track};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub t: f64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorDetections {
    pub sensor_id: String,
    pub mp_id: String,
    /// One entry per sensor frame, empty frames included.
    pub frames: Vec<DetectionFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// One frame per ground-truth sample, restricted to the stretch.
    pub ground_truth: Vec<GroundTruthFrame>,
    /// In config sensor order.
    pub detections: Vec<SensorDetections>,
}

impl Simulation {
    pub fn observation_count(&self) -> usize {
        self.ground_truth.iter().map(|f| f.vehicles.len()).sum()
    }
}

/// Runs traffic and all sensors.
pub fn simulate(cfg: &PipelineConfig) -> Result<Simulation, HarnessError> {
    let world = World::new(cfg.scenario.clone(), cfg.seed).map_err(|e| HarnessError::Config(e.to_string()))?;
    simulate_world(cfg, world)
}

/// Records `world` from its current step for the configured duration.
/// Scripted scenarios build the world themselves and pass it in.
pub fn simulate_world(cfg: &PipelineConfig, mut world: World) -> Result<Simulation, HarnessError> {
    let sc = &cfg.scenario;
    let gt_every = sc.steps_per_sample(sc.gt_rate).expect("validated");
    let every: Vec<u64> = cfg
        .sensors
        .iter()
        .map(|s| sc.steps_per_sample(s.rate).expect("validated"))
        .collect();
    let mut ground_truth = Vec::new();
    let mut snapshots = Vec::new();
    for k in 0..sc.recorded_steps() {
        if k % gt_every == 0 {
            ground_truth.push(world.sample_ground_truth());
        }
        if every.iter().any(|e| k % e == 0) {
            snapshots.push((k, world.time(), world.snapshot()));
        }
        world.advance();
    }
    let detections = cfg
        .sensors
        .par_iter()
        .zip(every.par_iter())
        .map(|(spec, &e)| {
            let sensor = Sensor::new(spec.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
            let mut rng = seed::stream(cfg.seed, &format!("sensor:{}", spec.id));
            let mut clutter = seed::stream(cfg.seed, &format!("clutter:{}", spec.id));
            let frames = snapshots
                .iter()
                .filter(|(k, _, _)| k % e == 0)
                .map(|(_, t, vehicles)| DetectionFrame {
                    t: *t,
                    detections: sensor.observe(*t, vehicles, &mut rng, &mut clutter),
                })
                .collect();
            Ok(SensorDetections {
                sensor_id: spec.id.clone(),
                mp_id: spec.mp_id.clone(),
                frames,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(Simulation {
        ground_truth,
        detections,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensorTrackLog {
    pub sensor_id: String,
    pub mp_id: String,
    /// Confirmed tracks after every sensor frame, empty frames included.
    pub frames: Vec<(f64, Vec<Track>)>,
}

/// One GM-PHD tracker over one sensor's frames.
pub fn track_sensor(
    cfg: &PipelineConfig,
    spec: &SensorSpec,
    frames: &[DetectionFrame],
) -> Result<(SensorTrackLog, DropCounts), HarnessError> {
    let sensor = Sensor::new(spec.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    let mut tracker = GmPhdTracker::new(cfg.tracker.for_sensor(spec)?);
    let model = cfg.tracker.observation(spec);
    let mut drops = DropCounts::default();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let (mf, d) = sensor.to_world(f.t, &f.detections);
        drops.no_intersection += d.no_intersection;
        drops.out_of_range += d.out_of_range;
        let tracks = tracker
            .process(&mf, &model)
            .map_err(|e| HarnessError::stage(format!("sensor {}: {e}", spec.id)))?;
        out.push((f.t, tracks));
    }
    Ok((
        SensorTrackLog {
            sensor_id: spec.id.clone(),
            mp_id: spec.mp_id.clone(),
            frames: out,
        },
        drops,
    ))
}

/// Tracks every sensor stream, in parallel, returning logs in input order.
pub fn track_all(cfg: &PipelineConfig, streams: &[SensorDetections]) -> Result<Vec<SensorTrackLog>, HarnessError> {
    streams
        .par_iter()
        .map(|s| {
            let spec = cfg
                .sensor(&s.sensor_id)
                .ok_or_else(|| HarnessError::Config(format!("unknown sensor {}", s.sensor_id)))?;
            let (log, drops) = track_sensor(cfg, spec, &s.frames)?;
            log::debug!(
                "{}: {} boxes missed the road, {} beyond range",
                s.sensor_id,
                drops.no_intersection,
                drops.out_of_range
            );
            Ok(log)
        })
        .collect()
}

/// The sensor's latest frame at or before `t`, if not older than `max_age`.
fn latest_frame(log: &SensorTrackLog, t: f64, max_age: f64) -> Option<&(f64, Vec<Track>)> {
    let k = log.frames.partition_point(|(ft, _)| *ft <= t + 1e-9);
    let f = log.frames.get(k.checked_sub(1)?)?;
    (t - f.0 <= max_age).then_some(f)
}

/// Runs both fusion levels on the twin tick grid.
pub fn fuse_twin(cfg: &PipelineConfig, logs: &[SensorTrackLog]) -> Result<Vec<DigitalTwinFrame>, HarnessError> {
    let ticks = cfg.twin_times();
    let mut mp_ids: Vec<&str> = cfg.measurement_points.iter().map(|m| m.id.as_str()).collect();
    mp_ids.sort_unstable();
    let max_age: BTreeMap<&str, f64> = cfg.sensors.iter().map(|s| (s.id.as_str(), 1.5 / s.rate)).collect();

    // the first level is stateless per tick, so ticks fan out freely
    let batches = ticks
        .par_iter()
        .map(|&t| {
            mp_ids
                .iter()
                .map(|mp| {
                    let inputs: Vec<SensorTracks> = logs
                        .iter()
                        .filter(|l| l.mp_id == *mp)
                        .filter_map(|l| {
                            let age = max_age.get(l.sensor_id.as_str()).copied().unwrap_or(f64::INFINITY);
                            latest_frame(l, t, age).map(|(ft, tracks)| SensorTracks {
                                sensor_id: l.sensor_id.clone(),
                                t: *ft,
                                tracks: tracks.clone(),
                            })
                        })
                        .collect();
                    fuse_measurement_point(mp, &inputs, t, &cfg.fusion).map_err(HarnessError::stage)
                })
                .collect::<Result<Vec<Vec<Tracklet>>, HarnessError>>()
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut backend = Backend::new(cfg.fusion.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
    ticks
        .iter()
        .zip(&batches)
        .map(|(&t, b)| backend.step(t, b).map_err(HarnessError::stage))
        .collect()
}

/// Scores a twin against ground truth with the configured gate.
pub fn evaluate_run(
    cfg: &PipelineConfig,
    gt: &[GroundTruthFrame],
    twin: &[TwinFrame],
    boundary_band: Option<f64>,
) -> Result<MetricsReport, HarnessError> {
    let mut ec = cfg.eval.clone();
    if let Some(b) = boundary_band {
        ec.boundary_band = b;
    }
    let max_gap = 0.5 / cfg.scenario.gt_rate;
    // occupied time spans must meet; both streams sit on the full grid
    let gt_span = occupied_span(gt.iter().filter(|f| !f.vehicles.is_empty()).map(|f| f.t));
    let twin_span = occupied_span(twin.iter().filter(|f| !f.objects.is_empty()).map(|f| f.t));
    if let (Some((g0, g1)), Some((w0, w1))) = (gt_span, twin_span) {
        if w1 < g0 - max_gap || w0 > g1 + max_gap {
            return Err(HarnessError::NoOverlap(format!(
                "ground truth covers [{g0}, {g1}] s, twin covers [{w0}, {w1}] s"
            )));
        }
    }
    evaluate(gt, twin, max_gap, &ec).map_err(|e| match e {
        EvalError::NoTwinFrame { .. } => HarnessError::NoOverlap(e.to_string()),
        EvalError::InvalidConfig(m) => HarnessError::Config(m),
        other => HarnessError::stage(other),
    })
}

fn occupied_span(times: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    times.fold(None, |acc, t| Some(acc.map_or((t, t), |(a, b): (f64, f64)| (a.min(t), b.max(t)))))
}

// ---- log files -------------------------------------------------------

pub fn write_ground_truth(path: &Path, frames: &[GroundTruthFrame]) -> Result<(), HarnessError> {
    write_jsonl(
        path,
        frames
            .iter()
            .flat_map(|f| f.vehicles.iter().map(move |v| GroundTruthRecord::new(f.t, v))),
    )
}

/// Ground truth on the config's sample grid; frames without vehicles are kept.
pub fn read_ground_truth(path: &Path, cfg: &PipelineConfig) -> Result<Vec<GroundTruthFrame>, HarnessError> {
    let records: Vec<GroundTruthRecord> = read_jsonl(path, |r: &GroundTruthRecord| Some(r.t))?;
    let times = cfg.gt_times();
    let mut frames: Vec<GroundTruthFrame> = times
        .iter()
        .map(|&t| GroundTruthFrame {
            t,
            vehicles: Vec::new(),
        })
        .collect();
    for (i, r) in records.iter().enumerate() {
        let k = nearest_tick(&times, r.t).ok_or_else(|| HarnessError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("t={} is not a ground-truth sample time", r.t),
        })?;
        frames[k].vehicles.push(r.vehicle());
    }
    Ok(frames)
}

pub fn write_detections(path: &Path, streams: &[SensorDetections]) -> Result<(), HarnessError> {
    let mut all: Vec<(f64, usize, DetectionRecord)> = Vec::new();
    for (i, s) in streams.iter().enumerate() {
        for f in &s.frames {
            for d in &f.detections {
                all.push((f.t, i, DetectionRecord::new(&s.mp_id, d)));
            }
        }
    }
    // stable: time first, then config sensor order, then emission order
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    write_jsonl(path, all.into_iter().map(|(_, _, r)| r))
}

/// Detection streams of the selected sensors, on each sensor's frame grid.
pub fn read_detections(path: &Path, cfg: &PipelineConfig, sensors: &[&SensorSpec]) -> Result<Vec<SensorDetections>, HarnessError> {
    let records: Vec<DetectionRecord> = read_jsonl(path, |r: &DetectionRecord| Some(r.t))?;
    let mut streams: Vec<SensorDetections> = sensors
        .iter()
        .map(|s| SensorDetections {
            sensor_id: s.id.clone(),
            mp_id: s.mp_id.clone(),
            frames: cfg
                .sample_times(s.rate)
                .into_iter()
                .map(|t| DetectionFrame {
                    t,
                    detections: Vec::new(),
                })
                .collect(),
        })
        .collect();
    let times: Vec<Vec<f64>> = streams.iter().map(|s| s.frames.iter().map(|f| f.t).collect()).collect();
    for (i, r) in records.iter().enumerate() {
        let malformed = |msg: String| HarnessError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        if cfg.sensor(&r.sensor_id).is_none() {
            return Err(malformed(format!("unknown sensor '{}'", r.sensor_id)));
        }
        let Some(si) = streams.iter().position(|s| s.sensor_id == r.sensor_id) else {
            continue;
        };
        if cfg.sensors[cfg.sensors.iter().position(|s| s.id == r.sensor_id).unwrap()].kind() != r.kind {
            return Err(malformed(format!("kind does not match sensor '{}'", r.sensor_id)));
        }
        let k = nearest_tick(&times[si], r.t).ok_or_else(|| malformed(format!("t={} is not a frame time", r.t)))?;
        let det = r.detection().map_err(malformed)?;
        streams[si].frames[k].detections.push(Detection { t: times[si][k], ..det });
    }
    Ok(streams)
}

/// One file per MP, starting with a header naming its sensors.
pub fn write_tracks(path: &Path, mp_id: &str, logs: &[&SensorTrackLog]) -> Result<(), HarnessError> {
    let mut lines = vec![TrackLine::Header(TrackHeader {
        mp_id: mp_id.to_string(),
        sensor_ids: logs.iter().map(|l| l.sensor_id.clone()).collect(),
    })];
    let mut recs: Vec<(f64, usize, TrackRecord)> = Vec::new();
    for (i, l) in logs.iter().enumerate() {
        for (t, tracks) in &l.frames {
            recs.extend(tracks.iter().map(|tr| (*t, i, TrackRecord::new(*t, &l.sensor_id, tr))));
        }
    }
    recs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    lines.extend(recs.into_iter().map(|(_, _, r)| TrackLine::Record(r)));
    write_jsonl(path, lines)
}

/// Track logs from one or more files. Every configured sensor must be
/// covered by some file header.
pub fn read_tracks(paths: &[PathBuf], cfg: &PipelineConfig) -> Result<Vec<SensorTrackLog>, HarnessError> {
    let mut logs: BTreeMap<String, SensorTrackLog> = BTreeMap::new();
    for path in paths {
        let lines: Vec<TrackLine> = read_jsonl(path, |l: &TrackLine| match l {
            TrackLine::Record(r) => Some(r.t),
            TrackLine::Header(_) => None,
        })?;
        let mut covered = Vec::new();
        for (i, line) in lines.into_iter().enumerate() {
            let malformed = |msg: String| HarnessError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            match line {
                TrackLine::Header(h) => {
                    for id in h.sensor_ids {
                        let spec = cfg.sensor(&id).ok_or_else(|| malformed(format!("unknown sensor '{id}'")))?;
                        let frames = cfg.sample_times(spec.rate).into_iter().map(|t| (t, Vec::new())).collect();
                        logs.insert(
                            id.clone(),
                            SensorTrackLog {
                                sensor_id: id.clone(),
                                mp_id: spec.mp_id.clone(),
                                frames,
                            },
                        );
                        covered.push(id);
                    }
                }
                TrackLine::Record(r) => {
                    if !covered.contains(&r.sensor_id) {
                        return Err(malformed(format!("sensor '{}' is not in the file header", r.sensor_id)));
                    }
                    let log = logs.get_mut(&r.sensor_id).expect("header inserted");
                    let times: Vec<f64> = log.frames.iter().map(|f| f.0).collect();
                    let k = nearest_tick(&times, r.t).ok_or_else(|| malformed(format!("t={} is not a frame time", r.t)))?;
                    log.frames[k].1.push(r.track());
                }
            }
        }
    }
    let mut out = Vec::new();
    for s in &cfg.sensors {
        out.push(logs.remove(&s.id).ok_or_else(|| HarnessError::MissingStream(s.id.clone()))?);
    }
    Ok(out)
}

pub fn write_twin(path: &Path, frames: &[DigitalTwinFrame]) -> Result<(), HarnessError> {
    write_jsonl(
        path,
        frames
            .iter()
            .flat_map(|f| f.tracks.iter().map(move |tr| TwinRecord::new(f.t, tr))),
    )
}

pub fn read_twin(path: &Path, cfg: &PipelineConfig) -> Result<Vec<TwinFrame>, HarnessError> {
    let records: Vec<TwinRecord> = read_jsonl(path, |r: &TwinRecord| Some(r.t))?;
    twin_frames(path, &records, &cfg.twin_times())
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| HarnessError::io(path, e.into()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn write_error_map(path: &Path, report: &MetricsReport) -> Result<(), HarnessError> {
    let mut text = String::from("x_index,y_index,mean_error,count\n");
    for c in &report.error_grid {
        let _ = writeln!(text, "{},{},{},{}", c.x_index, c.y_index, c.mean_error, c.count);
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Human-readable metrics in the usual column order.
pub fn summary_table(r: &MetricsReport) -> String {
    let f = |v: Option<f64>, pct: bool| match v {
        Some(x) if pct => format!("{:.2}%", 100.0 * x),
        Some(x) => format!("{x:.2} m"),
        None => "n/a".into(),
    };
    let mut s = String::new();
    let _ = writeln!(s, "{:>9} | {:>9} | {:>9} | {:>9} | {:>9}", "RMSE", "RMSE_x", "RMSE_y", "Precision", "Recall");
    let _ = writeln!(
        s,
        "{:>9} | {:>9} | {:>9} | {:>9} | {:>9}",
        f(r.rmse, false),
        f(r.rmse_x, false),
        f(r.rmse_y, false),
        f(r.precision, true),
        f(r.recall, true)
    );
    let _ = writeln!(
        s,
        "TP {}  FP {}  FN {}  p50 {}  p95 {}",
        r.tp,
        r.fp,
        r.fn_,
        f(r.p50, false),
        f(r.p95, false)
    );
    if r.boundary_band > 0.0 {
        let _ = writeln!(s, "recall excluding {} m boundary band: {}", r.boundary_band, f(r.recall_excluding_boundary, true));
    }
    s
}

// ---- full run ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub outputs: BTreeMap<String, String>,
    pub stage_seconds: BTreeMap<String, f64>,
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: MetricsReport,
    pub manifest: RunManifest,
    pub ground_truth_observations: usize,
}

/// Every stage in order, writing all artifacts and the manifest.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path, boundary_band: Option<f64>) -> Result<PipelineOutcome, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut outputs = BTreeMap::new();
    let mut stage_seconds = BTreeMap::new();
    let mut timed = |name: &str, start: Instant| {
        stage_seconds.insert(name.to_string(), start.elapsed().as_secs_f64());
    };

    let start = Instant::now();
    let sim = simulate(cfg)?;
    let gt_path = out_dir.join("ground_truth.jsonl");
    let det_path = out_dir.join("detections.jsonl");
    write_ground_truth(&gt_path, &sim.ground_truth)?;
    write_detections(&det_path, &sim.detections)?;
    outputs.insert("ground_truth".to_string(), gt_path.display().to_string());
    outputs.insert("detections".to_string(), det_path.display().to_string());
    timed("simulate", start);
    log::info!("simulated {} ground-truth observations", sim.observation_count());

    let start = Instant::now();
    let logs = track_all(cfg, &sim.detections)?;
    for mp in &cfg.measurement_points {
        let mine: Vec<&SensorTrackLog> = logs.iter().filter(|l| l.mp_id == mp.id).collect();
        let p = out_dir.join(format!("tracks_{}.jsonl", mp.id));
        write_tracks(&p, &mp.id, &mine)?;
        outputs.insert(format!("tracks_{}", mp.id), p.display().to_string());
    }
    timed("track", start);

    let start = Instant::now();
    let twin = fuse_twin(cfg, &logs)?;
    let twin_path = out_dir.join("twin.jsonl");
    write_twin(&twin_path, &twin)?;
    outputs.insert("twin".to_string(), twin_path.display().to_string());
    timed("fuse", start);

    let start = Instant::now();
    let frames: Vec<TwinFrame> = twin.iter().map(TwinFrame::from).collect();
    let report = evaluate_run(cfg, &sim.ground_truth, &frames, boundary_band)?;
    let report_path = out_dir.join("report.json");
    let map_path = out_dir.join("error_map.csv");
    write_report(&report_path, &report)?;
    write_error_map(&map_path, &report)?;
    outputs.insert("report".to_string(), report_path.display().to_string());
    outputs.insert("error_map".to_string(), map_path.display().to_string());
    timed("evaluate", start);

    let manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").to_string(),
        outputs,
        stage_seconds,
    };
    let manifest_path = out_dir.join("manifest.json");
    let bytes = serde_json::to_vec_pretty(&manifest).map_err(|e| HarnessError::io(&manifest_path, e.into()))?;
    write_atomic(&manifest_path, &bytes)?;
    Ok(PipelineOutcome {
        report,
        manifest,
        ground_truth_observations: sim.observation_count(),
    })
}
