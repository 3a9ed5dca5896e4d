//! Line-oriented log records and their readers and writers.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Matrix4;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::evaluation::{TwinFrame, TwinObject};
use crate::fusion::FusedTrack;
use crate::geometry::ImageBox;
use crate::scenario::{VehicleClass, VehicleState};
use crate::sensing::{Detection, Payload, SensorKind};
use crate::tracker::{Track, TrackStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthRecord {
    pub t: f64,
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub class: VehicleClass,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl GroundTruthRecord {
    pub fn new(t: f64, v: &VehicleState) -> Self {
        Self {
            t,
            id: v.id,
            x: v.x,
            y: v.y,
            vx: v.vx,
            vy: v.vy,
            class: v.class,
            length: v.length,
            width: v.width,
            height: v.height,
        }
    }

    pub fn vehicle(&self) -> VehicleState {
        VehicleState {
            id: self.id,
            class: self.class,
            x: self.x,
            y: self.y,
            vx: self.vx,
            vy: self.vy,
            length: self.length,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub t: f64,
    pub sensor_id: String,
    pub mp_id: String,
    pub kind: SensorKind,
    /// Camera: `[u_min, v_min, u_max, v_max]` (px); radar: `[x, y, vx, vy]`.
    pub z: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<VehicleClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conf: Option<f64>,
}

impl DetectionRecord {
    pub fn new(mp_id: &str, d: &Detection) -> Self {
        let (kind, z, class, conf) = match d.payload {
            Payload::Camera { bbox, class, confidence } => {
                (SensorKind::Camera, bbox.to_array().to_vec(), Some(class), Some(confidence))
            }
            Payload::Radar { state } => (SensorKind::Radar, state.to_vec(), None, None),
        };
        Self {
            t: d.t,
            sensor_id: d.sensor_id.clone(),
            mp_id: mp_id.to_string(),
            kind,
            z,
            class,
            conf,
        }
    }

    /// Rebuilds the tracker-facing detection. Clutter bookkeeping is not
    /// part of the log, so every record comes back as a plain detection.
    pub fn detection(&self) -> Result<Detection, String> {
        let z: [f64; 4] = self
            .z
            .as_slice()
            .try_into()
            .map_err(|_| format!("z must have 4 entries, found {}", self.z.len()))?;
        if !z.iter().all(|v| v.is_finite()) {
            return Err("z must be finite".into());
        }
        let payload = match self.kind {
            SensorKind::Camera => Payload::Camera {
                bbox: ImageBox::new(z[0], z[1], z[2], z[3]),
                class: self.class.ok_or("camera record without class")?,
                confidence: self.conf.unwrap_or(1.0),
            },
            SensorKind::Radar => Payload::Radar { state: z },
        };
        Ok(Detection {
            sensor_id: self.sensor_id.clone(),
            t: self.t,
            payload,
            is_clutter: false,
        })
    }
}

fn cov_array(m: &Matrix4<f64>) -> [f64; 16] {
    // row-major
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[4 * r + c] = m[(r, c)];
        }
    }
    out
}

fn cov_matrix(a: &[f64; 16]) -> Matrix4<f64> {
    Matrix4::from_row_slice(a)
}

/// First line of a track log: which sensors the file covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackHeader {
    pub mp_id: String,
    pub sensor_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackRecord {
    pub t: f64,
    pub sensor_id: String,
    pub label: u64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub cov: [f64; 16],
    pub status: TrackStatus,
    #[serde(default)]
    pub class_votes: [u32; 4],
}

impl TrackRecord {
    pub fn new(t: f64, sensor_id: &str, tr: &Track) -> Self {
        Self {
            t,
            sensor_id: sensor_id.to_string(),
            label: tr.label,
            x: tr.state[0],
            y: tr.state[1],
            vx: tr.state[2],
            vy: tr.state[3],
            cov: cov_array(&tr.cov),
            status: tr.status,
            class_votes: tr.class_votes,
        }
    }

    pub fn track(&self) -> Track {
        Track {
            label: self.label,
            state: [self.x, self.y, self.vx, self.vy].into(),
            cov: cov_matrix(&self.cov),
            status: self.status,
            class_votes: self.class_votes,
            last_update: self.t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrackLine {
    Header(TrackHeader),
    Record(TrackRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwinRecord {
    pub t: f64,
    pub gid: u64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub cov: [f64; 16],
    #[serde(default)]
    pub class: Option<VehicleClass>,
}

impl TwinRecord {
    pub fn new(t: f64, tr: &FusedTrack) -> Self {
        Self {
            t,
            gid: tr.gid,
            x: tr.state[0],
            y: tr.state[1],
            vx: tr.state[2],
            vy: tr.state[3],
            cov: cov_array(&tr.cov),
            class: tr.class,
        }
    }

    pub fn object(&self) -> TwinObject {
        TwinObject {
            gid: self.gid,
            x: self.x,
            y: self.y,
            vx: self.vx,
            vy: self.vy,
            class: self.class,
        }
    }
}

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<(), HarnessError> {
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| HarnessError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Reads a JSONL file; blank lines are skipped. Records must have
/// non-decreasing `t` as reported by `time_of`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, time_of: impl Fn(&T) -> Option<f64>) -> Result<Vec<T>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |msg: String| HarnessError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let item: T = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if let Some(t) = time_of(&item) {
            if !t.is_finite() {
                return Err(malformed("timestamp is not finite".into()));
            }
            if t < last {
                return Err(malformed(format!("timestamp {t} is earlier than the previous record ({last})")));
            }
            last = t;
        }
        out.push(item);
    }
    Ok(out)
}

/// Groups time-sorted twin records into frames on the given tick grid.
/// Records off the grid are reported as malformed.
pub fn twin_frames(path: &Path, records: &[TwinRecord], ticks: &[f64]) -> Result<Vec<TwinFrame>, HarnessError> {
    let mut frames: Vec<TwinFrame> = ticks
        .iter()
        .map(|&t| TwinFrame {
            t,
            objects: Vec::new(),
        })
        .collect();
    for (i, r) in records.iter().enumerate() {
        let k = nearest_tick(ticks, r.t).ok_or_else(|| HarnessError::Malformed {
            path: path.display().to_string(),
            line: i + 1,
            msg: format!("t={} is not a twin tick", r.t),
        })?;
        frames[k].objects.push(r.object());
    }
    Ok(frames)
}

/// Index of the grid time within 1e-6 s of `t`.
pub fn nearest_tick(ticks: &[f64], t: f64) -> Option<usize> {
    let k = ticks.partition_point(|&x| x < t);
    [k.checked_sub(1), Some(k)]
        .into_iter()
        .flatten()
        .filter(|&i| i < ticks.len())
        .find(|&i| (ticks[i] - t).abs() <= 1e-6)
}
