//! Scoring a digital twin against ground truth.
//!
//! Ground-truth frames are paired with the nearest twin frame, whose
//! objects are moved to the ground-truth time at constant velocity. The
//! two object lists are then matched one-to-one by a Hungarian assignment
//! on an elliptical distance stretched along the road, and matches
//! outside the ellipse are rejected.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve, AssignmentError};
use crate::fusion::DigitalTwinFrame;
use crate::scenario::{GroundTruthFrame, VehicleClass};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("no twin frame within {max_gap} s of ground truth at t={t}")]
    NoTwinFrame { t: f64, max_gap: f64 },
    #[error("invalid eval config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Gating ellipse semi-axis along the driving direction (m).
    pub semi_major: f64,
    /// Gating ellipse semi-axis across lanes (m).
    pub semi_minor: f64,
    /// Ground-truth objects this close to either end of the region are
    /// left out of the boundary-excluded recall (m).
    pub boundary_band: f64,
    pub cell_size: f64,
    /// Evaluated stretch `[x_min, x_max]` (m). Unmatched twin objects
    /// count as false positives only inside it.
    pub region: [f64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            semi_major: 6.75,
            semi_minor: 1.1,
            boundary_band: 0.0,
            cell_size: 10.0,
            region: [0.0, 440.0],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.semi_major > self.semi_minor && self.semi_minor > 0.0) {
            return Err(EvalError::InvalidConfig("need semi_major > semi_minor > 0".into()));
        }
        if !(self.cell_size > 0.0) || !(self.boundary_band >= 0.0) {
            return Err(EvalError::InvalidConfig("cell_size must be positive, boundary_band non-negative".into()));
        }
        if !(self.region[1] > self.region[0]) {
            return Err(EvalError::InvalidConfig("region must have x_max > x_min".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwinObject {
    pub gid: u64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub class: Option<VehicleClass>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TwinFrame {
    pub t: f64,
    pub objects: Vec<TwinObject>,
}

impl From<&DigitalTwinFrame> for TwinFrame {
    fn from(f: &DigitalTwinFrame) -> Self {
        TwinFrame {
            t: f.t,
            objects: f
                .tracks
                .iter()
                .map(|tr| TwinObject {
                    gid: tr.gid,
                    x: tr.state[0],
                    y: tr.state[1],
                    vx: tr.state[2],
                    vy: tr.state[3],
                    class: tr.class,
                })
                .collect(),
        }
    }
}

impl TwinFrame {
    /// All objects moved by `dt` at constant velocity.
    pub fn extrapolated(&self, dt: f64) -> TwinFrame {
        TwinFrame {
            t: self.t + dt,
            objects: self
                .objects
                .iter()
                .map(|o| TwinObject {
                    x: o.x + o.vx * dt,
                    y: o.y + o.vy * dt,
                    ..*o
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFrame {
    pub gt: GroundTruthFrame,
    pub twin: TwinFrame,
    /// Ground-truth time minus source twin time.
    pub dt: f64,
}

/// Pairs each ground-truth frame with the nearest twin frame (ties go to
/// the earlier one), extrapolated to the ground-truth time.
pub fn align_frames(gt: &[GroundTruthFrame], twin: &[TwinFrame], max_gap: f64) -> Result<Vec<AlignedFrame>, EvalError> {
    gt.iter()
        .map(|g| {
            let k = twin.partition_point(|f| f.t < g.t);
            let nearest = [k.checked_sub(1), (k < twin.len()).then_some(k)]
                .into_iter()
                .flatten()
                .min_by(|&a, &b| (g.t - twin[a].t).abs().total_cmp(&(g.t - twin[b].t).abs()));
            match nearest {
                Some(i) if (g.t - twin[i].t).abs() <= max_gap => {
                    let dt = g.t - twin[i].t;
                    Ok(AlignedFrame {
                        gt: g.clone(),
                        twin: twin[i].extrapolated(dt),
                        dt,
                    })
                }
                _ => Err(EvalError::NoTwinFrame { t: g.t, max_gap }),
            }
        })
        .collect()
}

pub fn ellipse_distance(dx: f64, dy: f64, cfg: &EvalConfig) -> f64 {
    ((dx / cfg.semi_major).powi(2) + (dy / cfg.semi_minor).powi(2)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Association {
    pub t: f64,
    pub gt_id: u64,
    pub twin_id: u64,
    /// Ground-truth position.
    pub x: f64,
    pub y: f64,
    /// Twin minus ground truth along the driving direction (m).
    pub dx: f64,
    /// Twin minus ground truth across lanes, left positive (m).
    pub dy: f64,
    pub distance: f64,
}

impl Association {
    pub fn planar_error(&self) -> f64 {
        self.dx.hypot(self.dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtRef {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameAssociation {
    pub t: f64,
    pub associations: Vec<Association>,
    pub unmatched_gt: Vec<GtRef>,
    /// Unmatched twin objects inside the region: the false positives.
    pub unmatched_twin: Vec<u64>,
}

/// Matches one aligned frame.
pub fn gate_and_associate(gt: &GroundTruthFrame, twin: &TwinFrame, cfg: &EvalConfig) -> Result<FrameAssociation, EvalError> {
    let [x0, x1] = cfg.region;
    let objects: Vec<&TwinObject> = twin
        .objects
        .iter()
        .filter(|o| o.x >= x0 - cfg.semi_major && o.x <= x1 + cfg.semi_major)
        .collect();
    let errors = |g: &crate::scenario::VehicleState, o: &TwinObject| {
        let s = if g.heading().cos() >= 0.0 { 1.0 } else { -1.0 };
        (s * (o.x - g.x), s * (o.y - g.y))
    };
    let n = gt.vehicles.len();
    let m = objects.len();
    let raw = DMatrix::from_fn(n, m, |i, j| {
        let (dx, dy) = errors(&gt.vehicles[i], objects[j]);
        ellipse_distance(dx, dy, cfg)
    });
    // out-of-gate pairs cost more than any full set of in-gate pairs
    let sentinel = 2.0 * (n.min(m) as f64 + 1.0);
    let cost = raw.map(|d| if d <= 1.0 { d } else { sentinel });
    let pairs = solve(&cost)?.pairs;

    let mut out = FrameAssociation {
        t: gt.t,
        ..Default::default()
    };
    let mut gt_used = vec![false; n];
    let mut twin_used = vec![false; m];
    for (i, j) in pairs {
        if raw[(i, j)] > 1.0 {
            continue;
        }
        gt_used[i] = true;
        twin_used[j] = true;
        let g = &gt.vehicles[i];
        let (dx, dy) = errors(g, objects[j]);
        out.associations.push(Association {
            t: gt.t,
            gt_id: g.id,
            twin_id: objects[j].gid,
            x: g.x,
            y: g.y,
            dx,
            dy,
            distance: raw[(i, j)],
        });
    }
    out.unmatched_gt = gt
        .vehicles
        .iter()
        .zip(&gt_used)
        .filter(|(_, u)| !**u)
        .map(|(g, _)| GtRef { id: g.id, x: g.x, y: g.y })
        .collect();
    out.unmatched_twin = objects
        .iter()
        .zip(&twin_used)
        .filter(|(o, u)| !**u && o.x >= x0 && o.x <= x1)
        .map(|(o, _)| o.gid)
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub x_index: i64,
    pub y_index: i64,
    pub mean_error: f64,
    pub count: usize,
}

/// Mean planar error per square cell, keyed by ground-truth position.
pub fn error_map(associations: &[Association], cell_size: f64) -> Vec<GridCell> {
    let mut cells: BTreeMap<(i64, i64), (f64, usize)> = BTreeMap::new();
    for a in associations {
        let key = ((a.x / cell_size).floor() as i64, (a.y / cell_size).floor() as i64);
        let e = cells.entry(key).or_default();
        e.0 += a.planar_error();
        e.1 += 1;
    }
    cells
        .into_iter()
        .map(|((x_index, y_index), (sum, count))| GridCell {
            x_index,
            y_index,
            mean_error: sum / count as f64,
            count,
        })
        .collect()
}

/// Nearest-rank percentile of an ascending slice, `p` in (0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frames: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse_x: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rmse_y: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p95: Option<f64>,
    pub boundary_band: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall_excluding_boundary: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_abs_dt: Option<f64>,
    pub error_grid: Vec<GridCell>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Aggregates per-frame matches. `dts` are the alignment offsets, if known.
pub fn compute_metrics(frames: &[FrameAssociation], dts: &[f64], cfg: &EvalConfig) -> MetricsReport {
    let assoc: Vec<Association> = frames.iter().flat_map(|f| f.associations.iter().copied()).collect();
    let tp = assoc.len();
    let fp: usize = frames.iter().map(|f| f.unmatched_twin.len()).sum();
    let fn_: usize = frames.iter().map(|f| f.unmatched_gt.len()).sum();
    let mean = |f: &dyn Fn(&Association) -> f64| (tp > 0).then(|| assoc.iter().map(f).sum::<f64>() / tp as f64);
    let mse_x = mean(&|a| a.dx * a.dx);
    let mse_y = mean(&|a| a.dy * a.dy);

    let mut abs: Vec<f64> = assoc.iter().map(|a| a.planar_error()).collect();
    abs.sort_by(f64::total_cmp);

    let [x0, x1] = cfg.region;
    let interior = |x: f64| x >= x0 + cfg.boundary_band && x <= x1 - cfg.boundary_band;
    let tp_in = assoc.iter().filter(|a| interior(a.x)).count();
    let fn_in: usize = frames
        .iter()
        .map(|f| f.unmatched_gt.iter().filter(|g| interior(g.x)).count())
        .sum();

    MetricsReport {
        frames: frames.len(),
        tp,
        fp,
        fn_,
        rmse: mse_x.zip(mse_y).map(|(a, b)| (a + b).sqrt()),
        rmse_x: mse_x.map(f64::sqrt),
        rmse_y: mse_y.map(f64::sqrt),
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        p50: percentile(&abs, 0.5),
        p95: percentile(&abs, 0.95),
        boundary_band: cfg.boundary_band,
        recall_excluding_boundary: if cfg.boundary_band > 0.0 { ratio(tp_in, tp_in + fn_in) } else { None },
        mean_abs_dt: (!dts.is_empty()).then(|| dts.iter().map(|d| d.abs()).sum::<f64>() / dts.len() as f64),
        error_grid: error_map(&assoc, cfg.cell_size),
    }
}

/// Full evaluation: align, associate every frame, aggregate.
pub fn evaluate(gt: &[GroundTruthFrame], twin: &[TwinFrame], max_gap: f64, cfg: &EvalConfig) -> Result<MetricsReport, EvalError> {
    cfg.validate()?;
    let aligned = align_frames(gt, twin, max_gap)?;
    let frames = aligned
        .iter()
        .map(|a| gate_and_associate(&a.gt, &a.twin, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let dts: Vec<f64> = aligned.iter().map(|a| a.dt).collect();
    Ok(compute_metrics(&frames, &dts, cfg))
}


#[cfg(test)]
mod properties {
    use super::*;
    use crate::scenario::VehicleState;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn vehicle(id: u64, x: f64, y: f64, vx: f64) -> VehicleState {
        VehicleState {
            id,
            class: VehicleClass::Car,
            x,
            y,
            vx,
            vy: 0.0,
            length: 4.6,
            width: 1.8,
            height: 1.5,
        }
    }

    fn scene() -> impl Strategy<Value = (Vec<(f64, f64, bool)>, Vec<(f64, f64)>)> {
        (
            prop::collection::vec((0.0..440.0f64, -10.0..10.0f64, any::<bool>()), 0..12),
            prop::collection::vec((-20.0..460.0f64, -10.0..10.0f64), 0..12),
        )
    }

    proptest! {
        #[test]
        fn matching_is_a_gated_maximal_one_to_one((gts, objs) in scene()) {
            let cfg = EvalConfig::default();
            let gt = GroundTruthFrame {
                t: 0.0,
                vehicles: gts.iter().enumerate().map(|(i, (x, y, fwd))| vehicle(i as u64, *x, *y, if *fwd { 30.0 } else { -30.0 })).collect(),
            };
            let twin = TwinFrame {
                t: 0.0,
                objects: objs.iter().enumerate().map(|(j, (x, y))| TwinObject { gid: 100 + j as u64, x: *x, y: *y, vx: 0.0, vy: 0.0, class: None }).collect(),
            };
            let f = gate_and_associate(&gt, &twin, &cfg).unwrap();
            prop_assert_eq!(f.associations.len() + f.unmatched_gt.len(), gt.vehicles.len());
            let gt_ids: BTreeSet<u64> = f.associations.iter().map(|a| a.gt_id).collect();
            let twin_ids: BTreeSet<u64> = f.associations.iter().map(|a| a.twin_id).collect();
            prop_assert_eq!(gt_ids.len(), f.associations.len());
            prop_assert_eq!(twin_ids.len(), f.associations.len());
            prop_assert!(f.associations.iter().all(|a| a.distance <= 1.0));
            prop_assert!(f.unmatched_twin.iter().all(|g| !twin_ids.contains(g)));

            // no free pair could still be added inside the gate
            for g in &f.unmatched_gt {
                let v = gt.vehicles.iter().find(|v| v.id == g.id).unwrap();
                let s = v.vx.signum();
                for o in twin.objects.iter().filter(|o| !twin_ids.contains(&o.gid)) {
                    prop_assert!(ellipse_distance(s * (o.x - v.x), s * (o.y - v.y), &cfg) > 1.0);
                }
            }

            let m = compute_metrics(&[f], &[], &cfg);
            for r in [m.precision, m.recall].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&r));
            }
            if let (Some(p50), Some(p95)) = (m.p50, m.p95) {
                prop_assert!(p50 <= p95);
            }
        }

        #[test]
        fn exact_copy_scores_perfectly((gts, _) in scene()) {
            let cfg = EvalConfig::default();
            let gt = GroundTruthFrame {
                t: 0.0,
                vehicles: gts.iter().enumerate().map(|(i, (x, y, _))| vehicle(i as u64, *x, *y, 30.0)).collect(),
            };
            let twin = TwinFrame {
                t: 0.0,
                objects: gt.vehicles.iter().map(|v| TwinObject { gid: v.id, x: v.x, y: v.y, vx: v.vx, vy: 0.0, class: None }).collect(),
            };
            let m = evaluate(&[gt.clone()], &[twin], 0.5, &cfg).unwrap();
            prop_assert_eq!(m.fp, 0);
            prop_assert_eq!(m.tp, gt.vehicles.len());
            if m.tp > 0 {
                prop_assert_eq!(m.rmse, Some(0.0));
            }
        }
    }
}
