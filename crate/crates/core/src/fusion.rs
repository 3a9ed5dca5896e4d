//! Two-level track fusion.
//!
//! Confirmed per-sensor tracks of one measurement point (MP) are folded
//! into tracklets; the backend then folds the tracklets of all MPs and
//! keeps a table of globally identified tracks, the digital twin.
//! Every combination step is covariance intersection, which stays
//! consistent under unknown cross-correlation between the inputs.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, Matrix2, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{gated_assignment, AssignmentError};
use crate::scenario::VehicleClass;
use crate::tracker::{majority, predict_gaussian, StateCovariance, StateVector, Track, TrackStatus};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("covariance is not positive definite")]
    NonPositiveDefinite,
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error("tick at t={t} does not follow t={previous}")]
    OutOfOrder { previous: f64, t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian<const D: usize> {
    pub mean: SVector<f64, D>,
    pub cov: SMatrix<f64, D, D>,
}

impl<const D: usize> Gaussian<D> {
    pub fn new(mean: SVector<f64, D>, cov: SMatrix<f64, D, D>) -> Self {
        Self { mean, cov }
    }
}

fn spd_inverse<const D: usize>(m: &SMatrix<f64, D, D>) -> Result<SMatrix<f64, D, D>, FusionError> {
    m.cholesky().map(|c| c.inverse()).ok_or(FusionError::NonPositiveDefinite)
}

fn symmetrize<const D: usize>(m: SMatrix<f64, D, D>) -> SMatrix<f64, D, D> {
    (m + m.transpose()) * 0.5
}

/// Covariance intersection of two Gaussians with weight `omega` on `a`.
pub fn gci_fuse<const D: usize>(a: &Gaussian<D>, b: &Gaussian<D>, omega: f64) -> Result<Gaussian<D>, FusionError> {
    let ia = spd_inverse(&a.cov)?;
    let ib = spd_inverse(&b.cov)?;
    if omega >= 1.0 {
        return Ok(*a);
    }
    if omega <= 0.0 {
        return Ok(*b);
    }
    let info = symmetrize(ia * omega + ib * (1.0 - omega));
    let chol = info.cholesky().ok_or(FusionError::NonPositiveDefinite)?;
    let vec = ia * a.mean * omega + ib * b.mean * (1.0 - omega);
    Ok(Gaussian {
        mean: chol.solve(&vec),
        cov: symmetrize(chol.inverse()),
    })
}

/// Fused information matrix `ω A⁻¹ + (1-ω) B⁻¹`.
pub fn fused_information<const D: usize>(
    a: &SMatrix<f64, D, D>,
    b: &SMatrix<f64, D, D>,
    omega: f64,
) -> Result<SMatrix<f64, D, D>, FusionError> {
    Ok(spd_inverse(a)? * omega + spd_inverse(b)? * (1.0 - omega))
}

/// ω in [0, 1] minimizing the fused determinant. The log-determinant of
/// the fused information matrix is concave in ω, so a golden-section
/// search plus the two endpoints finds the global optimum. Returns 0.5
/// when the objective is flat.
pub fn optimize_omega<const D: usize>(a: &SMatrix<f64, D, D>, b: &SMatrix<f64, D, D>) -> f64 {
    let (Ok(ia), Ok(ib)) = (spd_inverse(a), spd_inverse(b)) else {
        return 0.5;
    };
    // minimizing det(P_f) is maximizing log det of the information
    let cost = |w: f64| -> f64 {
        let info = ia * w + ib * (1.0 - w);
        match info.cholesky() {
            Some(c) => -2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            None => f64::INFINITY,
        }
    };
    let (f0, fh, f1) = (cost(0.0), cost(0.5), cost(1.0));
    let scale = f0.abs().max(f1.abs()).max(1.0);
    if (f0 - fh).abs() <= 1e-12 * scale && (f1 - fh).abs() <= 1e-12 * scale {
        return 0.5;
    }
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut c1, mut c2) = (cost(x1), cost(x2));
    while hi - lo > 1e-10 {
        if c1 <= c2 {
            hi = x2;
            x2 = x1;
            c2 = c1;
            x1 = hi - g * (hi - lo);
            c1 = cost(x1);
        } else {
            lo = x1;
            x1 = x2;
            c1 = c2;
            x2 = lo + g * (hi - lo);
            c2 = cost(x2);
        }
    }
    let mid = 0.5 * (lo + hi);
    let mut best = (mid, cost(mid));
    for (w, c) in [(0.0, f0), (1.0, f1)] {
        if c < best.1 {
            best = (w, c);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OmegaPolicy {
    Fixed,
    MinimizeDeterminant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Mahalanobis² gate on the position block.
    pub gate: f64,
    pub omega_policy: OmegaPolicy,
    /// Consecutive ticks an unmatched candidate must persist before it
    /// opens a new global id.
    pub handover_persistence: u32,
    /// Extra standard deviation (m) along the road axis added to the
    /// association covariance. Cameras locate the edge of a vehicle that
    /// faces them while radars see its center, so estimates of one
    /// vehicle can sit up to a vehicle length apart along the road.
    pub longitudinal_slack: f64,
    /// Typical vehicle length (m) per class: car, truck, bus, motorcycle.
    /// When either estimate carries a class, the slack is half the longer
    /// of the two lengths instead of `longitudinal_slack`.
    pub class_lengths: [f64; 4],
    /// Extra standard deviation (m) across the road per class. Boxes of
    /// tall vehicles seen obliquely place the camera anchor off-center.
    pub class_lateral_slack: [f64; 4],
    /// Unmatched global tracks are dropped after this many ticks.
    pub coast_ticks: u32,
    /// Process noise used to predict the global table between ticks.
    pub sigma_accel: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gate: 9.21,
            omega_policy: OmegaPolicy::MinimizeDeterminant,
            handover_persistence: 1,
            longitudinal_slack: 3.0,
            class_lengths: [4.6, 9.5, 12.0, 2.2],
            class_lateral_slack: [0.3, 0.8, 0.8, 0.3],
            coast_ticks: 8,
            sigma_accel: 2.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(self.gate > 0.0) {
            return Err(FusionError::InvalidConfig("gate must be positive".into()));
        }
        if self.handover_persistence == 0 || self.coast_ticks == 0 {
            return Err(FusionError::InvalidConfig(
                "handover_persistence and coast_ticks must be at least 1".into(),
            ));
        }
        if !(self.longitudinal_slack >= 0.0 && self.sigma_accel >= 0.0 && self.class_lengths.iter().chain(&self.class_lateral_slack).all(|l| *l >= 0.0)) {
            return Err(FusionError::InvalidConfig("slack and sigma_accel must be non-negative".into()));
        }
        Ok(())
    }

    /// Longitudinal and lateral slack for a pair of estimates.
    pub fn pair_slack(&self, a: Option<VehicleClass>, b: Option<VehicleClass>) -> (f64, f64) {
        let pick = |table: &[f64; 4]| {
            a.into_iter()
                .chain(b)
                .map(|c| table[c.index()])
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
        };
        match (pick(&self.class_lengths), pick(&self.class_lateral_slack)) {
            (Some(len), Some(lat)) => (0.5 * len, lat),
            _ => (self.longitudinal_slack, 0.0),
        }
    }

    /// Gated position distance with the class-dependent slack.
    pub fn distance<A: PositionEstimate, B: PositionEstimate>(&self, a: &A, b: &B) -> f64 {
        let (long, lat) = self.pair_slack(a.class(), b.class());
        slack_distance(a, b, long, lat)
    }

    fn omega(&self, a: &StateCovariance, b: &StateCovariance) -> f64 {
        match self.omega_policy {
            OmegaPolicy::Fixed => 0.5,
            OmegaPolicy::MinimizeDeterminant => optimize_omega(a, b),
        }
    }

    fn fuse(&self, a: &Gaussian<4>, b: &Gaussian<4>) -> Result<Gaussian<4>, FusionError> {
        gci_fuse(a, b, self.omega(&a.cov, &b.cov))
    }
}

/// Locally fused track of one measurement point.
#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub mp_id: String,
    /// Label of the first contributing sensor track.
    pub label: u64,
    pub state: StateVector,
    pub cov: StateCovariance,
    pub status: TrackStatus,
    /// One vote per contributing sensor track.
    pub class_votes: [u32; 4],
    pub sensors: Vec<String>,
    /// MPs merged into this estimate; just `mp_id` below the backend.
    pub mps: Vec<String>,
}

impl Tracklet {
    pub fn class(&self) -> Option<VehicleClass> {
        majority(&self.class_votes)
    }

    fn gaussian(&self) -> Gaussian<4> {
        Gaussian::new(self.state, self.cov)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedTrack {
    pub gid: u64,
    pub state: StateVector,
    pub cov: StateCovariance,
    pub class: Option<VehicleClass>,
    pub class_votes: [u32; 4],
    pub contributors: BTreeSet<String>,
    pub last_update: f64,
    /// Consecutive ticks without a matching candidate.
    pub misses: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigitalTwinFrame {
    pub t: f64,
    pub tracks: Vec<FusedTrack>,
}

/// Something with a planar position estimate.
pub trait PositionEstimate {
    fn position(&self) -> [f64; 2];
    fn position_cov(&self) -> Matrix2<f64>;
    fn class(&self) -> Option<VehicleClass>;
}

impl PositionEstimate for Tracklet {
    fn position(&self) -> [f64; 2] {
        [self.state[0], self.state[1]]
    }
    fn position_cov(&self) -> Matrix2<f64> {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned()
    }
    fn class(&self) -> Option<VehicleClass> {
        Tracklet::class(self)
    }
}

impl PositionEstimate for Track {
    fn position(&self) -> [f64; 2] {
        [self.state[0], self.state[1]]
    }
    fn position_cov(&self) -> Matrix2<f64> {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned()
    }
    fn class(&self) -> Option<VehicleClass> {
        Track::class(self)
    }
}

impl PositionEstimate for FusedTrack {
    fn position(&self) -> [f64; 2] {
        [self.state[0], self.state[1]]
    }
    fn position_cov(&self) -> Matrix2<f64> {
        self.cov.fixed_view::<2, 2>(0, 0).into_owned()
    }
    fn class(&self) -> Option<VehicleClass> {
        self.class
    }
}

/// Position-block Mahalanobis² between two estimates, with `slack` (m)
/// of extra spread along x.
pub fn position_distance<A: PositionEstimate, B: PositionEstimate>(a: &A, b: &B, slack: f64) -> f64 {
    slack_distance(a, b, slack, 0.0)
}

fn slack_distance<A: PositionEstimate, B: PositionEstimate>(a: &A, b: &B, long: f64, lat: f64) -> f64 {
    let (pa, pb) = (a.position(), b.position());
    let d = nalgebra::Vector2::new(pa[0] - pb[0], pa[1] - pb[1]);
    let mut s = a.position_cov() + b.position_cov();
    s[(0, 0)] += long * long;
    s[(1, 1)] += lat * lat;
    match s.cholesky() {
        Some(c) => d.dot(&c.solve(&d)),
        None => f64::INFINITY,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AssociationResult {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_a: Vec<usize>,
    pub unmatched_b: Vec<usize>,
}

/// Optimal one-to-one association on position Mahalanobis², rejecting
/// pairs beyond `gate`.
pub fn associate_tracks<A: PositionEstimate, B: PositionEstimate>(
    a: &[A],
    b: &[B],
    gate: f64,
    slack: f64,
) -> Result<AssociationResult, FusionError> {
    associate_by(a, b, gate, |x, y| position_distance(x, y, slack))
}

/// [`associate_tracks`] with the config's class-dependent slack.
pub fn associate_with<A: PositionEstimate, B: PositionEstimate>(
    a: &[A],
    b: &[B],
    cfg: &FusionConfig,
) -> Result<AssociationResult, FusionError> {
    associate_by(a, b, cfg.gate, |x, y| cfg.distance(x, y))
}

fn associate_by<A, B>(a: &[A], b: &[B], gate: f64, dist: impl Fn(&A, &B) -> f64) -> Result<AssociationResult, FusionError> {
    let cost = DMatrix::from_fn(a.len(), b.len(), |i, j| dist(&a[i], &b[j]));
    let pairs = gated_assignment(&cost, gate)?;
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    for &(i, j) in &pairs {
        used_a[i] = true;
        used_b[j] = true;
    }
    Ok(AssociationResult {
        pairs,
        unmatched_a: (0..a.len()).filter(|&i| !used_a[i]).collect(),
        unmatched_b: (0..b.len()).filter(|&j| !used_b[j]).collect(),
    })
}

/// Constant-velocity extrapolation of a state by `dt` (either sign).
pub fn extrapolate(state: &StateVector, cov: &StateCovariance, dt: f64, sigma_accel: f64) -> (StateVector, StateCovariance) {
    if dt == 0.0 {
        return (*state, *cov);
    }
    predict_gaussian(state, cov, dt, if dt > 0.0 { sigma_accel } else { 0.0 })
}

/// Folds `incoming` into `acc`: associated pairs are fused, everything
/// else passes through. `acc` keeps its order; new entries are appended.
fn fold(acc: Vec<Tracklet>, incoming: Vec<Tracklet>, cfg: &FusionConfig) -> Result<Vec<Tracklet>, FusionError> {
    if acc.is_empty() {
        return Ok(incoming);
    }
    let assoc = associate_with(&acc, &incoming, cfg)?;
    let mut out = acc;
    for &(i, j) in &assoc.pairs {
        let b = &incoming[j];
        let fused = cfg.fuse(&out[i].gaussian(), &b.gaussian())?;
        let a = &mut out[i];
        a.state = fused.mean;
        a.cov = fused.cov;
        for k in 0..4 {
            a.class_votes[k] += b.class_votes[k];
        }
        for s in &b.sensors {
            if !a.sensors.contains(s) {
                a.sensors.push(s.clone());
            }
        }
        for m in &b.mps {
            if !a.mps.contains(m) {
                a.mps.push(m.clone());
            }
        }
    }
    out.extend(assoc.unmatched_b.into_iter().map(|j| incoming[j].clone()));
    Ok(out)
}

/// Confirmed tracks of one sensor, valid at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTracks {
    pub sensor_id: String,
    pub t: f64,
    pub tracks: Vec<Track>,
}

/// Fuses the per-sensor tracks of one MP into tracklets at time `t`,
/// folding sensors in ascending id order.
pub fn fuse_measurement_point(
    mp_id: &str,
    inputs: &[SensorTracks],
    t: f64,
    cfg: &FusionConfig,
) -> Result<Vec<Tracklet>, FusionError> {
    let mut ordered: Vec<&SensorTracks> = inputs.iter().collect();
    ordered.sort_by(|a, b| a.sensor_id.cmp(&b.sensor_id));
    let mut acc = Vec::new();
    for s in ordered {
        let incoming = s
            .tracks
            .iter()
            .filter(|tr| tr.status == TrackStatus::Confirmed)
            .map(|tr| {
                let (state, cov) = extrapolate(&tr.state, &tr.cov, t - s.t, cfg.sigma_accel);
                let mut votes = [0; 4];
                if let Some(c) = tr.class() {
                    votes[c.index()] = 1;
                }
                Tracklet {
                    mp_id: mp_id.to_string(),
                    label: tr.label,
                    state,
                    cov,
                    status: TrackStatus::Confirmed,
                    class_votes: votes,
                    sensors: vec![s.sensor_id.clone()],
                    mps: vec![mp_id.to_string()],
                }
            })
            .collect();
        acc = fold(acc, incoming, cfg)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone)]
struct Pending {
    tracklet: Tracklet,
    count: u32,
}

/// Backend fusion of all MPs into the globally identified twin.
#[derive(Debug, Clone)]
pub struct Backend {
    cfg: FusionConfig,
    table: Vec<FusedTrack>,
    pending: Vec<Pending>,
    next_gid: u64,
    last_t: Option<f64>,
}

impl Backend {
    pub fn new(cfg: FusionConfig) -> Result<Self, FusionError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            table: Vec::new(),
            pending: Vec::new(),
            next_gid: 1,
            last_t: None,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    pub fn table(&self) -> &[FusedTrack] {
        &self.table
    }

    /// Consumes one tick of tracklets (one batch per MP, in MP id order)
    /// and returns the twin frame at `t`.
    pub fn step(&mut self, t: f64, batches: &[Vec<Tracklet>]) -> Result<DigitalTwinFrame, FusionError> {
        let cfg = self.cfg.clone();
        let dt = match self.last_t {
            Some(prev) if t <= prev => return Err(FusionError::OutOfOrder { previous: prev, t }),
            Some(prev) => t - prev,
            None => 0.0,
        };
        self.last_t = Some(t);
        for tr in &mut self.table {
            (tr.state, tr.cov) = extrapolate(&tr.state, &tr.cov, dt, cfg.sigma_accel);
        }
        for p in &mut self.pending {
            let tl = &mut p.tracklet;
            (tl.state, tl.cov) = extrapolate(&tl.state, &tl.cov, dt, cfg.sigma_accel);
        }

        let mut candidates = Vec::new();
        for batch in batches {
            candidates = fold(candidates, batch.clone(), &cfg)?;
        }

        let assoc = associate_with(&self.table, &candidates, &cfg)?;
        for &(i, j) in &assoc.pairs {
            let c = &candidates[j];
            let tr = &mut self.table[i];
            let fused = cfg.fuse(&Gaussian::new(tr.state, tr.cov), &c.gaussian())?;
            tr.state = fused.mean;
            tr.cov = fused.cov;
            absorb(tr, c, t);
        }
        for &i in &assoc.unmatched_a {
            self.table[i].misses += 1;
        }
        // a coasting track overlapping a refreshed one is a stale duplicate
        let live: Vec<FusedTrack> = self.table.iter().filter(|tr| tr.misses == 0).cloned().collect();
        self.table.retain(|tr| {
            tr.misses < cfg.coast_ticks
                && (tr.misses == 0
                    || !live.iter().any(|l| {
                        l.state[2] * tr.state[2] > 0.0
                            && cfg.distance(l, tr) <= cfg.gate
                    }))
        });

        // a leftover that still gates with a table track is a duplicate view
        // of a vehicle already in the twin, not a new one
        let table = &self.table;
        let fresh: Vec<Tracklet> = assoc
            .unmatched_b
            .iter()
            .map(|&j| &candidates[j])
            .filter(|c| {
                !table
                    .iter()
                    .any(|tr| cfg.distance(tr, *c) <= cfg.gate)
            })
            .cloned()
            .collect();
        let pend: Vec<Tracklet> = self.pending.iter().map(|p| p.tracklet.clone()).collect();
        let passoc = associate_with(&pend, &fresh, &cfg)?;
        let mut next_pending = Vec::new();
        for &(i, j) in &passoc.pairs {
            next_pending.push(Pending {
                tracklet: fresh[j].clone(),
                count: self.pending[i].count + 1,
            });
        }
        for &j in &passoc.unmatched_b {
            next_pending.push(Pending {
                tracklet: fresh[j].clone(),
                count: 1,
            });
        }
        // pendings not refreshed this tick are dropped
        self.pending.clear();
        for p in next_pending {
            if p.count >= cfg.handover_persistence {
                let mut tr = FusedTrack {
                    gid: self.next_gid,
                    state: p.tracklet.state,
                    cov: p.tracklet.cov,
                    class: None,
                    class_votes: [0; 4],
                    contributors: BTreeSet::new(),
                    last_update: t,
                    misses: 0,
                };
                self.next_gid += 1;
                absorb(&mut tr, &p.tracklet, t);
                self.table.push(tr);
            } else {
                self.pending.push(p);
            }
        }

        Ok(DigitalTwinFrame {
            t,
            tracks: self.table.clone(),
        })
    }
}

fn absorb(tr: &mut FusedTrack, c: &Tracklet, t: f64) {
    for k in 0..4 {
        tr.class_votes[k] += c.class_votes[k];
    }
    tr.class = majority(&tr.class_votes);
    tr.contributors.insert(c.mp_id.clone());
    tr.contributors.extend(c.mps.iter().cloned());
    tr.last_update = t;
    tr.misses = 0;
}
