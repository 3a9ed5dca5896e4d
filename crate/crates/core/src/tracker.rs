//! Per-sensor Gaussian-mixture PHD tracker.
//!
//! The belief state is an intensity: a weighted mixture of labeled
//! Gaussians over `(x, y, vx, vy)`. Each frame runs
//!
//! 1. constant-velocity prediction,
//! 2. the GM-PHD measurement update (missed-detection copies plus one
//!    Kalman-updated child per component and measurement),
//! 3. measurement-driven birth from two consecutive unexplained detections,
//! 4. pruning and moment-preserving merging,
//! 5. track management on the component labels.
//!
//! Labels are inherited by every child of a component, so the mixture
//! forms a tree per label and tracks are read off per label.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix4, SMatrix, SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::VehicleClass;
use crate::sensing::{Measurement, MeasurementFrame, SensorKind};

pub type StateVector = Vector4<f64>;
pub type StateCovariance = Matrix4<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackerError {
    #[error("innovation covariance is not positive definite (label {label})")]
    NonPositiveDefinite { label: u64 },
    #[error("frame at t={t} does not follow the previous frame at t={previous}")]
    OutOfOrder { previous: f64, t: f64 },
    #[error("{0:?} frame given to a tracker configured for {1:?} measurements")]
    WrongKind(SensorKind, SensorKind),
    #[error("radar measurement without velocity")]
    MissingVelocity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub p_survival: f64,
    pub p_detect: f64,
    /// Clutter intensity κ (1/m²), uniform over the surveillance area.
    pub clutter_density: f64,
    /// White-noise acceleration spectral density per axis (m/s²).
    pub sigma_accel: f64,
    pub prune_threshold: f64,
    /// Mahalanobis² merge radius.
    pub merge_threshold: f64,
    pub max_components: usize,
    pub extract_threshold: f64,
    pub birth_weight: f64,
    /// Variance of the birth velocity per axis ((m/s)²).
    pub birth_velocity_var: f64,
    /// Consecutive unsupported frames after which a track is dropped.
    pub miss_limit: u32,
    /// Consecutive supported frames needed to confirm a track.
    pub confirm_length: u32,
    /// Measurement/component pairs beyond this Mahalanobis² get zero likelihood.
    pub update_gate: f64,
    /// A measurement within this Mahalanobis² of a component is explained
    /// and does not seed a birth.
    pub birth_gate: f64,
    /// Components lighter than this do not explain measurements.
    pub explain_weight: f64,
    /// Largest plausible speed; bounds the two-detection birth gate (m/s).
    pub max_speed: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            p_survival: 0.99,
            p_detect: 0.97,
            clutter_density: 1e-5,
            sigma_accel: 2.0,
            prune_threshold: 1e-5,
            merge_threshold: 4.0,
            max_components: 300,
            extract_threshold: 0.5,
            birth_weight: 0.25,
            birth_velocity_var: 100.0,
            miss_limit: 3,
            confirm_length: 2,
            update_gate: 50.0,
            birth_gate: 16.0,
            explain_weight: 0.01,
            max_speed: 50.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |p: f64| p > 0.0 && p <= 1.0;
        if !unit(self.p_survival) || !unit(self.p_detect) {
            return Err("p_survival and p_detect must lie in (0, 1]".into());
        }
        let positive = [
            self.prune_threshold,
            self.merge_threshold,
            self.extract_threshold,
            self.birth_weight,
            self.birth_velocity_var,
            self.update_gate,
            self.birth_gate,
            self.max_speed,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err("tracker thresholds must be positive".into());
        }
        if !(self.clutter_density >= 0.0 && self.sigma_accel >= 0.0 && self.explain_weight >= 0.0) {
            return Err("clutter density, process noise and explain weight must be non-negative".into());
        }
        if self.max_components == 0 || self.confirm_length == 0 || self.miss_limit == 0 {
            return Err("component cap, confirm length and miss limit must be at least 1".into());
        }
        Ok(())
    }
}

/// One weighted, labeled term of the intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: StateVector,
    pub cov: StateCovariance,
    pub label: u64,
    /// Frames since birth.
    pub age: u32,
    /// Class of the measurement that last updated this component.
    pub class: Option<VehicleClass>,
    /// Updated by a measurement in the current frame (births count).
    pub detected: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Intensity {
    pub components: Vec<GaussianComponent>,
    pub t: f64,
}

impl Intensity {
    pub fn new(t: f64) -> Self {
        Self {
            components: Vec::new(),
            t,
        }
    }

    /// Expected number of targets.
    pub fn total_weight(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

fn symmetrize<const N: usize>(m: &SMatrix<f64, N, N>) -> SMatrix<f64, N, N> {
    (m + m.transpose()) * 0.5
}

/// Constant-velocity transition for step `dt`.
pub fn transition_matrix(dt: f64) -> StateCovariance {
    let mut f = StateCovariance::identity();
    f[(0, 2)] = dt;
    f[(1, 3)] = dt;
    f
}

/// Discrete white-noise-acceleration covariance scaled by `sigma_accel²`.
pub fn process_noise(dt: f64, sigma_accel: f64) -> StateCovariance {
    let q = sigma_accel * sigma_accel;
    let (a, b, c) = (dt.powi(4) / 4.0 * q, dt.powi(3) / 2.0 * q, dt * dt * q);
    let mut m = StateCovariance::zeros();
    for (p, v) in [(0, 2), (1, 3)] {
        m[(p, p)] = a;
        m[(p, v)] = b;
        m[(v, p)] = b;
        m[(v, v)] = c;
    }
    m
}

/// Propagates one Gaussian through the constant-velocity model.
pub fn predict_gaussian(mean: &StateVector, cov: &StateCovariance, dt: f64, sigma_accel: f64) -> (StateVector, StateCovariance) {
    let f = transition_matrix(dt);
    (f * mean, symmetrize(&(f * cov * f.transpose() + process_noise(dt, sigma_accel))))
}

/// Survival-weighted constant-velocity prediction of every component.
pub fn predict(intensity: &Intensity, dt: f64, cfg: &TrackerConfig) -> Intensity {
    assert!(dt > 0.0, "predict requires dt > 0");
    let f = transition_matrix(dt);
    let ft = f.transpose();
    let q = process_noise(dt, cfg.sigma_accel);
    Intensity {
        t: intensity.t + dt,
        components: intensity
            .components
            .iter()
            .map(|c| GaussianComponent {
                weight: cfg.p_survival * c.weight,
                mean: f * c.mean,
                cov: symmetrize(&(f * c.cov * ft + q)),
                label: c.label,
                age: c.age.saturating_add(1),
                class: c.class,
                detected: false,
            })
            .collect(),
    }
}

/// Linear-Gaussian measurement model with `M` measured quantities.
pub trait ObservationModel<const M: usize> {
    fn matrix(&self) -> SMatrix<f64, M, 4>;
    /// Measurement noise for a target near `state`.
    fn noise(&self, state: &StateVector) -> SMatrix<f64, M, M>;
}

/// Position-only noise whose spread follows the geometry of a camera
/// looking at the road: range error grows with the square of distance,
/// cross-range error linearly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeNoise {
    pub origin: [f64; 2],
    pub height: f64,
    pub focal_px: f64,
    pub sigma_px: f64,
    pub floor_range: f64,
    pub floor_cross: f64,
}

impl RangeNoise {
    pub fn covariance(&self, x: f64, y: f64) -> Matrix2<f64> {
        let d = Vector2::new(x - self.origin[0], y - self.origin[1]);
        let r = d.norm().max(1.0);
        let e_r = if d.norm() > 1e-9 { d / d.norm() } else { Vector2::x() };
        let e_c = Vector2::new(-e_r.y, e_r.x);
        let s_r = self.sigma_px * r * r / (self.height * self.focal_px);
        let s_c = self.sigma_px * r / self.focal_px;
        let var_r = self.floor_range.powi(2) + s_r * s_r;
        let var_c = self.floor_cross.powi(2) + s_c * s_c;
        e_r * e_r.transpose() * var_r + e_c * e_c.transpose() * var_c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PositionNoise {
    Constant([[f64; 2]; 2]),
    Range(RangeNoise),
}

/// Observes `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionModel {
    pub noise: PositionNoise,
}

impl PositionModel {
    pub fn constant(r: Matrix2<f64>) -> Self {
        Self {
            noise: PositionNoise::Constant([[r[(0, 0)], r[(0, 1)]], [r[(1, 0)], r[(1, 1)]]]),
        }
    }
}

impl ObservationModel<2> for PositionModel {
    fn matrix(&self) -> SMatrix<f64, 2, 4> {
        SMatrix::<f64, 2, 4>::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    }

    fn noise(&self, state: &StateVector) -> Matrix2<f64> {
        match &self.noise {
            PositionNoise::Constant(r) => Matrix2::new(r[0][0], r[0][1], r[1][0], r[1][1]),
            PositionNoise::Range(n) => n.covariance(state[0], state[1]),
        }
    }
}

/// Observes the full state `(x, y, vx, vy)` with independent noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionVelocityModel {
    pub sigma_pos: f64,
    pub sigma_vel: f64,
}

impl ObservationModel<4> for PositionVelocityModel {
    fn matrix(&self) -> SMatrix<f64, 4, 4> {
        SMatrix::<f64, 4, 4>::identity()
    }

    fn noise(&self, _state: &StateVector) -> Matrix4<f64> {
        let p = self.sigma_pos * self.sigma_pos;
        let v = self.sigma_vel * self.sigma_vel;
        Matrix4::from_diagonal(&Vector4::new(p, p, v, v))
    }
}

/// Observation model matching a sensor kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SensorObservation {
    Position(PositionModel),
    PositionVelocity(PositionVelocityModel),
}

impl SensorObservation {
    pub fn kind(&self) -> SensorKind {
        match self {
            SensorObservation::Position(_) => SensorKind::Camera,
            SensorObservation::PositionVelocity(_) => SensorKind::Radar,
        }
    }
}

/// A measurement vector with its reported class.
pub type Observed<const M: usize> = (SVector<f64, M>, Option<VehicleClass>);

struct Innovation<const M: usize> {
    predicted: SVector<f64, M>,
    /// Lower Cholesky factor of the innovation covariance.
    chol_l: SMatrix<f64, M, M>,
    norm: f64,
    gain: SMatrix<f64, 4, M>,
    cov: StateCovariance,
}

fn innovation<const M: usize, O: ObservationModel<M>>(
    c: &GaussianComponent,
    model: &O,
) -> Result<Innovation<M>, TrackerError> {
    let h = model.matrix();
    let r = model.noise(&c.mean);
    let pht = c.cov * h.transpose();
    let s = symmetrize(&(h * pht + r));
    let chol = s.cholesky().ok_or(TrackerError::NonPositiveDefinite { label: c.label })?;
    let det: f64 = chol.l_dirty().diagonal().iter().map(|d| d * d).product();
    // K = P Hᵀ S⁻¹, solved through the factor
    let gain = chol.solve(&pht.transpose()).transpose();
    let i_kh = StateCovariance::identity() - gain * h;
    let cov = symmetrize(&(i_kh * c.cov * i_kh.transpose() + gain * r * gain.transpose()));
    Ok(Innovation {
        predicted: h * c.mean,
        chol_l: chol.l(),
        norm: 1.0 / ((2.0 * PI).powi(M as i32) * det).sqrt(),
        gain,
        cov,
    })
}

/// Result of a GM-PHD update together with the per-measurement
/// explanation flags used by the birth model.
pub struct UpdateOutcome {
    pub intensity: Intensity,
    pub explained: Vec<bool>,
}

/// GM-PHD measurement update.
pub fn update<const M: usize, O: ObservationModel<M>>(
    intensity: &Intensity,
    measurements: &[Observed<M>],
    model: &O,
    cfg: &TrackerConfig,
) -> Result<Intensity, TrackerError> {
    update_with_explanation(intensity, measurements, model, cfg).map(|o| o.intensity)
}

pub fn update_with_explanation<const M: usize, O: ObservationModel<M>>(
    intensity: &Intensity,
    measurements: &[Observed<M>],
    model: &O,
    cfg: &TrackerConfig,
) -> Result<UpdateOutcome, TrackerError> {
    let comps = &intensity.components;
    let innovations = comps
        .iter()
        .map(|c| innovation(c, model))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = Vec::with_capacity(comps.len() * (1 + measurements.len().min(4)));
    for c in comps {
        out.push(GaussianComponent {
            weight: (1.0 - cfg.p_detect) * c.weight,
            detected: false,
            ..c.clone()
        });
    }

    let mut explained = vec![false; measurements.len()];
    let mut terms: Vec<(usize, f64, SVector<f64, M>)> = Vec::new();
    for (zi, (z, class)) in measurements.iter().enumerate() {
        terms.clear();
        let mut total = 0.0;
        for (j, (c, inn)) in comps.iter().zip(&innovations).enumerate() {
            let nu = z - inn.predicted;
            let d2 = inn.chol_l.solve_lower_triangular(&nu).map_or(f64::INFINITY, |w| w.norm_squared());
            if d2 <= cfg.birth_gate && c.weight >= cfg.explain_weight {
                explained[zi] = true;
            }
            if d2 > cfg.update_gate {
                continue;
            }
            let q = cfg.p_detect * c.weight * inn.norm * (-0.5 * d2).exp();
            if q > 0.0 {
                total += q;
                terms.push((j, q, nu));
            }
        }
        let denom = cfg.clutter_density + total;
        if denom <= 0.0 {
            continue;
        }
        for (j, q, nu) in &terms {
            let c = &comps[*j];
            let inn = &innovations[*j];
            out.push(GaussianComponent {
                weight: q / denom,
                mean: c.mean + inn.gain * nu,
                cov: inn.cov,
                label: c.label,
                age: c.age,
                class: *class,
                detected: true,
            });
        }
    }
    Ok(UpdateOutcome {
        intensity: Intensity {
            components: out,
            t: intensity.t,
        },
        explained,
    })
}

/// First of the two detections needed for a birth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BirthCandidate {
    pub position: [f64; 2],
    pub t: f64,
    pub class: Option<VehicleClass>,
}

/// Hands out labels that are never reused.
#[derive(Debug, Clone, Default)]
pub struct LabelGenerator {
    next: u64,
}

impl LabelGenerator {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    pub fn next_label(&mut self) -> u64 {
        let l = self.next;
        self.next += 1;
        l
    }
}

/// Two-detection birth. Unexplained measurements pair up with last
/// frame's candidates inside `max_speed * dt`; each pair spawns a
/// component at the newer detection with finite-difference velocity.
/// Unpaired unexplained measurements become the next candidates and all
/// previous candidates expire.
pub fn birth_step<const M: usize, O: ObservationModel<M>>(
    candidates: &[BirthCandidate],
    measurements: &[Observed<M>],
    explained: &[bool],
    t: f64,
    model: &O,
    cfg: &TrackerConfig,
    labels: &mut LabelGenerator,
) -> (Vec<GaussianComponent>, Vec<BirthCandidate>) {
    let mut born = Vec::new();
    let mut next = Vec::new();
    let mut used = vec![false; candidates.len()];
    for ((z, class), &is_explained) in measurements.iter().zip(explained) {
        if is_explained {
            continue;
        }
        let pos = [z[0], z[1]];
        let mut best: Option<(usize, f64)> = None;
        for (k, cand) in candidates.iter().enumerate() {
            let dt = t - cand.t;
            if used[k] || dt <= 0.0 {
                continue;
            }
            let dist = (pos[0] - cand.position[0]).hypot(pos[1] - cand.position[1]);
            if dist <= cfg.max_speed * dt && best.is_none_or(|(_, b)| dist < b) {
                best = Some((k, dist));
            }
        }
        match best {
            Some((k, _)) => {
                used[k] = true;
                let cand = &candidates[k];
                let dt = t - cand.t;
                let mean = StateVector::new(
                    pos[0],
                    pos[1],
                    (pos[0] - cand.position[0]) / dt,
                    (pos[1] - cand.position[1]) / dt,
                );
                let r = model.noise(&mean);
                let mut cov = StateCovariance::zeros();
                for a in 0..2 {
                    for b in 0..2 {
                        cov[(a, b)] = r[(a, b)];
                    }
                }
                cov[(2, 2)] = cfg.birth_velocity_var;
                cov[(3, 3)] = cfg.birth_velocity_var;
                born.push(GaussianComponent {
                    weight: cfg.birth_weight,
                    mean,
                    cov,
                    label: labels.next_label(),
                    age: 0,
                    class: *class,
                    detected: true,
                });
            }
            None => next.push(BirthCandidate {
                position: pos,
                t,
                class: *class,
            }),
        }
    }
    (born, next)
}

/// Moment-preserving merge of weighted Gaussians.
pub fn merge_moments(parts: &[(f64, StateVector, StateCovariance)]) -> (f64, StateVector, StateCovariance) {
    let w: f64 = parts.iter().map(|p| p.0).sum();
    let mean = parts.iter().fold(StateVector::zeros(), |acc, p| acc + p.1 * p.0) / w;
    let cov = parts.iter().fold(StateCovariance::zeros(), |acc, p| {
        let d = mean - p.1;
        acc + (p.2 + d * d.transpose()) * p.0
    }) / w;
    (w, mean, symmetrize(&cov))
}

/// Pruning, greedy merging and capping of the mixture.
pub fn prune_and_merge(intensity: &Intensity, cfg: &TrackerConfig) -> Intensity {
    let mut pool: Vec<&GaussianComponent> = intensity
        .components
        .iter()
        .filter(|c| c.weight >= cfg.prune_threshold)
        .collect();
    // heaviest first; ties broken by label for determinism
    pool.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.label.cmp(&b.label)));
    let factors: Vec<Option<StateCovariance>> = pool.iter().map(|c| c.cov.cholesky().map(|ch| ch.l())).collect();
    let mut taken = vec![false; pool.len()];
    let mut out = Vec::new();
    for j in 0..pool.len() {
        if taken[j] {
            continue;
        }
        let head = pool[j];
        let mut parts = Vec::new();
        let mut any_detected = false;
        for i in j..pool.len() {
            if taken[i] {
                continue;
            }
            let c = pool[i];
            let inside = if i == j {
                true
            } else if let Some(l) = &factors[i] {
                let d = c.mean - head.mean;
                l.solve_lower_triangular(&d).is_some_and(|w| w.norm_squared() <= cfg.merge_threshold)
            } else {
                false
            };
            if inside {
                taken[i] = true;
                any_detected |= c.detected && c.label == head.label;
                parts.push((c.weight, c.mean, c.cov));
            }
        }
        let (weight, mean, cov) = if parts.len() == 1 {
            (head.weight, head.mean, head.cov)
        } else {
            merge_moments(&parts)
        };
        out.push(GaussianComponent {
            weight,
            mean,
            cov,
            label: head.label,
            age: head.age,
            class: head.class,
            detected: head.detected || any_detected,
        });
        if out.len() == cfg.max_components {
            break;
        }
    }
    Intensity {
        components: out,
        t: intensity.t,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Dead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub label: u64,
    pub state: StateVector,
    pub cov: StateCovariance,
    pub status: TrackStatus,
    pub class_votes: [u32; 4],
    pub last_update: f64,
}

impl Track {
    /// Majority class, ties going to the earlier class in [`VehicleClass::ALL`].
    pub fn class(&self) -> Option<VehicleClass> {
        majority(&self.class_votes)
    }
}

pub(crate) fn majority(votes: &[u32; 4]) -> Option<VehicleClass> {
    let (best, n) = votes
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (i, &n)| if n > acc.1 { (i, n) } else { acc });
    if n == 0 {
        None
    } else {
        VehicleClass::from_index(best)
    }
}

fn heaviest_per_label(intensity: &Intensity) -> BTreeMap<u64, &GaussianComponent> {
    let mut best: BTreeMap<u64, &GaussianComponent> = BTreeMap::new();
    for c in &intensity.components {
        best.entry(c.label)
            .and_modify(|b| {
                if c.weight > b.weight {
                    *b = c;
                }
            })
            .or_insert(c);
    }
    best
}

/// Reads one state per label from the intensity: the label's heaviest
/// component, if it reaches the extraction threshold.
pub fn extract_tracks(intensity: &Intensity, cfg: &TrackerConfig, t: f64) -> Vec<Track> {
    heaviest_per_label(intensity)
        .into_values()
        .filter(|c| c.weight >= cfg.extract_threshold)
        .map(|c| {
            let mut votes = [0; 4];
            if let Some(k) = c.class {
                votes[k.index()] += 1;
            }
            Track {
                label: c.label,
                state: c.mean,
                cov: c.cov,
                status: TrackStatus::Tentative,
                class_votes: votes,
                last_update: t,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
struct TrackRecord {
    track: Track,
    hits: u32,
    misses: u32,
}

/// A full GM-PHD tracker for one sensor.
#[derive(Debug, Clone)]
pub struct GmPhdTracker {
    cfg: TrackerConfig,
    intensity: Intensity,
    candidates: Vec<BirthCandidate>,
    tracks: BTreeMap<u64, TrackRecord>,
    labels: LabelGenerator,
    last_t: Option<f64>,
}

impl GmPhdTracker {
    pub fn new(cfg: TrackerConfig) -> Self {
        Self {
            cfg,
            intensity: Intensity::default(),
            candidates: Vec::new(),
            tracks: BTreeMap::new(),
            labels: LabelGenerator::starting_at(1),
            last_t: None,
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn intensity(&self) -> &Intensity {
        &self.intensity
    }

    pub fn candidates(&self) -> &[BirthCandidate] {
        &self.candidates
    }

    /// Every live (tentative or confirmed) track.
    pub fn live_tracks(&self) -> Vec<Track> {
        self.tracks.values().map(|r| r.track.clone()).collect()
    }

    /// Processes one frame of measurements and returns the confirmed
    /// tracks extracted at time `t`.
    pub fn step<const M: usize, O: ObservationModel<M>>(
        &mut self,
        t: f64,
        measurements: &[Observed<M>],
        model: &O,
    ) -> Result<Vec<Track>, TrackerError> {
        let predicted = match self.last_t {
            Some(prev) if t <= prev => return Err(TrackerError::OutOfOrder { previous: prev, t }),
            Some(prev) => predict(&self.intensity, t - prev, &self.cfg),
            None => Intensity::new(t),
        };
        let outcome = update_with_explanation(&predicted, measurements, model, &self.cfg)?;
        let (born, candidates) = birth_step(
            &self.candidates,
            measurements,
            &outcome.explained,
            t,
            model,
            &self.cfg,
            &mut self.labels,
        );
        let mut updated = outcome.intensity;
        updated.t = t;
        updated.components.extend(born);
        self.intensity = prune_and_merge(&updated, &self.cfg);
        self.candidates = candidates;
        self.last_t = Some(t);
        Ok(self.manage_tracks(t))
    }

    /// Dispatches a world-frame measurement frame to the matching model.
    pub fn process(&mut self, frame: &MeasurementFrame, model: &SensorObservation) -> Result<Vec<Track>, TrackerError> {
        if frame.kind != model.kind() {
            return Err(TrackerError::WrongKind(frame.kind, model.kind()));
        }
        match model {
            SensorObservation::Position(m) => {
                let zs: Vec<Observed<2>> = frame
                    .measurements
                    .iter()
                    .map(|z| (Vector2::new(z.position[0], z.position[1]), z.class))
                    .collect();
                self.step(frame.t, &zs, m)
            }
            SensorObservation::PositionVelocity(m) => {
                let zs = frame
                    .measurements
                    .iter()
                    .map(|z: &Measurement| {
                        let v = z.velocity.ok_or(TrackerError::MissingVelocity)?;
                        Ok((Vector4::new(z.position[0], z.position[1], v[0], v[1]), z.class))
                    })
                    .collect::<Result<Vec<Observed<4>>, TrackerError>>()?;
                self.step(frame.t, &zs, m)
            }
        }
    }

    fn manage_tracks(&mut self, t: f64) -> Vec<Track> {
        let cfg = &self.cfg;
        let heads: BTreeMap<u64, GaussianComponent> = heaviest_per_label(&self.intensity)
            .into_iter()
            .map(|(l, c)| (l, c.clone()))
            .collect();
        for (&label, c) in &heads {
            let rec = self.tracks.entry(label).or_insert_with(|| TrackRecord {
                track: Track {
                    label,
                    state: c.mean,
                    cov: c.cov,
                    status: TrackStatus::Tentative,
                    class_votes: [0; 4],
                    last_update: t,
                },
                hits: 0,
                misses: 0,
            });
            let supported = c.detected && (c.weight >= cfg.extract_threshold || c.age == 0);
            rec.track.state = c.mean;
            rec.track.cov = c.cov;
            if supported {
                rec.hits += 1;
                rec.misses = 0;
                rec.track.last_update = t;
                if let Some(k) = c.class {
                    rec.track.class_votes[k.index()] += 1;
                }
                if rec.hits >= cfg.confirm_length {
                    rec.track.status = TrackStatus::Confirmed;
                }
            } else {
                rec.hits = 0;
                rec.misses += 1;
            }
        }
        for (label, rec) in self.tracks.iter_mut() {
            if !heads.contains_key(label) {
                rec.hits = 0;
                rec.misses += 1;
            }
            if rec.misses >= cfg.miss_limit {
                rec.track.status = TrackStatus::Dead;
            }
        }
        let dead: Vec<u64> = self
            .tracks
            .iter()
            .filter(|(_, r)| r.track.status == TrackStatus::Dead)
            .map(|(l, _)| *l)
            .collect();
        if !dead.is_empty() {
            self.intensity.components.retain(|c| !dead.contains(&c.label));
            for l in &dead {
                self.tracks.remove(l);
            }
        }
        self.tracks
            .values()
            .filter(|r| r.track.status == TrackStatus::Confirmed)
            .filter(|r| heads.get(&r.track.label).is_some_and(|c| c.weight >= cfg.extract_threshold))
            .map(|r| r.track.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn comp(weight: f64, mean: [f64; 4], label: u64) -> GaussianComponent {
        GaussianComponent {
            weight,
            mean: StateVector::from(mean),
            cov: StateCovariance::identity(),
            label,
            age: 1,
            class: None,
            detected: false,
        }
    }

    fn position_model(var: f64) -> PositionModel {
        PositionModel::constant(Matrix2::identity() * var)
    }

    #[test]
    fn predict_moves_mean_and_scales_weight() {
        let cfg = TrackerConfig::default();
        let i = Intensity {
            components: vec![comp(1.0, [0.0, 0.0, 10.0, 0.0], 1)],
            t: 0.0,
        };
        let p = predict(&i, 0.185, &cfg);
        assert_relative_eq!(p.components[0].mean, StateVector::new(1.85, 0.0, 10.0, 0.0), epsilon = 1e-12);
        assert_relative_eq!(p.components[0].weight, 0.99);
        assert_eq!(p.components[0].label, 1);
    }

    #[test]
    fn process_noise_is_symmetric_psd() {
        let q = process_noise(0.2, 2.0);
        assert_eq!(q, q.transpose());
        assert!(q.symmetric_eigenvalues().iter().all(|e| *e >= -1e-15));
    }

    #[test]
    fn empty_update_scales_by_miss_probability() {
        let cfg = TrackerConfig::default();
        let i = Intensity {
            components: vec![comp(0.8, [0.0; 4], 1), comp(0.3, [5.0, 1.0, 0.0, 0.0], 2)],
            t: 0.0,
        };
        let u = update::<2, _>(&i, &[], &position_model(1.0), &cfg).unwrap();
        for (a, b) in i.components.iter().zip(&u.components) {
            assert_eq!(b.weight, a.weight * (1.0 - cfg.p_detect));
        }
        assert_relative_eq!(u.total_weight(), i.total_weight() * (1.0 - cfg.p_detect), epsilon = 1e-15);
    }

    #[test]
    fn far_clutter_leaves_mass_untouched() {
        let cfg = TrackerConfig::default();
        let i = Intensity {
            components: vec![comp(1.0, [0.0; 4], 1)],
            t: 0.0,
        };
        let z = (Vector2::new(20.0, 0.0), None);
        let u = update(&i, &[z], &position_model(1.0), &cfg).unwrap();
        let mass: f64 = u.components.iter().filter(|c| c.label == 1).map(|c| c.weight).sum();
        assert!((mass - (1.0 - cfg.p_detect)).abs() < 1e-6);
    }

    #[test]
    fn non_pd_innovation_is_reported() {
        let cfg = TrackerConfig::default();
        let mut c = comp(1.0, [0.0; 4], 7);
        c.cov = StateCovariance::zeros();
        let i = Intensity {
            components: vec![c],
            t: 0.0,
        };
        let bad = PositionModel::constant(Matrix2::new(-1.0, 0.0, 0.0, 1.0));
        assert_eq!(
            update(&i, &[(Vector2::zeros(), None)], &bad, &cfg).unwrap_err(),
            TrackerError::NonPositiveDefinite { label: 7 }
        );
    }

    #[test]
    fn birth_needs_two_detections() {
        let cfg = TrackerConfig::default();
        let model = position_model(0.25);
        let mut labels = LabelGenerator::starting_at(1);
        let z1 = [(Vector2::new(100.0, 3.5), Some(VehicleClass::Car))];
        let (born, cands) = birth_step(&[], &z1, &[false], 0.0, &model, &cfg, &mut labels);
        assert!(born.is_empty());
        assert_eq!(cands.len(), 1);

        let z2 = [(Vector2::new(95.37, 3.5), Some(VehicleClass::Car))];
        let (born, cands2) = birth_step(&cands, &z2, &[false], 0.185, &model, &cfg, &mut labels);
        assert_eq!(born.len(), 1);
        assert!(cands2.is_empty());
        assert_relative_eq!(born[0].mean[2], -4.63 / 0.185, epsilon = 1e-9);
        assert_relative_eq!(born[0].mean[2], -25.027027027027, epsilon = 1e-9);
        assert_eq!(born[0].mean[3], 0.0);
        assert_eq!(born[0].weight, cfg.birth_weight);
    }

    #[test]
    fn candidate_without_follow_up_expires() {
        let cfg = TrackerConfig::default();
        let model = position_model(0.25);
        let mut labels = LabelGenerator::default();
        let cands = [BirthCandidate {
            position: [0.0, 0.0],
            t: 0.0,
            class: None,
        }];
        // 30 m in 0.185 s is far beyond max_speed * dt
        let z = [(Vector2::new(30.0, 0.0), None)];
        let (born, next) = birth_step(&cands, &z, &[false], 0.185, &model, &cfg, &mut labels);
        assert!(born.is_empty());
        assert_eq!(next.len(), 1);
        assert_eq!(next[0].position, [30.0, 0.0]);
        let (born, next) = birth_step(&next, &[], &[], 0.37, &model, &cfg, &mut labels);
        assert!(born.is_empty() && next.is_empty());
    }

    #[test]
    fn identical_components_merge() {
        let cfg = TrackerConfig::default();
        let i = Intensity {
            components: vec![comp(0.3, [1.0, 2.0, 3.0, 4.0], 1), comp(0.3, [1.0, 2.0, 3.0, 4.0], 2)],
            t: 0.0,
        };
        let m = prune_and_merge(&i, &cfg);
        assert_eq!(m.len(), 1);
        assert_relative_eq!(m.components[0].weight, 0.6);
        assert_eq!(m.components[0].mean, StateVector::new(1.0, 2.0, 3.0, 4.0));
        assert_relative_eq!(m.components[0].cov, StateCovariance::identity(), epsilon = 1e-15);
    }

    #[test]
    fn tiny_weights_are_pruned() {
        let cfg = TrackerConfig::default();
        let i = Intensity {
            components: vec![comp(0.5, [0.0; 4], 1), comp(1e-9, [100.0, 0.0, 0.0, 0.0], 2)],
            t: 0.0,
        };
        assert_eq!(prune_and_merge(&i, &cfg).len(), 1);
    }

    #[test]
    fn merge_preserves_moments() {
        let cfg = TrackerConfig::default();
        let i = Intensity {
            components: vec![comp(0.4, [0.0; 4], 1), comp(0.6, [1.0, 0.0, 0.0, 0.0], 2)],
            t: 0.0,
        };
        let m = prune_and_merge(&i, &cfg);
        assert_eq!(m.len(), 1);
        let c = &m.components[0];
        assert_relative_eq!(c.mean[0], 0.6, epsilon = 1e-15);
        assert_relative_eq!(c.cov[(0, 0)], 1.24, epsilon = 1e-15);
        assert_relative_eq!(c.cov[(1, 1)], 1.0, epsilon = 1e-15);
        // label of the heaviest member
        assert_eq!(c.label, 2);
    }

    #[test]
    fn cap_keeps_heaviest() {
        let cfg = TrackerConfig {
            max_components: 2,
            ..TrackerConfig::default()
        };
        let i = Intensity {
            components: (0..5).map(|k| comp(0.1 * (k + 1) as f64, [100.0 * k as f64, 0.0, 0.0, 0.0], k)).collect(),
            t: 0.0,
        };
        let m = prune_and_merge(&i, &cfg);
        assert_eq!(m.components.iter().map(|c| c.label).collect::<Vec<_>>(), vec![4, 3]);
    }

    #[test]
    fn extraction_thresholds_per_label() {
        let cfg = TrackerConfig::default();
        let i = Intensity {
            components: vec![
                comp(0.9, [0.0; 4], 1),
                comp(0.6, [50.0, 0.0, 0.0, 0.0], 2),
                comp(0.02, [90.0, 0.0, 0.0, 0.0], 3),
            ],
            t: 0.0,
        };
        assert_eq!(extract_tracks(&i, &cfg, 0.0).len(), 2);
        assert_relative_eq!(i.total_weight(), 1.52, epsilon = 1e-12);
    }

    #[test]
    fn single_noiseless_target_confirms_after_three_frames() {
        let cfg = TrackerConfig {
            clutter_density: 0.0,
            ..TrackerConfig::default()
        };
        let model = position_model(0.01);
        let mut tracker = GmPhdTracker::new(cfg.clone());
        let dt = 1.0 / 5.4;
        let mut confirmed_at = None;
        let mut labels = std::collections::BTreeSet::new();
        for k in 0..20 {
            let t = k as f64 * dt;
            let z = (Vector2::new(10.0 + 30.0 * t, -3.75), Some(VehicleClass::Car));
            let out = tracker.step(t, &[z], &model).unwrap();
            if !out.is_empty() && confirmed_at.is_none() {
                confirmed_at = Some(k + 1);
            }
            for tr in &out {
                labels.insert(tr.label);
                assert_eq!(tr.class(), Some(VehicleClass::Car));
            }
        }
        assert_eq!(confirmed_at, Some(cfg.confirm_length as usize + 1));
        assert_eq!(labels.len(), 1);
    }

    #[test]
    fn track_dies_after_miss_limit() {
        let cfg = TrackerConfig {
            clutter_density: 0.0,
            ..TrackerConfig::default()
        };
        let model = position_model(0.01);
        let mut tracker = GmPhdTracker::new(cfg);
        let dt = 0.2;
        for k in 0..6 {
            let t = k as f64 * dt;
            tracker.step(t, &[(Vector2::new(30.0 * t, 0.0), None)], &model).unwrap();
        }
        assert_eq!(tracker.live_tracks().len(), 1);
        for k in 6..9 {
            tracker.step(k as f64 * dt, &[], &model).unwrap();
        }
        assert!(tracker.live_tracks().is_empty());
        assert!(tracker.intensity().is_empty());
    }

    #[test]
    fn out_of_order_frames_rejected() {
        let mut tracker = GmPhdTracker::new(TrackerConfig::default());
        let model = position_model(1.0);
        tracker.step::<2, _>(1.0, &[], &model).unwrap();
        assert!(matches!(
            tracker.step::<2, _>(0.5, &[], &model),
            Err(TrackerError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn range_noise_grows_along_the_line_of_sight() {
        let n = RangeNoise {
            origin: [0.0, 0.0],
            height: 7.0,
            focal_px: 2730.0,
            sigma_px: 1.0,
            floor_range: 0.1,
            floor_cross: 0.1,
        };
        let near = n.covariance(50.0, 0.0);
        let far = n.covariance(200.0, 0.0);
        assert!(far[(0, 0)] > near[(0, 0)]);
        assert!(far[(0, 0)] > far[(1, 1)]);
        assert!(far.cholesky().is_some());
    }

    #[test]
    fn majority_vote_ties_go_to_first_class() {
        assert_eq!(majority(&[2, 1, 0, 0]), Some(VehicleClass::Car));
        assert_eq!(majority(&[1, 1, 0, 0]), Some(VehicleClass::Car));
        assert_eq!(majority(&[0, 0, 0, 0]), None);
        assert_eq!(majority(&[0, 3, 3, 0]), Some(VehicleClass::Truck));
    }
}

#[cfg(test)]
mod properties {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn scan() -> impl Strategy<Value = Vec<Vec<(f64, f64)>>> {
        prop::collection::vec(prop::collection::vec((0.0..200.0f64, -10.0..10.0f64), 0..6), 1..40)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn covariances_stay_spd_and_labels_unique(frames in scan()) {
            let model = PositionModel::constant(Matrix2::identity() * 0.5);
            let mut tracker = GmPhdTracker::new(TrackerConfig::default());
            let mut dead = BTreeSet::new();
            let mut prev = BTreeSet::new();
            for (k, zs) in frames.iter().enumerate() {
                let z: Vec<_> = zs.iter().map(|(x, y)| (Vector2::new(*x, *y), None)).collect();
                let out = tracker.step(k as f64 * 0.2, &z, &model).unwrap();
                let labels: BTreeSet<u64> = out.iter().map(|t| t.label).collect();
                prop_assert_eq!(labels.len(), out.len());
                prop_assert!(labels.is_disjoint(&dead));
                for c in &tracker.intensity().components {
                    prop_assert!(c.weight >= 0.0 && c.weight.is_finite());
                    prop_assert!((c.cov - c.cov.transpose()).abs().max() < 1e-9 * c.cov.abs().max().max(1.0));
                    prop_assert!(c.cov.cholesky().is_some());
                }
                let live: BTreeSet<u64> = tracker.intensity().components.iter().map(|c| c.label).collect();
                dead.extend(prev.difference(&live).copied());
                prev = live;
            }
        }

        #[test]
        fn prediction_scales_mass_by_survival(w in prop::collection::vec(0.01..2.0f64, 1..8), dt in 0.01..1.0f64) {
            let cfg = TrackerConfig::default();
            let i = Intensity {
                components: w
                    .iter()
                    .enumerate()
                    .map(|(k, w)| GaussianComponent {
                        weight: *w,
                        mean: StateVector::new(k as f64, 0.0, 20.0, 0.0),
                        cov: StateCovariance::identity(),
                        label: k as u64 + 1,
                        age: 1,
                        class: None,
                        detected: true,
                    })
                    .collect(),
                t: 0.0,
            };
            let p = predict(&i, dt, &cfg);
            prop_assert!((p.total_weight() - cfg.p_survival * i.total_weight()).abs() < 1e-12);
        }
    }
}
