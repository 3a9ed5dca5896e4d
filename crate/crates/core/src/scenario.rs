//! Synthetic highway traffic: lanes, vehicle agents with constant-velocity
//! kinematics and a hard car-following clamp, and ground-truth sampling.
//!
//! The simulated road is longer than the evaluated stretch by `margin` on
//! both ends so vehicles are already moving when they reach the covered
//! section. Ground truth only reports vehicles whose center lies on the
//! stretch `0 <= x <= stretch_length`.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, StreamRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VehicleClass {
    Car,
    Truck,
    Bus,
    Motorcycle,
}

impl VehicleClass {
    pub const ALL: [VehicleClass; 4] = [
        VehicleClass::Car,
        VehicleClass::Truck,
        VehicleClass::Bus,
        VehicleClass::Motorcycle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// Driving direction of a lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Traffic moves towards `+x`.
    Forward,
    /// Traffic moves towards `-x`.
    Backward,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }

    pub fn heading(self) -> f64 {
        match self {
            Direction::Forward => 0.0,
            Direction::Backward => std::f64::consts::PI,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneSpec {
    pub id: usize,
    pub y: f64,
    pub direction: Direction,
    pub width: f64,
}

/// Size and speed distribution of one vehicle class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassProfile {
    pub share: f64,
    pub length_mean: f64,
    pub length_sd: f64,
    pub width: f64,
    pub height: f64,
    pub speed_mean: f64,
    pub speed_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMix {
    pub car: ClassProfile,
    pub truck: ClassProfile,
    pub bus: ClassProfile,
    pub motorcycle: ClassProfile,
}

impl ClassMix {
    pub fn profile(&self, class: VehicleClass) -> &ClassProfile {
        match class {
            VehicleClass::Car => &self.car,
            VehicleClass::Truck => &self.truck,
            VehicleClass::Bus => &self.bus,
            VehicleClass::Motorcycle => &self.motorcycle,
        }
    }
}

impl Default for ClassMix {
    fn default() -> Self {
        Self {
            car: ClassProfile {
                share: 0.84,
                length_mean: 4.6,
                length_sd: 0.3,
                width: 1.8,
                height: 1.5,
                speed_mean: 33.0,
                speed_sd: 3.0,
            },
            truck: ClassProfile {
                share: 0.10,
                length_mean: 9.5,
                length_sd: 1.0,
                width: 2.5,
                height: 3.6,
                speed_mean: 24.0,
                speed_sd: 1.0,
            },
            bus: ClassProfile {
                share: 0.02,
                length_mean: 12.0,
                length_sd: 0.5,
                width: 2.55,
                height: 3.5,
                speed_mean: 27.0,
                speed_sd: 1.5,
            },
            motorcycle: ClassProfile {
                share: 0.04,
                length_mean: 2.2,
                length_sd: 0.1,
                width: 0.8,
                height: 1.4,
                speed_mean: 34.0,
                speed_sd: 4.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Evaluated stretch, `0 <= x <= stretch_length` (m).
    pub stretch_length: f64,
    /// Extra simulated road before and after the stretch (m).
    pub margin: f64,
    pub lanes_per_direction: usize,
    pub lane_width: f64,
    /// Lateral distance from the median to the inner edge of the first lane (m).
    pub median_offset: f64,
    /// Poisson arrival rate per lane (vehicles/s).
    pub spawn_rate: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub classes: ClassMix,
    /// Minimum bumper-to-bumper gap within a lane (m).
    pub min_gap: f64,
    /// Simulation step (s).
    pub dt: f64,
    /// Recorded duration (s); frames cover `[0, duration)`.
    pub duration: f64,
    /// Traffic is simulated for this long before recording starts (s).
    pub warmup: f64,
    /// Ground-truth sampling rate (Hz).
    pub gt_rate: f64,
    /// Expected lane changes per vehicle and second; 0 disables them.
    pub lane_change_rate: f64,
    /// Duration of the lateral ramp of a lane change (s).
    pub lane_change_duration: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            stretch_length: 440.0,
            margin: 150.0,
            lanes_per_direction: 3,
            lane_width: 3.5,
            median_offset: 2.0,
            spawn_rate: 0.215,
            speed_min: 20.0,
            speed_max: 45.0,
            classes: ClassMix::default(),
            min_gap: 8.0,
            dt: 1.0 / 54.0,
            duration: 120.0,
            warmup: 30.0,
            gt_rate: 1.0,
            lane_change_rate: 0.0,
            lane_change_duration: 3.0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidConfig(m.to_string()));
        if !(self.stretch_length > 0.0) {
            return bad("stretch_length must be positive");
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be non-negative");
        }
        if self.lanes_per_direction == 0 {
            return bad("lanes_per_direction must be at least 1");
        }
        if !(self.lane_width > 0.0) {
            return bad("lane_width must be positive");
        }
        if !(self.median_offset >= 0.0) {
            return bad("median_offset must be non-negative");
        }
        if !(self.spawn_rate >= 0.0) {
            return bad("spawn_rate must be non-negative");
        }
        if !(self.speed_min > 0.0 && self.speed_max >= self.speed_min) {
            return bad("speed bounds must satisfy 0 < speed_min <= speed_max");
        }
        if !(self.min_gap > 0.0) {
            return bad("min_gap must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.duration >= 0.0) {
            return bad("duration must be non-negative");
        }
        if self.duration > 0.0 && self.duration < self.dt {
            return bad("duration must be at least one step");
        }
        if !(self.warmup >= 0.0) {
            return bad("warmup must be non-negative");
        }
        if !(self.gt_rate > 0.0) {
            return bad("gt_rate must be positive");
        }
        if !(self.lane_change_rate >= 0.0 && self.lane_change_duration > 0.0) {
            return bad("lane change parameters must be non-negative with a positive duration");
        }
        let mut total = 0.0;
        for class in VehicleClass::ALL {
            let p = self.classes.profile(class);
            if !(p.share >= 0.0 && p.length_mean > 0.0 && p.length_sd >= 0.0 && p.width > 0.0 && p.height > 0.0 && p.speed_sd >= 0.0) {
                return bad("class profiles need non-negative shares and spreads and positive sizes");
            }
            total += p.share;
        }
        if !(total > 0.0) {
            return bad("class shares must not all be zero");
        }
        Ok(())
    }

    /// Simulated road length including both margins.
    pub fn road_length(&self) -> f64 {
        self.stretch_length + 2.0 * self.margin
    }

    pub fn lanes(&self) -> Vec<LaneSpec> {
        let mut lanes = Vec::with_capacity(2 * self.lanes_per_direction);
        for k in 0..self.lanes_per_direction {
            let offset = self.median_offset + self.lane_width * (k as f64 + 0.5);
            lanes.push(LaneSpec {
                id: lanes.len(),
                y: -offset,
                direction: Direction::Forward,
                width: self.lane_width,
            });
        }
        for k in 0..self.lanes_per_direction {
            let offset = self.median_offset + self.lane_width * (k as f64 + 0.5);
            lanes.push(LaneSpec {
                id: lanes.len(),
                y: offset,
                direction: Direction::Backward,
                width: self.lane_width,
            });
        }
        lanes
    }

    /// Number of simulation steps per sample at `rate` Hz, if the rate
    /// divides the step evenly.
    pub fn steps_per_sample(&self, rate: f64) -> Option<u64> {
        let ratio = 1.0 / (rate * self.dt);
        let n = ratio.round();
        if n >= 1.0 && (ratio - n).abs() < 1e-6 {
            Some(n as u64)
        } else {
            None
        }
    }

    /// Number of recorded steps, covering `[0, duration)`.
    pub fn recorded_steps(&self) -> u64 {
        (self.duration / self.dt - 1e-9).ceil().max(0.0) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LaneChange {
    target_y: f64,
    lateral_speed: f64,
}

/// A simulated vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct VehicleAgent {
    pub id: u64,
    pub class: VehicleClass,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub lane: usize,
    pub desired_speed: f64,
    lane_change: Option<LaneChange>,
}

impl VehicleAgent {
    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }

    pub fn heading(&self) -> f64 {
        self.vy.atan2(self.vx)
    }

    pub fn snapshot(&self) -> VehicleState {
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

/// True state of one vehicle at a sampling instant. Positions refer to the
/// vehicle center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u64,
    pub class: VehicleClass,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl VehicleState {
    pub fn heading(&self) -> f64 {
        if self.vx.hypot(self.vy) < 1e-6 {
            // at rest: fall back to the lane direction implied by the side of the median
            if self.y > 0.0 {
                std::f64::consts::PI
            } else {
                0.0
            }
        } else {
            self.vy.atan2(self.vx)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub t: f64,
    pub vehicles: Vec<VehicleState>,
}

/// Traffic world owned by a single driver loop.
#[derive(Debug, Clone)]
pub struct World {
    cfg: ScenarioConfig,
    lanes: Vec<LaneSpec>,
    agents: Vec<VehicleAgent>,
    /// Arrivals waiting for a free lane entry.
    pending: Vec<u64>,
    next_id: u64,
    step_index: i64,
    spawned: u64,
    retired: u64,
    rng: StreamRng,
    speed_noise: Vec<Normal<f64>>,
    length_noise: Vec<Normal<f64>>,
}

impl World {
    /// Creates the world and runs the configured warm-up so that recording
    /// starts at `t = 0` on a populated road.
    pub fn new(cfg: ScenarioConfig, master_seed: u64) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let mut world = Self::empty(cfg, master_seed)?;
        let warmup_steps = (world.cfg.warmup / world.cfg.dt).round() as i64;
        world.step_index = -warmup_steps;
        for _ in 0..warmup_steps {
            world.advance();
        }
        Ok(world)
    }

    /// A world with no warm-up, starting at `t = 0`.
    pub fn empty(cfg: ScenarioConfig, master_seed: u64) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let lanes = cfg.lanes();
        let speed_noise = VehicleClass::ALL
            .iter()
            .map(|c| {
                let p = cfg.classes.profile(*c);
                Normal::new(p.speed_mean, p.speed_sd).map_err(|e| ScenarioError::InvalidConfig(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let length_noise = VehicleClass::ALL
            .iter()
            .map(|c| {
                let p = cfg.classes.profile(*c);
                Normal::new(p.length_mean, p.length_sd).map_err(|e| ScenarioError::InvalidConfig(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            pending: vec![0; lanes.len()],
            lanes,
            agents: Vec::new(),
            next_id: 1,
            step_index: 0,
            spawned: 0,
            retired: 0,
            rng: seed::stream(master_seed, "scenario"),
            speed_noise,
            length_noise,
            cfg,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn lanes(&self) -> &[LaneSpec] {
        &self.lanes
    }

    pub fn agents(&self) -> &[VehicleAgent] {
        &self.agents
    }

    pub fn time(&self) -> f64 {
        self.step_index as f64 * self.cfg.dt
    }

    pub fn step_index(&self) -> i64 {
        self.step_index
    }

    pub fn spawned(&self) -> u64 {
        self.spawned
    }

    pub fn retired(&self) -> u64 {
        self.retired
    }

    /// Inserts an agent directly, bypassing the arrival process. Used for
    /// scripted scenarios; returns the assigned id.
    pub fn insert_agent(&mut self, class: VehicleClass, lane: usize, x: f64, speed: f64) -> u64 {
        let lane_spec = self.lanes[lane];
        let p = *self.cfg.classes.profile(class);
        let id = self.next_id;
        self.next_id += 1;
        self.spawned += 1;
        self.agents.push(VehicleAgent {
            id,
            class,
            length: p.length_mean,
            width: p.width,
            height: p.height,
            x,
            y: lane_spec.y,
            vx: lane_spec.direction.sign() * speed,
            vy: 0.0,
            lane,
            desired_speed: speed,
            lane_change: None,
        });
        id
    }

    /// Arrival-coordinate of `x` in a lane: distance travelled from the
    /// lane's entry point.
    fn progress(&self, lane: usize, x: f64) -> f64 {
        match self.lanes[lane].direction {
            Direction::Forward => x + self.cfg.margin,
            Direction::Backward => self.cfg.stretch_length + self.cfg.margin - x,
        }
    }

    fn position_at(&self, lane: usize, s: f64) -> f64 {
        match self.lanes[lane].direction {
            Direction::Forward => s - self.cfg.margin,
            Direction::Backward => self.cfg.stretch_length + self.cfg.margin - s,
        }
    }

    fn sample_class(&mut self) -> VehicleClass {
        let mix = &self.cfg.classes;
        let total: f64 = VehicleClass::ALL.iter().map(|c| mix.profile(*c).share).sum();
        let mut r = self.rng.random::<f64>() * total;
        for c in VehicleClass::ALL {
            let share = mix.profile(c).share;
            if r < share {
                return c;
            }
            r -= share;
        }
        VehicleClass::Car
    }

    /// Poisson arrivals for this step, placed at the lane entries when the
    /// entry is free. Returns the ids of the new agents.
    pub fn spawn_vehicles(&mut self) -> Vec<u64> {
        let mut new_ids = Vec::new();
        if self.cfg.spawn_rate <= 0.0 {
            return new_ids;
        }
        let arrivals = Poisson::new(self.cfg.spawn_rate * self.cfg.dt).expect("positive Poisson mean");
        for lane in 0..self.lanes.len() {
            self.pending[lane] += arrivals.sample(&mut self.rng) as u64;
            if self.pending[lane] == 0 {
                continue;
            }
            let class = self.sample_class();
            let ci = class.index();
            let p = *self.cfg.classes.profile(class);
            let length = self.length_noise[ci]
                .sample(&mut self.rng)
                .clamp(0.5 * p.length_mean, 1.5 * p.length_mean);
            let speed = self.speed_noise[ci]
                .sample(&mut self.rng)
                .clamp(self.cfg.speed_min, self.cfg.speed_max);
            // the new vehicle's center sits on the entry point
            let front = 0.5 * length;
            let blocked = self.agents.iter().any(|a| {
                a.lane == lane && self.progress(lane, a.x) - 0.5 * a.length - front < self.cfg.min_gap
            });
            if blocked {
                continue;
            }
            self.pending[lane] -= 1;
            let lane_spec = self.lanes[lane];
            let id = self.next_id;
            self.next_id += 1;
            self.spawned += 1;
            self.agents.push(VehicleAgent {
                id,
                class,
                length,
                width: p.width,
                height: p.height,
                x: self.position_at(lane, 0.0),
                y: lane_spec.y,
                vx: lane_spec.direction.sign() * speed,
                vy: 0.0,
                lane,
                desired_speed: speed,
                lane_change: None,
            });
            new_ids.push(id);
        }
        new_ids
    }

    fn maybe_start_lane_changes(&mut self, dt: f64) {
        if self.cfg.lane_change_rate <= 0.0 {
            return;
        }
        let p = self.cfg.lane_change_rate * dt;
        for i in 0..self.agents.len() {
            if self.agents[i].lane_change.is_some() || self.rng.random::<f64>() >= p {
                continue;
            }
            let lane = self.agents[i].lane;
            let dir = self.lanes[lane].direction;
            let candidates: Vec<usize> = self
                .lanes
                .iter()
                .filter(|l| l.direction == dir && (l.y - self.lanes[lane].y).abs() - l.width < 1e-9 && l.id != lane)
                .map(|l| l.id)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let target = candidates[self.rng.random_range(0..candidates.len())];
            let s = self.progress(lane, self.agents[i].x);
            let len = self.agents[i].length;
            let free = self.agents.iter().all(|b| {
                if b.lane != target {
                    return true;
                }
                let sb = self.progress(target, b.x);
                (sb - s).abs() - 0.5 * (b.length + len) >= self.cfg.min_gap
            });
            if !free {
                continue;
            }
            let target_y = self.lanes[target].y;
            let a = &mut self.agents[i];
            a.lane = target;
            a.lane_change = Some(LaneChange {
                target_y,
                lateral_speed: (target_y - a.y) / self.cfg.lane_change_duration,
            });
        }
    }

    /// Advances all agents by `dt` under constant velocity, clamping
    /// followers so the minimum gap is kept, and retires agents that have
    /// left the simulated road.
    pub fn step(&mut self, dt: f64) {
        assert!(dt > 0.0, "step requires dt > 0");
        self.maybe_start_lane_changes(dt);
        let road = self.cfg.road_length();
        let min_gap = self.cfg.min_gap;
        // per lane, leaders first
        let mut order: Vec<(usize, f64, usize)> = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, a)| (a.lane, self.progress(a.lane, a.x), i))
            .collect();
        order.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)));
        let mut leader: Option<(usize, f64, f64, f64)> = None; // lane, new s, length, speed
        let mut new_s = vec![0.0; self.agents.len()];
        for &(lane, s, i) in &order {
            let a = &self.agents[i];
            let mut speed = a.desired_speed;
            let mut s_next = s + speed * dt;
            if let Some((l_lane, l_s, l_len, l_speed)) = leader {
                if l_lane == lane {
                    let limit = l_s - 0.5 * l_len - min_gap - 0.5 * a.length;
                    if s_next > limit {
                        speed = speed.min(l_speed);
                        s_next = limit.max(s);
                    }
                }
            }
            new_s[i] = s_next;
            leader = Some((lane, s_next, a.length, speed));
            let sign = self.lanes[lane].direction.sign();
            let a = &mut self.agents[i];
            a.vx = sign * speed;
        }
        for i in 0..self.agents.len() {
            let lane = self.agents[i].lane;
            let x = self.position_at(lane, new_s[i]);
            let a = &mut self.agents[i];
            a.x = x;
            if let Some(lc) = a.lane_change {
                let remaining = lc.target_y - a.y;
                let dy = lc.lateral_speed * dt;
                if dy.abs() >= remaining.abs() {
                    a.y = lc.target_y;
                    a.vy = 0.0;
                    a.lane_change = None;
                } else {
                    a.y += dy;
                    a.vy = lc.lateral_speed;
                }
            }
        }
        let before = self.agents.len();
        let lanes = &self.lanes;
        let margin = self.cfg.margin;
        let stretch = self.cfg.stretch_length;
        self.agents.retain(|a| {
            let s = match lanes[a.lane].direction {
                Direction::Forward => a.x + margin,
                Direction::Backward => stretch + margin - a.x,
            };
            s <= road
        });
        self.retired += (before - self.agents.len()) as u64;
    }

    /// One full simulation step: arrivals, then motion.
    pub fn advance(&mut self) {
        self.spawn_vehicles();
        self.step(self.cfg.dt);
        self.step_index += 1;
    }

    /// Vehicles currently on the evaluated stretch.
    pub fn sample_ground_truth(&self) -> GroundTruthFrame {
        let stretch = self.cfg.stretch_length;
        GroundTruthFrame {
            t: self.time(),
            vehicles: self
                .agents
                .iter()
                .filter(|a| a.x >= 0.0 && a.x <= stretch)
                .map(VehicleAgent::snapshot)
                .collect(),
        }
    }

    /// Every simulated vehicle, including those in the margins.
    pub fn snapshot(&self) -> Vec<VehicleState> {
        self.agents.iter().map(VehicleAgent::snapshot).collect()
    }

    /// Checks the minimum-gap invariant over all lanes.
    pub fn min_gap_violations(&self) -> usize {
        let mut count = 0;
        for lane in 0..self.lanes.len() {
            let mut s: Vec<(f64, f64)> = self
                .agents
                .iter()
                .filter(|a| a.lane == lane && a.lane_change.is_none())
                .map(|a| (self.progress(lane, a.x), a.length))
                .collect();
            s.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in s.windows(2) {
                let gap = (w[1].0 - 0.5 * w[1].1) - (w[0].0 + 0.5 * w[0].1);
                if gap < self.cfg.min_gap - 1e-9 {
                    count += 1;
                }
            }
        }
        count
    }
}
