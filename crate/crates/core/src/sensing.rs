//! Parametric camera and radar observation models.
//!
//! Cameras produce noisy image boxes (a detector emulation) that are later
//! cast onto the road through their lower-edge midpoint. Radars report
//! world-frame position and velocity directly. Both sensors miss targets
//! with probability `1 - p_detect` and add Poisson clutter.

use nalgebra::{Point2, Vector3};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    backproject_box, camera_rotation, ground_footprint, polygon_area, project_vehicle_to_box, vehicle_cuboid,
    CameraModel, GeometryError, ImageBox, Intrinsics, RigidTransform,
};
use crate::scenario::{VehicleClass, VehicleState};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SensingError {
    #[error("sensor {id}: {msg}")]
    InvalidSpec { id: String, msg: String },
    #[error("sensor {0} is not a camera")]
    NotACamera(String),
    #[error("sensor {0} is not a radar")]
    NotARadar(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    Camera,
    Radar,
}

/// Mounting pose. Angles in degrees; yaw 0 looks along `+x`, positive
/// pitch tilts the boresight towards the road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mounting {
    pub position: [f64; 3],
    #[serde(default)]
    pub yaw_deg: f64,
    #[serde(default)]
    pub pitch_deg: f64,
    #[serde(default)]
    pub roll_deg: f64,
}

impl Mounting {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform::from_parts(
            camera_rotation(self.yaw_deg.to_radians(), self.pitch_deg.to_radians(), self.roll_deg.to_radians()),
            Vector3::from(self.position),
        )
    }

    pub fn ground_position(&self) -> Point2<f64> {
        Point2::new(self.position[0], self.position[1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraParams {
    pub intrinsics: Intrinsics,
    /// Gaussian noise on each box edge (px).
    pub sigma_px: f64,
    pub p_detect: f64,
    /// Expected clutter boxes per frame.
    pub clutter_rate: f64,
    /// Vehicles farther than this (horizontal distance, m) are not detected.
    pub max_range: f64,
    /// Boxes shorter than this (px) are not detected.
    pub min_box_height: f64,
    /// Boxes cut by the image border below this visible share are not detected.
    pub min_visible_fraction: f64,
    /// A vehicle whose box is covered beyond this share by a nearer box is dropped.
    pub occlusion_threshold: f64,
    /// Row-stochastic confusion matrix indexed by true class, then reported class.
    pub confusion: [[f64; 4]; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadarParams {
    /// Half opening angle of the azimuth sector (deg).
    pub half_angle_deg: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub sigma_pos: f64,
    pub sigma_vel: f64,
    pub p_detect: f64,
    pub clutter_rate: f64,
    /// Clutter velocities are uniform in `[-v, v]` per axis.
    pub clutter_speed_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SensorModel {
    Camera(CameraParams),
    Radar(RadarParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub id: String,
    pub mp_id: String,
    /// Frame rate (Hz).
    pub rate: f64,
    pub mounting: Mounting,
    pub model: SensorModel,
}

impl SensorSpec {
    pub fn kind(&self) -> SensorKind {
        match self.model {
            SensorModel::Camera(_) => SensorKind::Camera,
            SensorModel::Radar(_) => SensorKind::Radar,
        }
    }

    pub fn p_detect(&self) -> f64 {
        match &self.model {
            SensorModel::Camera(c) => c.p_detect,
            SensorModel::Radar(r) => r.p_detect,
        }
    }

    pub fn clutter_rate(&self) -> f64 {
        match &self.model {
            SensorModel::Camera(c) => c.clutter_rate,
            SensorModel::Radar(r) => r.clutter_rate,
        }
    }

    pub fn validate(&self) -> Result<(), SensingError> {
        let bad = |msg: &str| {
            Err(SensingError::InvalidSpec {
                id: self.id.clone(),
                msg: msg.to_string(),
            })
        };
        if self.id.is_empty() {
            return bad("empty sensor id");
        }
        if !(self.rate > 0.0) {
            return bad("rate must be positive");
        }
        if !self.mounting.position.iter().all(|v| v.is_finite()) {
            return bad("mounting position must be finite");
        }
        let p_d = self.p_detect();
        if !(p_d > 0.0 && p_d <= 1.0) {
            return bad("p_detect must lie in (0, 1]");
        }
        if !(self.clutter_rate() >= 0.0) {
            return bad("clutter_rate must be non-negative");
        }
        match &self.model {
            SensorModel::Camera(c) => {
                c.intrinsics.validate()?;
                if !(c.sigma_px >= 0.0 && c.max_range > 0.0 && c.min_box_height >= 0.0) {
                    return bad("camera noise, range and box limits must be non-negative");
                }
                if !(0.0..=1.0).contains(&c.min_visible_fraction) || !(0.0..=1.0).contains(&c.occlusion_threshold) {
                    return bad("visibility fractions must lie in [0, 1]");
                }
                for row in &c.confusion {
                    let s: f64 = row.iter().sum();
                    if row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-9 {
                        return bad("confusion rows must be probability vectors");
                    }
                }
                if !(self.mounting.position[2] > 0.0) {
                    return bad("cameras must be mounted above the road");
                }
            }
            SensorModel::Radar(r) => {
                if !(r.sigma_pos >= 0.0 && r.sigma_vel >= 0.0 && r.clutter_speed_max >= 0.0) {
                    return bad("radar noise must be non-negative");
                }
                if !(r.min_range >= 0.0 && r.max_range > r.min_range) {
                    return bad("radar ranges must satisfy 0 <= min_range < max_range");
                }
                if !(r.half_angle_deg > 0.0 && r.half_angle_deg <= 180.0) {
                    return bad("radar half angle must lie in (0, 180]");
                }
            }
        }
        Ok(())
    }

    pub fn camera_model(&self) -> Result<CameraModel, SensingError> {
        match &self.model {
            SensorModel::Camera(c) => Ok(CameraModel::new(c.intrinsics, self.mounting.transform())?),
            SensorModel::Radar(_) => Err(SensingError::NotACamera(self.id.clone())),
        }
    }

    /// Area of the road surface the sensor can report measurements from (m²).
    pub fn surveillance_area(&self) -> Result<f64, SensingError> {
        match &self.model {
            SensorModel::Camera(c) => {
                let cam = self.camera_model()?;
                Ok(polygon_area(&ground_footprint(&cam, c.max_range, 64)))
            }
            SensorModel::Radar(r) => {
                Ok(r.half_angle_deg.to_radians() * (r.max_range * r.max_range - r.min_range * r.min_range))
            }
        }
    }

    /// Uniform clutter intensity over the surveillance area (1/m²).
    pub fn clutter_density(&self) -> Result<f64, SensingError> {
        let area = self.surveillance_area()?;
        if area <= 0.0 {
            return Err(SensingError::InvalidSpec {
                id: self.id.clone(),
                msg: "surveillance area is empty".into(),
            });
        }
        Ok(self.clutter_rate() / area)
    }
}

/// Small pose error, e.g. from gantry vibration. Angles in degrees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PosePerturbation {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub roll_deg: f64,
    pub translation: [f64; 3],
}

/// Returns `spec` with its mounting disturbed by `delta`.
pub fn perturb_pose(spec: &SensorSpec, delta: &PosePerturbation) -> SensorSpec {
    let mut out = spec.clone();
    let m = &mut out.mounting;
    m.yaw_deg += delta.yaw_deg;
    m.pitch_deg += delta.pitch_deg;
    m.roll_deg += delta.roll_deg;
    for (p, d) in m.position.iter_mut().zip(delta.translation) {
        *p += d;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Camera {
        bbox: ImageBox,
        class: VehicleClass,
        confidence: f64,
    },
    Radar {
        /// `(x, y, vx, vy)` in the world frame.
        state: [f64; 4],
    },
}

/// One raw sensor output. `is_clutter` is bookkeeping for debug logs; it
/// is never forwarded to the tracker.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub sensor_id: String,
    pub t: f64,
    pub payload: Payload,
    pub is_clutter: bool,
}

/// A world-frame measurement as consumed by the tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub position: [f64; 2],
    pub velocity: Option<[f64; 2]>,
    pub class: Option<VehicleClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementFrame {
    pub sensor_id: String,
    pub kind: SensorKind,
    pub t: f64,
    pub measurements: Vec<Measurement>,
}

/// Camera detections that could not be placed on the road.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DropCounts {
    pub no_intersection: u64,
    pub out_of_range: u64,
}

fn sample_row<R: Rng + ?Sized>(row: &[f64; 4], rng: &mut R) -> VehicleClass {
    let mut r = rng.random::<f64>();
    for (i, p) in row.iter().enumerate() {
        if r < *p {
            return VehicleClass::from_index(i).unwrap_or(VehicleClass::Car);
        }
        r -= p;
    }
    // rounding leftovers go to the last non-zero entry
    let last = row.iter().rposition(|p| *p > 0.0).unwrap_or(0);
    VehicleClass::from_index(last).unwrap_or(VehicleClass::Car)
}

fn poisson_count<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> u64 {
    if rate <= 0.0 {
        0
    } else {
        Poisson::new(rate).map(|d| d.sample(rng) as u64).unwrap_or(0)
    }
}

/// A camera with its projection model resolved.
#[derive(Debug, Clone)]
pub struct CameraSensor {
    pub spec: SensorSpec,
    pub params: CameraParams,
    pub camera: CameraModel,
}

impl CameraSensor {
    pub fn new(spec: SensorSpec) -> Result<Self, SensingError> {
        spec.validate()?;
        let camera = spec.camera_model()?;
        let params = match &spec.model {
            SensorModel::Camera(c) => c.clone(),
            SensorModel::Radar(_) => return Err(SensingError::NotACamera(spec.id.clone())),
        };
        Ok(Self { spec, params, camera })
    }

    fn ground_range(&self, x: f64, y: f64) -> f64 {
        let c = self.camera.center();
        (x - c.x).hypot(y - c.y)
    }

    /// Noise-free boxes of the vehicles this camera can currently see,
    /// after range, visibility and occlusion checks. Returned with the
    /// index of the vehicle in `vehicles`.
    pub fn visible_boxes(&self, vehicles: &[VehicleState]) -> Vec<(usize, ImageBox)> {
        let p = &self.params;
        let mut candidates: Vec<(f64, usize, ImageBox)> = Vec::new();
        for (i, v) in vehicles.iter().enumerate() {
            if self.ground_range(v.x, v.y) > p.max_range {
                continue;
            }
            let corners = vehicle_cuboid(Point2::new(v.x, v.y), v.heading(), v.length, v.width, v.height);
            let Ok(pb) = project_vehicle_to_box(&self.camera, &corners) else {
                continue;
            };
            if pb.out_of_view || pb.partially_behind {
                continue;
            }
            if pb.visible_fraction() < p.min_visible_fraction || pb.clipped.height() < p.min_box_height {
                continue;
            }
            let depth = self.camera.to_camera(&nalgebra::Point3::new(v.x, v.y, 0.5 * v.height)).z;
            candidates.push((depth, i, pb.clipped));
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out = Vec::with_capacity(candidates.len());
        for (k, (_, i, bbox)) in candidates.iter().enumerate() {
            let area = bbox.area();
            let covered = candidates[..k]
                .iter()
                .map(|(_, _, nearer)| if area > 0.0 { bbox.intersection_area(nearer) / area } else { 0.0 })
                .fold(0.0, f64::max);
            if covered > p.occlusion_threshold {
                continue;
            }
            out.push((*i, *bbox));
        }
        out
    }

    /// Emulated detector output for one frame.
    pub fn observe<R: Rng + ?Sized, C: Rng + ?Sized>(
        &self,
        t: f64,
        vehicles: &[VehicleState],
        rng: &mut R,
        clutter_rng: &mut C,
    ) -> Vec<Detection> {
        let p = &self.params;
        let (w, h) = (p.intrinsics.width, p.intrinsics.height);
        let noise = Normal::new(0.0, p.sigma_px.max(0.0)).expect("finite sigma");
        let mut out = Vec::new();
        for (i, bbox) in self.visible_boxes(vehicles) {
            if rng.random::<f64>() >= p.p_detect {
                continue;
            }
            let noisy = if p.sigma_px > 0.0 {
                ImageBox::new(
                    bbox.u_min + noise.sample(rng),
                    bbox.v_min + noise.sample(rng),
                    bbox.u_max + noise.sample(rng),
                    bbox.v_max + noise.sample(rng),
                )
                .clip(w, h)
            } else {
                bbox
            };
            let class = sample_row(&p.confusion[vehicles[i].class.index()], rng);
            let confidence = rng.random_range(0.6..1.0);
            out.push(Detection {
                sensor_id: self.spec.id.clone(),
                t,
                payload: Payload::Camera {
                    bbox: noisy,
                    class,
                    confidence,
                },
                is_clutter: false,
            });
        }
        for _ in 0..poisson_count(p.clutter_rate, clutter_rng) {
            let uc = clutter_rng.random_range(0.0..w);
            let vc = clutter_rng.random_range(0.0..h);
            let bw = clutter_rng.random_range(20.0..200.0);
            let bh = bw * clutter_rng.random_range(0.5..1.0);
            let bbox = ImageBox::new(uc - 0.5 * bw, vc - 0.5 * bh, uc + 0.5 * bw, vc + 0.5 * bh).clip(w, h);
            let class = VehicleClass::ALL[clutter_rng.random_range(0..4)];
            let confidence = clutter_rng.random_range(0.3..0.7);
            out.push(Detection {
                sensor_id: self.spec.id.clone(),
                t,
                payload: Payload::Camera { bbox, class, confidence },
                is_clutter: true,
            });
        }
        out
    }

    /// Casts camera boxes onto the road. Boxes whose ray misses the road or
    /// lands beyond the camera's range are counted and dropped.
    pub fn to_world(&self, t: f64, detections: &[Detection]) -> (MeasurementFrame, DropCounts) {
        let mut drops = DropCounts::default();
        let mut measurements = Vec::with_capacity(detections.len());
        for d in detections {
            let Payload::Camera { bbox, class, .. } = d.payload else {
                continue;
            };
            match backproject_box(&self.camera, &bbox) {
                Ok(p) => {
                    if self.ground_range(p.x, p.y) > self.params.max_range {
                        drops.out_of_range += 1;
                    } else {
                        measurements.push(Measurement {
                            position: [p.x, p.y],
                            velocity: None,
                            class: Some(class),
                        });
                    }
                }
                Err(_) => drops.no_intersection += 1,
            }
        }
        (
            MeasurementFrame {
                sensor_id: self.spec.id.clone(),
                kind: SensorKind::Camera,
                t,
                measurements,
            },
            drops,
        )
    }
}

/// A radar with its sector resolved.
#[derive(Debug, Clone)]
pub struct RadarSensor {
    pub spec: SensorSpec,
    pub params: RadarParams,
}

impl RadarSensor {
    pub fn new(spec: SensorSpec) -> Result<Self, SensingError> {
        spec.validate()?;
        let params = match &spec.model {
            SensorModel::Radar(r) => r.clone(),
            SensorModel::Camera(_) => return Err(SensingError::NotARadar(spec.id.clone())),
        };
        Ok(Self { spec, params })
    }

    pub fn in_sector(&self, x: f64, y: f64) -> bool {
        let o = self.spec.mounting.ground_position();
        let (dx, dy) = (x - o.x, y - o.y);
        let r = dx.hypot(dy);
        if r < self.params.min_range || r > self.params.max_range {
            return false;
        }
        let yaw = self.spec.mounting.yaw_deg.to_radians();
        let bearing = (dy.atan2(dx) - yaw + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI)
            - std::f64::consts::PI;
        bearing.abs() <= self.params.half_angle_deg.to_radians()
    }

    pub fn observe<R: Rng + ?Sized, C: Rng + ?Sized>(
        &self,
        t: f64,
        vehicles: &[VehicleState],
        rng: &mut R,
        clutter_rng: &mut C,
    ) -> Vec<Detection> {
        let p = &self.params;
        let pos_noise = Normal::new(0.0, p.sigma_pos).expect("finite sigma");
        let vel_noise = Normal::new(0.0, p.sigma_vel).expect("finite sigma");
        let mut out = Vec::new();
        for v in vehicles {
            if !self.in_sector(v.x, v.y) || rng.random::<f64>() >= p.p_detect {
                continue;
            }
            let state = [
                v.x + pos_noise.sample(rng),
                v.y + pos_noise.sample(rng),
                v.vx + vel_noise.sample(rng),
                v.vy + vel_noise.sample(rng),
            ];
            out.push(Detection {
                sensor_id: self.spec.id.clone(),
                t,
                payload: Payload::Radar { state },
                is_clutter: false,
            });
        }
        let o = self.spec.mounting.ground_position();
        let yaw = self.spec.mounting.yaw_deg.to_radians();
        let half = p.half_angle_deg.to_radians();
        for _ in 0..poisson_count(p.clutter_rate, clutter_rng) {
            let r2 = clutter_rng.random_range(p.min_range * p.min_range..=p.max_range * p.max_range);
            let r = r2.sqrt();
            let theta = yaw + clutter_rng.random_range(-half..=half);
            let vmax = p.clutter_speed_max;
            let (vx, vy) = if vmax > 0.0 {
                (clutter_rng.random_range(-vmax..=vmax), clutter_rng.random_range(-vmax..=vmax))
            } else {
                (0.0, 0.0)
            };
            out.push(Detection {
                sensor_id: self.spec.id.clone(),
                t,
                payload: Payload::Radar {
                    state: [o.x + r * theta.cos(), o.y + r * theta.sin(), vx, vy],
                },
                is_clutter: true,
            });
        }
        out
    }

    pub fn to_world(&self, t: f64, detections: &[Detection]) -> MeasurementFrame {
        let measurements = detections
            .iter()
            .filter_map(|d| match d.payload {
                Payload::Radar { state } => Some(Measurement {
                    position: [state[0], state[1]],
                    velocity: Some([state[2], state[3]]),
                    class: None,
                }),
                Payload::Camera { .. } => None,
            })
            .collect();
        MeasurementFrame {
            sensor_id: self.spec.id.clone(),
            kind: SensorKind::Radar,
            t,
            measurements,
        }
    }
}

/// Either kind of sensor, ready to observe.
#[derive(Debug, Clone)]
pub enum Sensor {
    Camera(CameraSensor),
    Radar(RadarSensor),
}

impl Sensor {
    pub fn new(spec: SensorSpec) -> Result<Self, SensingError> {
        match spec.kind() {
            SensorKind::Camera => Ok(Sensor::Camera(CameraSensor::new(spec)?)),
            SensorKind::Radar => Ok(Sensor::Radar(RadarSensor::new(spec)?)),
        }
    }

    pub fn spec(&self) -> &SensorSpec {
        match self {
            Sensor::Camera(c) => &c.spec,
            Sensor::Radar(r) => &r.spec,
        }
    }

    pub fn observe<R: Rng + ?Sized, C: Rng + ?Sized>(
        &self,
        t: f64,
        vehicles: &[VehicleState],
        rng: &mut R,
        clutter_rng: &mut C,
    ) -> Vec<Detection> {
        match self {
            Sensor::Camera(c) => c.observe(t, vehicles, rng, clutter_rng),
            Sensor::Radar(r) => r.observe(t, vehicles, rng, clutter_rng),
        }
    }

    pub fn to_world(&self, t: f64, detections: &[Detection]) -> (MeasurementFrame, DropCounts) {
        match self {
            Sensor::Camera(c) => c.to_world(t, detections),
            Sensor::Radar(r) => (r.to_world(t, detections), DropCounts::default()),
        }
    }
}

/// Convenience wrapper: camera detections for a ground-truth frame.
pub fn camera_observe<R: Rng + ?Sized>(
    spec: &SensorSpec,
    t: f64,
    vehicles: &[VehicleState],
    rng: &mut R,
) -> Result<Vec<Detection>, SensingError> {
    let cam = CameraSensor::new(spec.clone())?;
    let mut clutter = rand_chacha::ChaCha8Rng::seed_from_u64(rng.random());
    Ok(cam.observe(t, vehicles, rng, &mut clutter))
}

/// Convenience wrapper: radar measurements for a ground-truth frame.
pub fn radar_observe<R: Rng + ?Sized>(
    spec: &SensorSpec,
    t: f64,
    vehicles: &[VehicleState],
    rng: &mut R,
) -> Result<MeasurementFrame, SensingError> {
    let radar = RadarSensor::new(spec.clone())?;
    let mut clutter = rand_chacha::ChaCha8Rng::seed_from_u64(rng.random());
    let dets = radar.observe(t, vehicles, rng, &mut clutter);
    Ok(radar.to_world(t, &dets))
}
