//! Pipeline configuration: one TOML document holding every stage's
//! parameters, the sensor layout and the master seed.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layout::default_layout;
use super::HarnessError;
use crate::evaluation::EvalConfig;
use crate::fusion::FusionConfig;
use crate::scenario::ScenarioConfig;
use crate::sensing::{SensorKind, SensorModel, SensorSpec};
use crate::tracker::{
    PositionModel, PositionNoise, PositionVelocityModel, RangeNoise, SensorObservation, TrackerConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementPoint {
    pub id: String,
    /// Gantry position on the road (m).
    pub position: [f64; 2],
}

/// How the tracker models camera measurement noise on the road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraNoise {
    /// Multiplier on the sensor's pixel noise.
    pub pixel_scale: f64,
    /// Noise floor along the line of sight (m).
    pub floor_range: f64,
    /// Noise floor across the line of sight (m).
    pub floor_cross: f64,
}

impl Default for CameraNoise {
    fn default() -> Self {
        Self {
            pixel_scale: 1.0,
            floor_range: 0.5,
            floor_cross: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerSection {
    pub camera: TrackerConfig,
    pub radar: TrackerConfig,
    /// Take `p_detect` and the clutter density from each sensor's spec
    /// instead of the values above.
    pub sensor_rates: bool,
    pub camera_noise: CameraNoise,
}

impl Default for TrackerSection {
    fn default() -> Self {
        Self {
            camera: TrackerConfig::default(),
            radar: TrackerConfig::default(),
            sensor_rates: true,
            camera_noise: CameraNoise::default(),
        }
    }
}

impl TrackerSection {
    /// Filter parameters for one sensor.
    pub fn for_sensor(&self, spec: &SensorSpec) -> Result<TrackerConfig, HarnessError> {
        let mut cfg = match spec.kind() {
            SensorKind::Camera => self.camera.clone(),
            SensorKind::Radar => self.radar.clone(),
        };
        if self.sensor_rates {
            cfg.p_detect = spec.p_detect();
            cfg.clutter_density = spec.clutter_density().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(cfg)
    }

    /// Observation model matching the sensor.
    pub fn observation(&self, spec: &SensorSpec) -> SensorObservation {
        match &spec.model {
            SensorModel::Camera(c) => SensorObservation::Position(PositionModel {
                noise: PositionNoise::Range(RangeNoise {
                    origin: spec.mounting.position[..2].try_into().expect("two coordinates"),
                    height: spec.mounting.position[2],
                    focal_px: c.intrinsics.fy,
                    sigma_px: c.sigma_px * self.camera_noise.pixel_scale,
                    floor_range: self.camera_noise.floor_range,
                    floor_cross: self.camera_noise.floor_cross,
                }),
            }),
            SensorModel::Radar(r) => SensorObservation::PositionVelocity(PositionVelocityModel {
                sigma_pos: r.sigma_pos,
                sigma_vel: r.sigma_vel,
            }),
        }
    }
}

fn default_seed() -> u64 {
    42
}

fn default_twin_rate() -> f64 {
    5.4
}

fn default_mps() -> Vec<MeasurementPoint> {
    default_layout().0
}

fn default_sensors() -> Vec<SensorSpec> {
    default_layout().1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Digital-twin output rate (Hz).
    #[serde(default = "default_twin_rate")]
    pub twin_rate: f64,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub tracker: TrackerSection,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_mps")]
    pub measurement_points: Vec<MeasurementPoint>,
    #[serde(default = "default_sensors")]
    pub sensors: Vec<SensorSpec>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let (measurement_points, sensors) = default_layout();
        Self {
            seed: default_seed(),
            twin_rate: default_twin_rate(),
            scenario: ScenarioConfig::default(),
            tracker: TrackerSection::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
            measurement_points,
            sensors,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Built-in config unless a path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, HarnessError> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |field: &str, msg: String| Err(HarnessError::Config(format!("{field}: {msg}")));
        if let Err(e) = self.scenario.validate() {
            return err("scenario", e.to_string());
        }
        if !(self.twin_rate > 0.0) || self.scenario.steps_per_sample(self.twin_rate).is_none() {
            return err("twin_rate", "must be positive and a whole number of simulation steps".into());
        }
        for (name, t) in [("tracker.camera", &self.tracker.camera), ("tracker.radar", &self.tracker.radar)] {
            if let Err(e) = t.validate() {
                return err(name, e);
            }
        }
        let n = &self.tracker.camera_noise;
        if !(n.pixel_scale > 0.0 && n.floor_range > 0.0 && n.floor_cross > 0.0) {
            return err("tracker.camera_noise", "scale and floors must be positive".into());
        }
        if let Err(e) = self.fusion.validate() {
            return err("fusion", e.to_string());
        }
        if let Err(e) = self.eval.validate() {
            return err("eval", e.to_string());
        }
        let mut mp_ids = BTreeSet::new();
        for (i, mp) in self.measurement_points.iter().enumerate() {
            if mp.id.is_empty() || !mp_ids.insert(mp.id.as_str()) {
                return err(&format!("measurement_points[{i}]"), format!("empty or duplicate id '{}'", mp.id));
            }
        }
        let mut ids = BTreeSet::new();
        for (i, s) in self.sensors.iter().enumerate() {
            let field = format!("sensors[{i}]");
            if let Err(e) = s.validate() {
                return err(&field, e.to_string());
            }
            if !ids.insert(s.id.as_str()) {
                return err(&field, format!("duplicate sensor id '{}'", s.id));
            }
            if !mp_ids.contains(s.mp_id.as_str()) {
                return err(&field, format!("unknown measurement point '{}'", s.mp_id));
            }
            if self.scenario.steps_per_sample(s.rate).is_none() {
                return err(&field, format!("rate {} Hz is not a whole number of simulation steps", s.rate));
            }
            if let Err(e) = s.clutter_density() {
                return err(&field, e.to_string());
            }
        }
        Ok(())
    }

    pub fn sensors_of(&self, mp_id: &str) -> Vec<&SensorSpec> {
        self.sensors.iter().filter(|s| s.mp_id == mp_id).collect()
    }

    pub fn sensor(&self, id: &str) -> Option<&SensorSpec> {
        self.sensors.iter().find(|s| s.id == id)
    }

    /// Simulation steps at which a stream of the given rate samples.
    pub fn sample_steps(&self, rate: f64) -> Vec<u64> {
        let every = self.scenario.steps_per_sample(rate).unwrap_or(1);
        (0..self.scenario.recorded_steps()).step_by(every as usize).collect()
    }

    pub fn sample_times(&self, rate: f64) -> Vec<f64> {
        self.sample_steps(rate).into_iter().map(|k| k as f64 * self.scenario.dt).collect()
    }

    pub fn twin_times(&self) -> Vec<f64> {
        self.sample_times(self.twin_rate)
    }

    pub fn gt_times(&self) -> Vec<f64> {
        self.sample_times(self.scenario.gt_rate)
    }
}
