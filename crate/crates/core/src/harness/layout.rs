//! The default two-gantry layout.
//!
//! Two measurement points sit at either end of the stretch. Each looks
//! both ways with a wide near camera, a narrow far camera, a wide
//! short-range radar and a narrow long-range radar.

use super::config::MeasurementPoint;
use crate::geometry::Intrinsics;
use crate::sensing::{CameraParams, Mounting, RadarParams, SensorModel, SensorSpec};
use crate::scenario::ScenarioConfig;

pub const CAMERA_HEIGHT: f64 = 7.0;
pub const RADAR_HEIGHT: f64 = 6.0;
pub const SENSOR_RATE: f64 = 5.4;

const CONFUSION: [[f64; 4]; 4] = [
    [0.95, 0.03, 0.01, 0.01],
    [0.05, 0.90, 0.05, 0.0],
    [0.02, 0.08, 0.90, 0.0],
    [0.10, 0.0, 0.0, 0.90],
];

fn camera(focal: f64, max_range: f64) -> CameraParams {
    CameraParams {
        intrinsics: Intrinsics {
            fx: focal,
            fy: focal,
            cx: 960.0,
            cy: 600.0,
            width: 1920.0,
            height: 1200.0,
        },
        sigma_px: 1.0,
        p_detect: 0.97,
        clutter_rate: 0.3,
        max_range,
        min_box_height: 8.0,
        min_visible_fraction: 0.5,
        occlusion_threshold: 0.6,
        confusion: CONFUSION,
    }
}

fn radar(half_angle_deg: f64, min_range: f64, max_range: f64) -> RadarParams {
    RadarParams {
        half_angle_deg,
        min_range,
        max_range,
        sigma_pos: 2.4,
        sigma_vel: 0.5,
        p_detect: 0.97,
        clutter_rate: 0.3,
        clutter_speed_max: 40.0,
    }
}

/// Eight sensors for one gantry at `x`. `inward_yaw` points at the other gantry.
fn gantry(mp: &str, x: f64, inward_yaw: f64) -> Vec<SensorSpec> {
    let mut out = Vec::new();
    for (dir, yaw) in [("in", inward_yaw), ("out", inward_yaw + 180.0)] {
        let yaw = if yaw >= 360.0 { yaw - 360.0 } else { yaw };
        let spec = |kind: &str, z: f64, pitch: f64, model: SensorModel| SensorSpec {
            id: format!("{mp}_{dir}_{kind}"),
            mp_id: mp.to_string(),
            rate: SENSOR_RATE,
            mounting: Mounting {
                position: [x, 0.0, z],
                yaw_deg: yaw,
                pitch_deg: pitch,
                roll_deg: 0.0,
            },
            model,
        };
        out.push(spec("cam_near", CAMERA_HEIGHT, 15.0, SensorModel::Camera(camera(1365.0, 120.0))));
        out.push(spec("cam_far", CAMERA_HEIGHT, 4.0, SensorModel::Camera(camera(4000.0, 300.0))));
        out.push(spec("radar_near", RADAR_HEIGHT, 0.0, SensorModel::Radar(radar(60.0, 1.0, 120.0))));
        out.push(spec("radar_far", RADAR_HEIGHT, 0.0, SensorModel::Radar(radar(10.0, 20.0, 250.0))));
    }
    out
}

/// Measurement points and sensors for the default scenario.
pub fn default_layout() -> (Vec<MeasurementPoint>, Vec<SensorSpec>) {
    let length = ScenarioConfig::default().stretch_length;
    let mps = vec![
        MeasurementPoint {
            id: "mp1".into(),
            position: [0.0, 0.0],
        },
        MeasurementPoint {
            id: "mp2".into(),
            position: [length, 0.0],
        },
    ];
    let mut sensors = gantry("mp1", 0.0, 0.0);
    sensors.extend(gantry("mp2", length, 180.0));
    (mps, sensors)
}
