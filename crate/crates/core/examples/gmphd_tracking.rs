//! Labeled GM-PHD tracking of a single simulated sensor stream.

use roadtwin::harness::{simulate, track_sensor, PipelineConfig};

fn main() {
    let mut cfg = PipelineConfig::default();
    cfg.scenario.duration = 30.0;
    let sim = simulate(&cfg).unwrap();
    let stream = &sim.detections[0];
    let spec = cfg.sensor(&stream.sensor_id).unwrap();
    let (log, drops) = track_sensor(&cfg, spec, &stream.frames).unwrap();
    println!("sensor {} ({:?}), {} frames, drops {:?}", spec.id, spec.kind(), log.frames.len(), drops);
    for (t, tracks) in log.frames.iter().step_by(20) {
        let labels: Vec<u64> = tracks.iter().map(|t| t.label).collect();
        println!("t = {t:6.2} s: {:2} confirmed {:?}", tracks.len(), labels);
    }
    let mut all: Vec<u64> = log.frames.iter().flat_map(|(_, ts)| ts.iter().map(|t| t.label)).collect();
    all.sort_unstable();
    all.dedup();
    println!("{} distinct labels", all.len());
}
