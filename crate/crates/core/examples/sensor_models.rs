//! One ground-truth frame seen by every sensor of the default layout.

use roadtwin::harness::PipelineConfig;
use roadtwin::scenario::World;
use roadtwin::seed;
use roadtwin::sensing::Sensor;

fn main() {
    let cfg = PipelineConfig::default();
    let mut world = World::new(cfg.scenario.clone(), cfg.seed).unwrap();
    for _ in 0..200 {
        world.advance();
    }
    let vehicles = world.snapshot();
    println!("{} vehicles simulated", vehicles.len());
    for spec in &cfg.sensors {
        let sensor = Sensor::new(spec.clone()).unwrap();
        let mut rng = seed::stream(cfg.seed, &spec.id);
        let mut clutter = seed::stream(cfg.seed, &format!("clutter:{}", spec.id));
        let dets = sensor.observe(world.time(), &vehicles, &mut rng, &mut clutter);
        let (frame, drops) = sensor.to_world(world.time(), &dets);
        let false_alarms = dets.iter().filter(|d| d.is_clutter).count();
        println!(
            "{:>10} ({:?}): {} detections, {} clutter, {} on the road, dropped {:?}",
            spec.id,
            spec.kind(),
            dets.len(),
            false_alarms,
            frame.measurements.len(),
            drops
        );
    }
}
