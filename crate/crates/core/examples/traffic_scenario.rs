//! Runs the traffic model for a minute and reports lane occupancy.

use roadtwin::scenario::{ScenarioConfig, World};

fn main() {
    let cfg = ScenarioConfig::default();
    let mut world = World::new(cfg.clone(), 7).unwrap();
    for _ in 0..(60.0 / cfg.dt) as usize {
        world.advance();
    }
    let gt = world.sample_ground_truth();
    println!("t = {:.1} s, {} vehicles on the stretch", gt.t, gt.vehicles.len());
    println!("spawned {}, retired {}", world.spawned(), world.retired());
    for (i, lane) in world.lanes().iter().enumerate() {
        let n = gt.vehicles.iter().filter(|v| (v.y - lane.y).abs() < 0.5 * cfg.lane_width).count();
        println!("lane {i} at y = {:+.2} m: {n}", lane.y);
    }
    if let Some(v) = gt.vehicles.first() {
        println!("first: {:?} at ({:.1}, {:.2}) moving {:.1} m/s", v.class, v.x, v.y, v.vx);
    }
}
