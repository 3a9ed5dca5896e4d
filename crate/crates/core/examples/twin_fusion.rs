//! Two-level fusion of all sensors into a globally labeled twin.

use roadtwin::harness::{fuse_twin, simulate, track_all, PipelineConfig};

fn main() {
    let mut cfg = PipelineConfig::default();
    cfg.scenario.duration = 30.0;
    let sim = simulate(&cfg).unwrap();
    let logs = track_all(&cfg, &sim.detections).unwrap();
    let twin = fuse_twin(&cfg, &logs).unwrap();
    for frame in twin.iter().step_by(27) {
        let both = frame.tracks.iter().filter(|t| t.contributors.len() > 1).count();
        println!("t = {:6.2} s: {:2} tracks, {:2} seen by more than one MP", frame.t, frame.tracks.len(), both);
    }
    let mut gids: Vec<u64> = twin.iter().flat_map(|f| f.tracks.iter().map(|t| t.gid)).collect();
    gids.sort_unstable();
    gids.dedup();
    println!("{} global ids over {} ticks", gids.len(), twin.len());
}
