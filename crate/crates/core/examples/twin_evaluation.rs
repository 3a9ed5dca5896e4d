//! Scores a noisy copy of the ground truth against the original.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use roadtwin::evaluation::{evaluate, EvalConfig, TwinFrame, TwinObject};
use roadtwin::harness::{simulate, summary_table, PipelineConfig};
use roadtwin::seed;

fn main() {
    let mut cfg = PipelineConfig::default();
    cfg.scenario.duration = 60.0;
    let gt = simulate(&cfg).unwrap().ground_truth;
    let mut rng = seed::stream(1, "noise");
    let (nx, ny) = (Normal::new(0.0, 1.5).unwrap(), Normal::new(0.0, 0.3).unwrap());
    let twin: Vec<TwinFrame> = gt
        .iter()
        .map(|f| TwinFrame {
            t: f.t,
            objects: f
                .vehicles
                .iter()
                .filter_map(|v| {
                    (rng.random::<f64>() < 0.95).then(|| TwinObject {
                        gid: v.id,
                        x: v.x + nx.sample(&mut rng),
                        y: v.y + ny.sample(&mut rng),
                        vx: v.vx,
                        vy: v.vy,
                        class: Some(v.class),
                    })
                })
                .collect(),
        })
        .collect();
    let eval = EvalConfig {
        boundary_band: 10.0,
        ..cfg.eval.clone()
    };
    let report = evaluate(&gt, &twin, 0.5, &eval).unwrap();
    println!("{}", summary_table(&report));
}
