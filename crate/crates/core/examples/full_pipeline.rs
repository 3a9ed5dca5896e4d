//! Runs simulate, track, fuse and evaluate on the default configuration.

use roadtwin::harness::{run_pipeline, summary_table, PipelineConfig};

fn main() {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("roadtwin_run"));
    let cfg = PipelineConfig::default();
    let outcome = run_pipeline(&cfg, &out, Some(10.0)).unwrap();
    println!("{}", summary_table(&outcome.report));
    println!("{} ground-truth observations", outcome.ground_truth_observations);
    for (stage, secs) in &outcome.manifest.stage_seconds {
        println!("{stage:>9}: {secs:.2} s");
    }
    println!("artifacts in {}", out.display());
}
