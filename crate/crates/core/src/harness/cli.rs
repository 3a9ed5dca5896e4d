//! Command-line front end; `main` only forwards to [`run`].

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::config::PipelineConfig;
use super::pipeline::{
    evaluate_run, fuse_twin, read_detections, read_ground_truth, read_tracks, read_twin, run_pipeline, simulate,
    summary_table, track_all, write_detections, write_error_map, write_ground_truth, write_report, write_tracks,
    write_twin, SensorTrackLog,
};
use super::HarnessError;
use crate::evaluation::TwinFrame;

#[derive(Debug, Parser)]
#[command(name = "roadtwin", version, about = "Simulated roadside sensor fusion and digital-twin evaluation")]
pub struct Cli {
    /// Worker threads for per-sensor and per-MP stages (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline config (TOML). The built-in default is used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate traffic and sensors: ground_truth.jsonl and detections.jsonl.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run one GM-PHD tracker per sensor of a measurement point.
    Track {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        mp: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse track logs of all measurement points into twin.jsonl.
    Fuse {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, num_args = 1.., required = true)]
        tracks: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a twin against ground truth.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        twin: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Error map CSV; defaults to error_map.csv next to the report.
        #[arg(long)]
        error_map: Option<PathBuf>,
        /// Also report recall without ground truth this close to the
        /// stretch ends (m).
        #[arg(long, num_args = 0..=1, default_missing_value = "10")]
        exclude_boundary: Option<f64>,
    },
    /// All stages plus a run manifest.
    Pipeline {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, num_args = 0..=1, default_missing_value = "10")]
        exclude_boundary: Option<f64>,
    },
    /// Print the built-in config as TOML.
    DefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(c: &ConfigArg, seed: Option<u64>) -> Result<PipelineConfig, HarnessError> {
    let mut cfg = PipelineConfig::load_or_default(c.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn mkdir(p: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(p).map_err(|e| HarnessError::io(p, e))
}

pub fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Simulate { config, seed, out_dir } => {
            let cfg = load(&config, seed)?;
            mkdir(&out_dir)?;
            let sim = simulate(&cfg)?;
            write_ground_truth(&out_dir.join("ground_truth.jsonl"), &sim.ground_truth)?;
            write_detections(&out_dir.join("detections.jsonl"), &sim.detections)?;
            println!(
                "{} ground-truth observations in {} frames",
                sim.observation_count(),
                sim.ground_truth.len()
            );
        }
        Command::Track {
            config,
            detections,
            mp,
            out,
        } => {
            let cfg = load(&config, None)?;
            let specs = cfg.sensors_of(&mp);
            if specs.is_empty() {
                return Err(HarnessError::Config(format!("no sensors for measurement point '{mp}'")));
            }
            let streams = read_detections(&detections, &cfg, &specs)?;
            let logs = track_all(&cfg, &streams)?;
            let refs: Vec<&SensorTrackLog> = logs.iter().collect();
            write_tracks(&out, &mp, &refs)?;
        }
        Command::Fuse { config, tracks, out } => {
            let cfg = load(&config, None)?;
            let logs = read_tracks(&tracks, &cfg)?;
            write_twin(&out, &fuse_twin(&cfg, &logs)?)?;
        }
        Command::Evaluate {
            config,
            truth,
            twin,
            report,
            error_map,
            exclude_boundary,
        } => {
            let cfg = load(&config, None)?;
            let gt = read_ground_truth(&truth, &cfg)?;
            let frames: Vec<TwinFrame> = read_twin(&twin, &cfg)?;
            let r = evaluate_run(&cfg, &gt, &frames, exclude_boundary)?;
            write_report(&report, &r)?;
            let map = error_map.unwrap_or_else(|| report.with_file_name("error_map.csv"));
            write_error_map(&map, &r)?;
            print!("{}", summary_table(&r));
        }
        Command::Pipeline {
            config,
            seed,
            out_dir,
            exclude_boundary,
        } => {
            let cfg = load(&config, seed)?;
            let outcome = run_pipeline(&cfg, &out_dir, exclude_boundary)?;
            print!("{}", summary_table(&outcome.report));
        }
        Command::DefaultConfig { out } => {
            let text = PipelineConfig::default().to_toml_string();
            match out {
                Some(p) => std::fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Parses arguments, runs, and maps failures to exit codes.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
