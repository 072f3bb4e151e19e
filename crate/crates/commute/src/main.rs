use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commute::config::PipelineConfig;
use commute::par::with_workers;
use commute::pipeline;

/// GPS commute-flow pipeline: pings to tract-to-tract home-work trips.
#[derive(Parser)]
#[command(name = "commute", version, about)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. --set stay.time_threshold_s=1200.
    /// Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Worker threads for per-device stages (0 = runtime default).
    #[arg(short, long, global = true, default_value_t = 0)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse pings and extract per-device stay points.
    ExtractStays,
    /// Infer home and work regions; write the detection funnel.
    InferPlaces,
    /// Aggregate commuters into a tract-pair OD matrix.
    BuildOd,
    /// Compare the OD matrix against a reference flow table.
    Validate,
    /// Estimate commute distance/duration per commuter and summarize.
    RouteStats,
    /// Generate a seeded synthetic world with planted ground truth.
    Synth,
    /// Re-run inference and OD building over a threshold/exponent grid.
    Sweep,
    /// Run the full chain; score recovery when planted truth is present.
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match PipelineConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };

    let result = with_workers(cli.workers, || match cli.command {
        Command::ExtractStays => pipeline::run_extract_stays(&cfg),
        Command::InferPlaces => pipeline::run_infer_places(&cfg),
        Command::BuildOd => pipeline::run_build_od(&cfg),
        Command::Validate => pipeline::run_validate(&cfg),
        Command::RouteStats => pipeline::run_route_stats(&cfg),
        Command::Synth => pipeline::run_synth(&cfg),
        Command::Sweep => pipeline::run_sweep(&cfg),
        Command::All => pipeline::run_all(&cfg),
    });

    match result {
        Ok(artifacts) => {
            for artifact in artifacts {
                println!("wrote {}", cfg.output_dir.join(artifact).display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
