use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use repeatability::config::{validate_config, RunConfig};
use repeatability::pipeline::{run_subcommand, ExitKind, Outcome, RunOptions, Stage};

/// Synthesize RGB-D data, derive repeatable keypoint labels, and benchmark
/// detector repeatability.
#[derive(Parser, Debug)]
#[command(name = "repeatability", version)]
struct Cli {
    /// Run configuration (TOML). Absent keys take their defaults.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Replace outputs that were produced from different inputs.
    #[arg(long, global = true)]
    force: bool,

    /// Overrides `general.threads`.
    #[arg(short = 'j', long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural scene into a dataset.
    Synth,
    /// Run the configured detectors on every frame.
    Detect,
    /// Voxelize the mesh and paint detections into it.
    Paint,
    /// Derive per-frame labels from the painted map.
    Label,
    /// Evaluate detections and labels on strided frame pairs.
    Eval,
    /// Render evaluation results as text tables and plot data.
    Report,
    /// Run every stage in order.
    All,
    /// Validate the configuration and print it resolved.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig, String> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => String::new(),
    };
    let mut cfg = validate_config(&text).map_err(|e| {
        let origin = cli
            .config
            .as_ref()
            .map_or("<defaults>".into(), |p| p.display().to_string());
        e.0.iter()
            .map(|i| format!("{origin}: {i}"))
            .collect::<Vec<_>>()
            .join("\n")
    })?;
    if let Some(t) = cli.threads {
        cfg.general.threads = t;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                ExitKind::Usage as u8
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(ExitKind::Usage as u8);
        }
    };
    let stages: Vec<Stage> = match cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            return ExitCode::SUCCESS;
        }
        Command::All => Stage::ALL.to_vec(),
        Command::Synth => vec![Stage::Synth],
        Command::Detect => vec![Stage::Detect],
        Command::Paint => vec![Stage::Paint],
        Command::Label => vec![Stage::Label],
        Command::Eval => vec![Stage::Eval],
        Command::Report => vec![Stage::Report],
    };
    let opts = RunOptions { force: cli.force };
    for stage in stages {
        match run_subcommand(stage, &cfg, opts) {
            Ok(Outcome::Ran) => {}
            Ok(Outcome::UpToDate) => eprintln!("{stage}: up to date, skipped"),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(e.exit_code() as u8);
            }
        }
    }
    ExitCode::SUCCESS
}
