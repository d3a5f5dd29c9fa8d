use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use strata_cli::ablate::{ablate, Axis};
use strata_cli::config::ExperimentConfig;
use strata_cli::pipeline::{resume, run, write_json};
use strata_cli::plots::heatmap;
use strata_cli::{report, CliError};
use strata_core::channel_graph::{normalize_per_channel, spectral_cluster, ConnectivityMatrix, SpectralConfig};

#[derive(Parser)]
#[command(
    name = "strata",
    version,
    about = "Channel-group discovery and self-supervised pretraining for intracranial recordings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every enabled stage of an experiment.
    Run {
        /// Experiment configuration (TOML). Not needed with --resume.
        #[arg(required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Parent directory of run directories.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Override a configuration key, e.g. --set vqvae.dpq.groups=2.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Continue a halted run directory instead of starting a new one.
        #[arg(long, conflicts_with_all = ["config", "set"])]
        resume: Option<PathBuf>,
    },
    /// Repeat the experiment for each value of one quantizer knob.
    Ablate {
        config: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated knob values.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<usize>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Spectral clustering of a saved connectivity matrix.
    Cluster {
        /// Connectivity manifest written by a run (cluster/connectivity.json).
        connectivity: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 10)]
        restarts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the clustering as JSON here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also draw the per-channel normalized matrix as an SVG heatmap.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Rebuild report.md and report.json of a run directory.
    Report { run_dir: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { resume: Some(dir), .. } => {
            let dir = resume(&dir)?;
            println!("{}", dir.display());
        }
        Command::Run { config, out, set, resume: None } => {
            let path = config.expect("clap requires a config without --resume");
            let cfg = ExperimentConfig::load(&path, &set)?;
            let dir = run(&cfg, &out)?;
            println!("{}", dir.display());
        }
        Command::Ablate { config, axis, values, out, set } => {
            let cfg = ExperimentConfig::load(&config, &set)?;
            let dir = ablate(&cfg, axis, &values, &out)?;
            println!("{}", dir.display());
        }
        Command::Cluster { connectivity, k, restarts, seed, out, heatmap: svg } => {
            let conn = ConnectivityMatrix::read(&connectivity).map_err(|e| CliError::Config(e.to_string()))?;
            let clustering = spectral_cluster(&conn.p, &SpectralConfig { k, restarts, seed })
                .map_err(|e| CliError::Config(e.to_string()))?;
            if let Some(svg) = svg {
                heatmap(&svg, "channel connectivity", &normalize_per_channel(&conn.p))?;
            }
            match out {
                Some(path) => write_json(&path, &clustering)?,
                None => println!("{}", serde_json::to_string(&clustering).expect("clustering serializes")),
            }
        }
        Command::Report { run_dir } => {
            let summary = report::write(&run_dir)?;
            print!("{}", report::render(&summary));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
