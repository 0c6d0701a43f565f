mod commands;
mod config;
mod failure;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use failure::Failure;
use orient_core::lifter::LiftMode;

const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (config schema 1)");

/// Orientation-conditioned diffusion and radiance-field lifting on
/// synthetic scenes.
#[derive(Parser)]
#[command(name = "orient", version = VERSION, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON); defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config field, e.g. `--set lift.dbp.M=4`
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig, Failure> {
        let all: Vec<String> = self.overrides.iter().chain(extra).cloned().collect();
        ExperimentConfig::load(self.config.as_deref(), &all)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the multi-view training dataset
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional denoiser on a dataset
    TrainDenoiser {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Run directory; the checkpoint is written as denoiser.ograd
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in --out
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps; resume later with --resume
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Sample images of one class at several azimuths
    #[command(name = "sample-2d")]
    Sample2d {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "class")]
        class_id: usize,
        /// Comma-separated azimuths in degrees
        #[arg(long, value_delimiter = ',', default_value = "0,90,180,270", allow_hyphen_values = true)]
        azimuths: Vec<f64>,
        #[arg(long, default_value_t = 25.0)]
        elevation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Optimize a radiance field for one class under the prior
    Lift {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "class")]
        class_id: Option<usize>,
        #[arg(long)]
        mode: Option<LiftMode>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Zero the prior's pose projection
        #[arg(long)]
        ablate_pose: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metric report for lift runs
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long = "run-dir", required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Prior used for score consistency; defaults to the one each run used
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare the cost of lift runs
    Bench {
        /// Run logs or run directories
        #[arg(long, num_args = 1.., required = true)]
        runlogs: Vec<PathBuf>,
        /// Comma-separated row labels, one per run log
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("ORIENT_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure::config(format!("ORIENT_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::config(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.cmd {
        Command::GenData { config, out } => commands::gen_data(&config.load(&[])?, &out),
        Command::TrainDenoiser { config, data, out, resume, max_steps } => {
            commands::train_denoiser(&config.load(&[])?, &data, &out, resume, max_steps)
        }
        Command::Sample2d { config, ckpt, class_id, azimuths, elevation, seed, steps, guidance, out } => {
            let cfg = config.load(&[])?;
            commands::sample_2d(
                &cfg,
                &commands::SampleArgs { ckpt: &ckpt, class_id, azimuths_deg: &azimuths, elevation_deg: elevation, seed, steps, guidance, out: &out },
            )
        }
        Command::Lift { config, ckpt, class_id, mode, rounds, ablate_pose, out } => {
            let mut extra = Vec::new();
            if let Some(c) = class_id {
                extra.push(format!("lift.class_id={c}"));
            }
            if let Some(m) = mode {
                extra.push(format!("lift.mode={}", if m == LiftMode::Sds { "sds" } else { "dbp" }));
            }
            if let Some(r) = rounds {
                extra.push(format!("lift.total_rounds={r}"));
            }
            commands::lift(&config.load(&extra)?, &ckpt, ablate_pose, &out)
        }
        Command::Eval { config, run_dirs, data, ckpt, out } => commands::eval(&config.load(&[])?, &run_dirs, &data, ckpt.as_deref(), &out),
        Command::Bench { runlogs, labels, out } => commands::bench(&runlogs, &labels, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
