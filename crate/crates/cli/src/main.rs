//! `ssm`: groom, optimize and analyze a two-organ cohort described by a
//! project file, or generate a synthetic one.
//!
//! Exit status is 0 on success, 2 for problems with the input (bad config,
//! missing or malformed files, bad arguments) and 1 for anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use ssm_core::project::{self, OptimizeOptions, ProjectConfig};
use ssm_core::synth::{SynthKind, SynthParams};
use ssm_core::Error;

#[derive(Debug, Parser)]
#[command(name = "ssm", version, about = "Statistical shape modeling of organ pairs with a shared boundary")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Project file (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides every seed in the project (optimization, imbalance test, synth).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory. For `synth` this is where the cohort is written;
    /// otherwise it replaces the project's `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align subjects and split each organ pair into remainders, shared surface and contour.
    Groom,
    /// Place corresponding particles on the groomed domains.
    Optimize {
        /// Continue from the last completed splitting level.
        #[arg(long)]
        resume: bool,
        #[arg(long, hide = true)]
        stop_after_level: Option<usize>,
    },
    /// PCA, mode walks, group differences, shape scores and the imbalance test.
    Analyze,
    /// Write a synthetic cohort and a project file for it.
    Synth {
        /// two-box, two-ellipsoid or curved-septum.
        #[arg(long, default_value = "two-box")]
        kind: SynthKind,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Generating-parameter range as `LO,HI`.
        #[arg(long, value_name = "LO,HI", value_parser = parse_range, allow_hyphen_values = true)]
        range: Option<(f64, f64)>,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(lo)?, num(hi)?))
}

fn load_config(global: &GlobalArgs) -> Result<ProjectConfig, Error> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--config PATH is required for this command".into()))?;
    let mut config = ProjectConfig::load(path)?;
    if let Some(seed) = global.seed {
        config.optimize.seed = seed;
        config.analyze.seed = seed;
    }
    if let Some(dir) = &global.output {
        config.output_dir = std::env::current_dir().map(|cwd| cwd.join(dir)).unwrap_or_else(|_| dir.clone());
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::InvalidArgument("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("cannot configure thread pool: {e}")))?;
    }
    match cli.command {
        Command::Groom => {
            let config = load_config(&cli.global)?;
            let manifest = project::groom(&config)?;
            info!("groomed {} subjects (reference {})", manifest.subjects.len(), manifest.reference);
            println!("{}", config.stage_dir("groom").display());
        }
        Command::Optimize {
            resume,
            stop_after_level,
        } => {
            let config = load_config(&cli.global)?;
            let summary = project::optimize_project(&config, OptimizeOptions { resume, stop_after_level })?;
            if summary.stopped {
                info!("stopped after level {}; continue with --resume", summary.last_level);
            } else {
                info!("finished level {} with energy {}", summary.last_level, summary.final_energy);
            }
            println!("{}", config.stage_dir("optimize").display());
        }
        Command::Analyze => {
            let config = load_config(&cli.global)?;
            let summary = project::analyze(&config)?;
            if let Some(first) = summary.cumulative_explained.first() {
                info!("mode 1 explains {:.1}% of the variance", 100.0 * first);
            }
            println!("{}", config.stage_dir("analyze").display());
        }
        Command::Synth { kind, count, range } => {
            let dir = cli
                .global
                .output
                .clone()
                .ok_or_else(|| Error::InvalidArgument("synth needs --output DIR".into()))?;
            let params = SynthParams {
                kind,
                count,
                seed: cli.global.seed.unwrap_or(0),
                range,
                ..SynthParams::default()
            };
            let path = project::synth(&params, &dir)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 1 })
        }
    }
}
