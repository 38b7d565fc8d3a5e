use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use ionctl_cli::run::{self, RunError};
use ionctl_cli::{Mode, ScenarioConfig};

/// Optimal flow control of an ion-exchange column.
#[derive(Debug, Parser)]
#[command(name = "ionctl", version)]
struct Args {
    /// Scenario TOML; defaults apply to every missing key.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Overrides the scenario mode.
    #[arg(short, long)]
    mode: Option<Mode>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for ensembles and Monte Carlo runs.
    #[arg(short, long)]
    jobs: Option<usize>,
    /// Overrides the output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Exit 0 even when an optimization hits its iteration cap.
    #[arg(long)]
    allow_unconverged: bool,
}

fn load(args: &Args) -> Result<ScenarioConfig, RunError> {
    let mut cfg = match &args.config {
        Some(path) => ScenarioConfig::load(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if args.allow_unconverged {
        cfg.mc_compare.include_unconverged = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    if let Some(jobs) = args.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("cannot configure worker threads")
        {
            eprintln!("error: {e:#}");
            return ExitCode::from(run::EXIT_FAILURE as u8);
        }
    }
    let result = load(&args).and_then(|cfg| run::run(&cfg));
    match result {
        Ok(summary) => {
            for line in &summary.lines {
                println!("{line}");
            }
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
            let code = summary.exit_code(args.allow_unconverged);
            if code == run::EXIT_UNCONVERGED {
                eprintln!("error: optimization did not converge (pass --allow-unconverged to accept)");
            }
            ExitCode::from(code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
