use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use scarlab_cli::commands::{self, Context, Status};
use scarlab_cli::config::{parse_config, ExperimentConfig};

/// Magnetic quantum dot eigenstates, scars and classical orbits.
#[derive(Parser)]
#[command(name = "scarlab", version)]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (must exist); overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve for the lowest eigenstates; writes spectrum.wf2d and energies.csv.
    Solve,
    /// Density of states versus field; writes dos.csv (and ridge.csv).
    Dos,
    /// Scar scores of the solved states; writes scars.csv and census.csv.
    Scars,
    /// Impurity overlap of a scarred state versus rotation; writes pinning.csv.
    Pinning,
    /// Classical trajectory ensemble; writes classical.csv and orbits.csv.
    Classical,
    /// Surface of section of the classical ensemble; writes poincare.csv.
    Poincare,
    /// Table of resonance fields; writes resonances.csv.
    Resonances,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Dos => "dos",
            Command::Scars => "scars",
            Command::Pinning => "pinning",
            Command::Classical => "classical",
            Command::Poincare => "poincare",
            Command::Resonances => "resonances",
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    cfg.seed().map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        #[cfg(feature = "parallel")]
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: --threads: {e}");
            return ExitCode::from(1);
        }
        #[cfg(not(feature = "parallel"))]
        let _ = n;
    }
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    let mut ctx = match Context::new(&cfg, out) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    ctx.verbose = !cli.quiet;
    match commands::run(cli.command.name(), &ctx) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => {
            eprintln!("error: solver did not converge; artifacts are flagged NOT CONVERGED");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
