use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fbsplit_cli::commands::{cmd_compare, cmd_rate, cmd_run, cmd_validate, CompareInput};
use fbsplit_cli::{CliError, Overrides, RunConfig};

/// Splitting solvers for the value function of an emission-market FBSDE.
#[derive(Parser, Debug)]
#[command(name = "fbsplit", version)]
struct Cli {
    /// Config file (TOML key = value pairs; sections allowed).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Path seed, overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// File stem of the outputs, overrides `label`.
    #[arg(long, global = true)]
    label: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve and write `<label>_solution.csv`, `<label>_meta.csv`, `<label>_timing.csv`.
    Run,
    /// Compare two solutions (`.csv` solution files or config files).
    Compare { a: PathBuf, b: PathBuf },
    /// Convergence in N against the proxy; writes `<label>_rate.csv`.
    Rate,
    /// Structural and CFL checks of the configured model.
    Validate,
}

fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::from_file(p, overrides),
        None => RunConfig::from_toml_with("", overrides),
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let overrides = Overrides {
        seed: cli.seed,
        out_dir: cli.out.clone(),
        label: cli.label.clone(),
    };
    match cli.command {
        Command::Run => {
            let out = cmd_run(&load(cli.config.as_deref(), &overrides)?)?;
            println!("{}", out.solution.display());
        }
        Command::Compare { a, b } => {
            let a = CompareInput::from_path(&a, &overrides)?;
            let b = CompareInput::from_path(&b, &overrides)?;
            let out_dir = cli.out.unwrap_or_else(|| PathBuf::from("."));
            let label = cli.label.unwrap_or_else(|| "compare".into());
            let out = cmd_compare(&a, &b, &out_dir, &label)?;
            print!("{}", String::from_utf8_lossy(&out.comparison.summary));
        }
        Command::Rate => {
            let out = cmd_rate(&load(cli.config.as_deref(), &overrides)?)?;
            println!("slope {:.6}", out.report.slope);
            println!("{}", out.path.display());
        }
        Command::Validate => {
            let report = cmd_validate(&load(cli.config.as_deref(), &overrides)?)?;
            print!("{}", report.render());
            report.into_result()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fbsplit: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
