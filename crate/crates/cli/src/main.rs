use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mfc_cli::{load_config, run, Experiment, Failure, Overrides};

/// Mean-field optimal control experiments.
#[derive(Debug, Parser)]
#[command(name = "mfc", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// solve, gradcheck, oracle, decouple or chaos; overrides the file.
    #[arg(long)]
    experiment: Option<String>,
    /// Do not print the summary.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.exit_code())
        }
    }
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        experiment: cli
            .experiment
            .as_deref()
            .map(Experiment::parse)
            .transpose()?,
    };
    let cfg = load_config(&cli.config, &overrides)?;
    let report = run(&cfg)?;
    if !cli.quiet {
        print!("{}", report.text);
        println!(
            "wrote {} files to {}",
            report.files.len(),
            cfg.out.display()
        );
    }
    Ok(())
}
