use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flocbal::discrete::Mode;
use flocbal::scenario::{run, validate_config, RunOptions};

#[derive(Parser)]
#[command(
    name = "flocbal",
    version,
    about = "Flocculation population-balance scenarios"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write series.csv, dist_<t>.csv and report.txt.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Check discrete conservation on random densities; fail if above threshold.
        #[arg(long)]
        check_conservation: bool,
        #[arg(long)]
        quad_order: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<TableMode>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum TableMode {
    Raw,
    Corrected,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            check_conservation,
            quad_order,
            mode,
        } => {
            let opts = RunOptions {
                check_conservation,
                quad_order,
                mode: mode.map(|m| match m {
                    TableMode::Raw => Mode::Raw,
                    TableMode::Corrected => Mode::Corrected,
                }),
            };
            match run(&config, &out, opts) {
                Ok(o) => {
                    if !o.budget_ok {
                        eprintln!(
                            "numerical failure: budget drift {:.3e} exceeds tolerance",
                            o.budget_drift
                        );
                    }
                    if !o.conservation_ok {
                        eprintln!("numerical failure: conservation check above threshold");
                    }
                    ExitCode::from(o.exit_code() as u8)
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Validate { config } => match validate_config(&config) {
            Ok(v) if v.is_empty() => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Ok(v) => {
                for m in &v {
                    println!("{m}");
                }
                ExitCode::from(2)
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
