use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kwc_cli::commands::{h_csv, sigma_csv, strictly_decreasing};
use kwc_cli::*;

#[derive(Parser)]
#[command(name = "kwc", version, about = "Energy-dissipative phase-field runs, sweeps and audits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the time stepper and audit the result.
    Run {
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check the config and the model assumptions.
    Validate { config: PathBuf },
    /// Print the derived step-size and a-priori constants.
    Constants { config: PathBuf },
    /// Compare regularized and exact orientation energies over sigma.
    SigmaSweep {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.1, 0.02, 0.004])]
        sigmas: Vec<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Self-convergence study: halve h and double the steps per level.
    HSweep {
        config: PathBuf,
        #[arg(long, default_value_t = 3)]
        levels: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-audit a saved trajectory.
    Audit {
        config: PathBuf,
        trajectory: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn report(outcome: &RunOutcome) -> ExitCode {
    for r in &outcome.audits {
        print!("{r}");
    }
    if let Some(o) = &outcome.omega {
        print!("{o}");
    }
    if let Some(msg) = &outcome.failure {
        eprintln!("error: {msg} (partial outputs kept)");
    }
    ExitCode::from(outcome.exit_code())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let cfg = parse_config(&config)?;
            let outcome = cmd_run(&cfg, &out)?;
            println!(
                "{} steps, final energy {}",
                outcome.trajectory.steps(),
                outcome.trajectory.last().energy.total
            );
            Ok(report(&outcome))
        }
        Command::Validate { config } => {
            let cfg = parse_config(&config)?;
            print!("{}", cmd_validate(&cfg));
            println!("config ok");
            Ok(ExitCode::SUCCESS)
        }
        Command::Constants { config } => {
            let cfg = parse_config(&config)?;
            print!("{}", cmd_constants(&cfg)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::SigmaSweep { config, sigmas, out } => {
            let cfg = parse_config(&config)?;
            let rows = cmd_sigma_sweep(&cfg, &sigmas)?;
            let csv = sigma_csv(&rows);
            fs::create_dir_all(&out)?;
            fs::write(out.join("sigma_sweep.csv"), &csv).context("cannot write sigma_sweep.csv")?;
            print!("{csv}");
            println!("deviation strictly decreasing: {}", strictly_decreasing(&rows));
            let ok = rows.iter().all(|r| r.within());
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::HSweep { config, levels, out } => {
            let cfg = parse_config(&config)?;
            let rows = cmd_h_sweep(&cfg, levels, &out)?;
            let csv = h_csv(&rows);
            fs::write(out.join("h_sweep.csv"), &csv).context("cannot write h_sweep.csv")?;
            print!("{csv}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Audit { config, trajectory, out } => {
            let cfg = parse_config(&config)?;
            Ok(report(&cmd_audit(&cfg, &trajectory, &out)?))
        }
    }
}
