// SPDX-License-Identifier: Apache-2.0

//! `simulate`: command-line driver for the coherence simulator.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 for numerical
//! failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nv_coherence::config::RunConfig;
use nv_coherence::run::{exit_code, oracle_check, run_file, RunOptions, EXIT_CONFIG, EXIT_OK};

#[derive(Parser)]
#[command(name = "simulate", version, about = "NV central-spin coherence simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario of a configuration file.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Keep failed field points in the output instead of exiting with an error.
        #[arg(long)]
        keep_going: bool,
    },
    /// Check a configuration file and list every problem.
    Validate { config: PathBuf },
    /// Compare the cluster expansion with exact propagation for a configuration.
    OracleCheck {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn status(code: i32) -> ExitCode {
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, common, keep_going } => {
            let opts = RunOptions { threads: common.threads, keep_going, out: common.out };
            match run_file(&config, &opts) {
                Ok(report) => {
                    for line in &report.summary {
                        println!("{line}");
                    }
                    println!("artifacts in {}", report.output_dir.display());
                    status(EXIT_OK)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    status(exit_code(&e))
                }
            }
        }
        Command::Validate { config } => match RunConfig::from_file(&config) {
            Ok(cfg) => {
                let diags = cfg.diagnostics();
                if diags.is_empty() {
                    println!("{}: ok", config.display());
                    status(EXIT_OK)
                } else {
                    for d in &diags {
                        println!("{d}");
                    }
                    status(EXIT_CONFIG)
                }
            }
            Err(e) => {
                println!("{e}");
                status(EXIT_CONFIG)
            }
        },
        Command::OracleCheck { config, common } => {
            let opts = RunOptions { threads: common.threads, keep_going: false, out: common.out };
            match RunConfig::from_file(&config).and_then(|cfg| oracle_check(&cfg, &opts)) {
                Ok((report, dev)) => {
                    println!("max_abs_deviation {:e}", dev.max_abs_deviation);
                    println!("max_magnitude_deviation {:e}", dev.max_magnitude_deviation);
                    println!("artifacts in {}", report.output_dir.display());
                    status(EXIT_OK)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    status(exit_code(&e))
                }
            }
        }
    }
}
