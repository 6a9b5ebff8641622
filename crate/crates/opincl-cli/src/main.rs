use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opincl_cli::{list_builtins, run, RunOptions};

#[derive(Parser)]
#[command(name = "opincl", version, about = "Run opincl experiments from JSON configs")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute a config and write its JSON report and CSV artifacts.
    Run {
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output.dir in the config.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Treat warnings as failures.
        #[arg(long)]
        strict: bool,
    },
    /// Print the named kernels, multimaps, fields and control problems.
    ListBuiltins,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Cmd::ListBuiltins => {
            print!("{}", list_builtins());
            ExitCode::SUCCESS
        }
        Cmd::Run { config, seed, out_dir, strict } => match run(&config, &RunOptions { seed, out_dir, strict }) {
            Ok(outcome) => {
                let r = &outcome.report;
                for c in &r.checks {
                    println!(
                        "{} {}: observed {} bound {}",
                        if c.passed { "pass" } else { "FAIL" },
                        c.id,
                        c.observed,
                        c.bound
                    );
                }
                for w in &r.warnings {
                    println!("warning: {w}");
                }
                if let Some(e) = &r.error {
                    eprintln!("error in check {}: {}", e.check, e.message);
                }
                println!("report: {}", outcome.report_path.display());
                ExitCode::from(outcome.exit_code as u8)
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
