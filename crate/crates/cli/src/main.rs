//! `nlexp run <config> [--suite a,b] [--out dir] [--seed n] [--grid-scale f] [--parallel]`
//!
//! Exit status: 0 when every selected check passes, 1 when a check fails,
//! 2 on configuration or I/O errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nonlin_expect::config::{RunConfig, Suite};
use nonlin_expect::runner::{run, RunOptions};

#[derive(Parser)]
#[command(name = "nlexp", version, about = "Run nonlinear-expectation check suites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the selected suites of a config file.
    Run {
        config: PathBuf,
        /// Comma-separated suites, or `all` for every section present.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Output directory; defaults to `[run] out`, then `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Multiplies the node count of every grid.
        #[arg(long, default_value_t = 1.0)]
        grid_scale: f64,
        /// Run suites concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            suite,
            out,
            seed,
            grid_scale,
            parallel,
        } => {
            let text = match std::fs::read_to_string(&config) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            let parsed = match RunConfig::parse(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {}: {e}", config.display());
                    return ExitCode::from(2);
                }
            };
            let suites = match Suite::parse_list(&suite, &parsed) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let opts = RunOptions {
                suites,
                seed,
                grid_scale,
                parallel,
            };
            let report = match run(&parsed, &text, &opts) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let dir = out
                .or_else(|| parsed.run.out.as_ref().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            if let Err(e) = report.write(&dir) {
                eprintln!("error: writing {}: {e}", dir.display());
                return ExitCode::from(2);
            }
            for s in &report.suites {
                println!(
                    "{:<12} {}  residual {:.3e}  tolerance {:.3e}  ({:.2}s)",
                    s.suite.name(),
                    if s.report.passed { "PASS" } else { "FAIL" },
                    s.report.residual,
                    s.report.tolerance,
                    s.seconds
                );
            }
            println!("report: {}", dir.join("report.jsonl").display());
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                for f in report.failures() {
                    eprintln!("failed: {f}");
                }
                ExitCode::from(1)
            }
        }
    }
}
