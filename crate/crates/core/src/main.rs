use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cmvm::scenario::{list_text, run_file, schema_document, Overrides};

/// Reproducible experiments on martingale-valued measures and Levy-driven SPDEs.
#[derive(Parser)]
#[command(name = "cmvm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the scenario described by a TOML config (or a previous report.json).
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List scenarios with their defaults, or print the config schema.
    List {
        /// Print the JSON schema of configs, params and reports instead.
        #[arg(long)]
        schema: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match cli.command {
        Command::List { schema } => {
            if schema {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&schema_document()).expect("schema serializes")
                );
            } else {
                print!("{}", list_text());
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            config,
            seed,
            paths,
            out,
            threads,
        } => match run_file(
            &config,
            &Overrides {
                seed,
                paths,
                out,
                threads,
            },
        ) {
            Ok(outcome) => {
                let r = &outcome.report;
                for c in &r.checks {
                    println!(
                        "{} {}: measured {:.6e}, target {:.6e} ({:?}, {:?}, tol {:.3e})",
                        if c.passed { "PASS" } else { "FAIL" },
                        c.name,
                        c.measured,
                        c.target,
                        c.provenance,
                        c.comparison,
                        c.tolerance
                    );
                }
                let dir = r
                    .config
                    .out
                    .as_deref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default();
                println!(
                    "{}: {} in {:.2} s, seed {}, {} threads; outputs in {dir}",
                    r.scenario,
                    if r.passed {
                        "all checks passed"
                    } else {
                        "check failure"
                    },
                    r.wall_clock_s,
                    r.seed,
                    r.threads
                );
                if r.passed {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(2)
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
