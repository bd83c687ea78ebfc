use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use plreg_core::checks::{run_suite, SuiteOptions, TOLERANCE};
use plreg_core::experiment::{export_masks, parse_config, run, sweep, SweepAxis, VERSION};
use plreg_core::Error;

#[derive(Parser)]
#[command(name = "plreg", version = VERSION, about = "Partial-logic regularization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a config once per value of one hyper-parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of w_p1, w_p2, w_lreg, lambda_infomax, lambda_kd.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
    /// Finite-difference check of every loss and the full objective.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write heat-map and binarized mask matrices from a CIL run directory.
    ExportMasks {
        #[arg(long)]
        run: PathBuf,
    },
}

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Json(_) => ExitCode::from(2),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => {
            let cfg = match parse_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match run(&cfg) {
                Ok(summary) => {
                    println!(
                        "{} seed(s) finished; outputs in {}",
                        summary.results.len(),
                        summary.output_dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("partial outputs in {} (see manifest.txt)", cfg.output_dir.display());
                    fail(e)
                }
            }
        }
        Command::Sweep { config, axis, values } => {
            let result = SweepAxis::parse(&axis)
                .and_then(|a| Ok((a, parse_config(&config)?)))
                .and_then(|(a, cfg)| Ok((sweep(&cfg, a, &values)?, cfg)));
            match result {
                Ok((rows, cfg)) => {
                    println!(
                        "{} sweep rows written to {}",
                        rows.len(),
                        cfg.output_dir.join("sweep.csv").display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Gradcheck {
            instances,
            seed,
            inject_fault,
        } => {
            let opts = SuiteOptions {
                instances,
                seed,
                fault: inject_fault,
            };
            let results = match run_suite(&opts) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<20} instances {:>3}  entries {:>5}  max rel error {:.3e}  {status}",
                    r.name, r.instances, r.entries, r.max_rel_error
                );
                if !r.passed() {
                    failed.push(r.name);
                }
            }
            if failed.is_empty() {
                println!("all {} checks below {TOLERANCE:e}", results.len());
                ExitCode::SUCCESS
            } else {
                eprintln!("gradient check failed: {}", failed.join(", "));
                ExitCode::FAILURE
            }
        }
        Command::ExportMasks { run } => match export_masks(&run) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
