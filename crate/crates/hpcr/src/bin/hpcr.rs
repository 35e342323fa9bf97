//! Thin experiment CLI over the library: run experiment grids, audit
//! gradients, sweep the temperature schedule, and export synthetic data.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hpcr::error::Error;
use hpcr::experiment;
use hpcr::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "hpcr",
    version,
    about = "Proxy-based contrastive replay experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory; overrides the config and the HPCR_OUT_DIR variable.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace the configured seed list.
    #[arg(long, value_name = "N1,N2,...", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (method x buffer x seed) cell and write the aggregate table.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Emit the per-step proxy-gradient audit CSV for each run.
        #[arg(long)]
        grad_audit: bool,
    },
    /// Verify every analytic gradient against central finite differences.
    Gradcheck {
        /// Random instances per loss.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Seed for instance generation.
        #[arg(long, default_value_t = 20240501)]
        seed: u64,
    },
    /// Sweep the temperature schedule grid with HPCR and tabulate metrics.
    TauSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate the configured stream and export it as CSV.
    ExportData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seeds) = &args.seeds {
        cfg.experiment.seeds = seeds.clone();
    }
    Ok(cfg)
}

fn exit_code_for(err: &Error) -> ExitCode {
    match err {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn dispatch() -> Result<ExitCode, Error> {
    match Cli::parse().command {
        Command::Run { cfg, grad_audit } => {
            let mut config = load_config(&cfg)?;
            if grad_audit {
                config.experiment.grad_audit = true;
            }
            let summary = experiment::cmd_run(&config, cfg.out.as_deref())?;
            for cell in &summary.cells {
                match &cell.result {
                    Ok(result) => println!(
                        "{}: A_T={:.4} AAA={:.4} F_T={}",
                        cell.run_id,
                        result.final_accuracy,
                        result.anytime_accuracy,
                        result
                            .forgetting
                            .map_or_else(|| "n/a".into(), |f| format!("{f:.4}")),
                    ),
                    Err(e) => println!("{}: FAILED ({e})", cell.run_id),
                }
            }
            println!("aggregate table: {}", summary.aggregate_path.display());
            if summary.all_succeeded() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(1))
            }
        }
        Command::Gradcheck { instances, seed } => {
            let report = experiment::cmd_gradcheck(instances, seed)?;
            println!("{:<22} {:>14}", "loss", "max rel error");
            for row in &report.rows {
                println!("{:<22} {:>14.3e}", row.name, row.max_error);
            }
            if report.passed() {
                println!(
                    "all gradients within {:.0e} over {} instances",
                    report.tolerance, report.instances
                );
                Ok(ExitCode::SUCCESS)
            } else {
                for row in report.failures() {
                    eprintln!("exceeded tolerance: {} ({:.3e})", row.name, row.max_error);
                }
                Ok(ExitCode::from(1))
            }
        }
        Command::TauSweep { cfg } => {
            let config = load_config(&cfg)?;
            let (path, rows) = experiment::cmd_tau_sweep(&config, cfg.out.as_deref())?;
            let best = rows
                .iter()
                .max_by(|a, b| a.final_accuracy.total_cmp(&b.final_accuracy))
                .expect("non-empty grid");
            println!(
                "best cell: tau_max={} tau_min={} S={} (A_T={:.4}, AAA={:.4})",
                best.tau_max, best.tau_min, best.cycle, best.final_accuracy, best.anytime_accuracy
            );
            println!("sweep table: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::ExportData { cfg } => {
            let config = load_config(&cfg)?;
            let path = experiment::cmd_export_data(&config, cfg.out.as_deref())?;
            println!("dataset: {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
