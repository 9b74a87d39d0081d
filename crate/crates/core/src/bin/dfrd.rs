//! Command-line front end for the federated-distillation simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dfrd_core::cli::{execute_check, execute_run, execute_sweep, parse_seeds, parse_sweep_axes, summarize};
use dfrd_core::config::{apply_overrides, parse_config, split_assignment};
use dfrd_core::error::Error;
use dfrd_core::orchestrator::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dfrd", about = "Heterogeneous federated learning with data-free robust distillation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one experiment configuration.
    Run {
        /// Config file (flat key=value); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for CSVs, manifests and dumps.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Comma-separated master seeds; defaults to the config's run.seed.
        #[arg(long)]
        seeds: Option<String>,
        /// Basename prefix for emitted files.
        #[arg(long, default_value = "run")]
        tag: String,
        /// key=value overrides of config fields.
        #[arg(value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Execute a cross-product of override values and compare results.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seeds: Option<String>,
        /// Axes like gate=diamond,triangle,nabla (single values pin a key).
        #[arg(value_name = "KEY=V1,V2", required = true)]
        axes: Vec<String>,
    },
    /// Run the fast invariant suite.
    Check,
}

/// Exit code 2 marks configuration errors, 1 runtime failures.
fn classify(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::Contract(_) => 2,
        _ => 1,
    }
}

fn load_config(path: &Option<PathBuf>, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    let base = match path {
        Some(p) => parse_config(&std::fs::read_to_string(p)?),
        None => Ok(ExperimentConfig::default()),
    }?;
    let pairs: Result<Vec<(String, String)>, Error> =
        overrides.iter().map(|raw| split_assignment(raw)).collect();
    apply_overrides(&base, &pairs?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();

    match cli.command {
        Command::Run { config, out, seeds, tag, overrides } => {
            let cfg = match load_config(&config, &overrides) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("dfrd: {e}");
                    return ExitCode::from(2);
                }
            };
            let seed_list = match seeds.as_deref().map(parse_seeds).transpose() {
                Ok(list) => list.unwrap_or_else(|| vec![cfg.seed]),
                Err(e) => {
                    eprintln!("dfrd: {e}");
                    return ExitCode::from(2);
                }
            };
            match execute_run(&cfg, &out, &seed_list, &tag) {
                Ok(artifacts) => {
                    print!("{}", summarize(&artifacts));
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("dfrd: {e}");
                    ExitCode::from(classify(&e))
                }
            }
        }
        Command::Sweep { config, out, seeds, axes } => {
            let cfg = match load_config(&config, &[]) {
                Ok(cfg) => cfg,
                Err(e) => {
                    eprintln!("dfrd: {e}");
                    return ExitCode::from(2);
                }
            };
            let seed_list = match seeds.as_deref().map(parse_seeds).transpose() {
                Ok(list) => list.unwrap_or_else(|| vec![cfg.seed]),
                Err(e) => {
                    eprintln!("dfrd: {e}");
                    return ExitCode::from(2);
                }
            };
            let parsed_axes = match parse_sweep_axes(&axes) {
                Ok(a) => a,
                Err(e) => {
                    eprintln!("dfrd: {e}");
                    return ExitCode::from(2);
                }
            };
            match execute_sweep(&cfg, &out, &seed_list, &parsed_axes) {
                Ok((entries, summary)) => {
                    for entry in &entries {
                        let combo: Vec<String> =
                            entry.combo.iter().map(|(k, v)| format!("{k}={v}")).collect();
                        println!(
                            "{}: top g_acc {:.4}±{:.4}",
                            combo.join(" "),
                            entry.mean_top_g_acc,
                            entry.std_top_g_acc
                        );
                    }
                    println!("summary written to {}", summary.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("dfrd: {e}");
                    ExitCode::from(classify(&e))
                }
            }
        }
        Command::Check => {
            if execute_check() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
