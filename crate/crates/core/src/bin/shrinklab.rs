use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shrinklab::cli::{diagnose_files, oracle_report, parse_seed_list, run_plan, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "shrinklab", version, about = "VQ-VAE token shrinkage lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every run of a plan for every seed and write artifacts.
    Run {
        plan: PathBuf,
        /// Comma-separated seeds overriding the plan's list.
        #[arg(long)]
        seed_list: Option<String>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Recompute diagnostics from stored artifacts and compare bytes instead of training.
        #[arg(long)]
        check: bool,
    },
    /// Diagnose a codebook dump, optionally with embeddings, a config and a checkpoint.
    Diagnose {
        codebook: PathBuf,
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Print oracle baselines for a config.
    Oracle { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run {
            plan,
            seed_list,
            out_dir,
            check,
        } => {
            let opts = RunOptions {
                seeds: seed_list.as_deref().map(parse_seed_list).transpose()?,
                out_dir,
                check,
            };
            let summary = run_plan(&plan, &opts)?;
            let jobs: std::collections::BTreeSet<(&str, u64)> =
                summary.rows.iter().map(|(r, s, _, _)| (r.as_str(), *s)).collect();
            if check {
                println!("check ok: {} reports byte-identical", jobs.len());
            } else {
                println!("{} runs complete, artifacts in {}", jobs.len(), summary.out_dir.display());
            }
            Ok(())
        }
        Command::Diagnose {
            codebook,
            embeddings,
            config,
            checkpoint,
            out,
        } => {
            let report = diagnose_files(&codebook, embeddings.as_deref(), config.as_deref(), checkpoint.as_deref())?;
            match out {
                Some(path) => shrinklab::textfmt::write_atomic(&path, report.to_json().as_bytes())
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
                None => print!("{}", report.to_json()),
            }
            Ok(())
        }
        Command::Oracle { config } => {
            print!("{}", oracle_report(&config)?);
            Ok(())
        }
    }
}
