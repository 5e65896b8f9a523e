use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gil_core::experiment::{correlate, load_config, run_experiment, thread_count};

/// Train classifiers on incomplete data without imputation.
#[derive(Parser)]
#[command(name = "gil", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured (run, seed) pair and write results.
    Run {
        /// TOML experiment config, or the report.json of an earlier run.
        config: PathBuf,
        /// Replace all seeds in the config by this one.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Write results here instead of the configured out_dir.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Correlate imputation error with accuracy over baseline runs.
    Correlate {
        /// Directory holding a results.csv.
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed_override, out_dir } => {
            let mut cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            if let Some(s) = seed_override {
                cfg.override_seeds(s);
            }
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            let threads = match thread_count() {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            };
            let records = match run_experiment(&cfg, threads) {
                Ok(r) => r,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            let mut failed = 0;
            for r in &records {
                match (&r.report, &r.error) {
                    (Some(rep), _) => println!(
                        "{:<24} seed {:<4} accuracy {:.4}  best {:.4} @ {}",
                        r.name, r.seed, rep.final_eval.accuracy, rep.best_eval.accuracy, rep.best_iteration
                    ),
                    (None, e) => {
                        failed += 1;
                        println!("{:<24} seed {:<4} FAILED: {}", r.name, r.seed, e.as_deref().unwrap_or("?"));
                    }
                }
            }
            println!("results in {}", cfg.out_dir.display());
            if failed > 0 {
                eprintln!("{failed} of {} runs failed", records.len());
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Command::Correlate { dir } => match correlate(&dir) {
            Ok(c) => {
                println!("n = {}  r = {:.4}  p = {:.4}", c.points.len(), c.r, c.p_value);
                println!("wrote {}", dir.join("correlation.csv").display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(1)
            }
        },
    }
}
