use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use featadapt::experiments::{self, Command, RunConfig};

/// Weight-space vs feature-space fine-tuning experiments.
///
/// Log verbosity is read from FEATADAPT_LOG (e.g. `info`, `debug`).
#[derive(Parser)]
#[command(name = "featadapt", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the source classifier and write its checkpoint.
    Pretrain(RunArgs),
    /// 1-D weight-space vs feature-space traces.
    Oned(RunArgs),
    /// Recover an input shift on a constructed lurking-variable system.
    Eem(RunArgs),
    /// Seen/unseen class forgetting table.
    Forgetting(RunArgs),
    /// Adapter leaderboard across lurking domains.
    Compare(RunArgs),
    /// Check every artifact of a run directory against its manifest.
    Verify { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEATADAPT_LOG", "warn")).init();
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::Oned(a) => (Command::Oned, a),
        Cmd::Eem(a) => (Command::Eem, a),
        Cmd::Forgetting(a) => (Command::Forgetting, a),
        Cmd::Compare(a) => (Command::Compare, a),
        Cmd::Verify { dir } => {
            return match experiments::verify_dir(&dir) {
                Ok(problems) if problems.is_empty() => {
                    println!("ok");
                    ExitCode::SUCCESS
                }
                Ok(problems) => {
                    for p in problems {
                        println!("{p}");
                    }
                    ExitCode::from(1)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
    };

    let mut cfg = match RunConfig::load(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    match experiments::run(command, &cfg) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                // One JSON document on stderr so callers can parse it.
                let failures = serde_json::json!({ "failures": outcome.manifest.failures });
                eprintln!("{failures}");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
