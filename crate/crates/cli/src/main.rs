use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ecoran::config::ExperimentConfig;
use ecoran::experiment::{self, ComparisonRow, RicMode, RicResult};
use ecoran::Error;

#[derive(Parser)]
#[command(name = "ecoran", version, about = "Energy-aware RAN control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config. Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.total_timesteps=5000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured variant on the in-process simulator.
    Train(Common),
    /// Evaluate a checkpoint (or a fixed baseline) on held-out episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Every ablation variant over every ablation seed.
    Ablate(Common),
    /// The configured variant over each load level and slice count.
    ScenarioGrid(Common),
    /// Run the simulated cell and serve it to one controller over TCP.
    ServeDu {
        #[command(flatten)]
        common: Common,
        /// Write every frame on the wire to this file.
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Connect to a DU and control it.
    RunRic {
        #[command(flatten)]
        common: Common,
        /// Train online instead of acting with a fixed policy.
        #[arg(long, conflicts_with = "checkpoint")]
        train: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Re-score a recorded session against a checkpoint or baseline.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        recording: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(c: &Common) -> ecoran::Result<ExperimentConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(out) = &c.out {
        let quoted = toml_string(&out.to_string_lossy());
        overrides.push(format!("output_dir={quoted}"));
    }
    match &c.config {
        Some(path) => ExperimentConfig::load(path, &overrides),
        None => ExperimentConfig::from_overrides(&overrides),
    }
}

fn toml_string(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn print_rows(rows: &[ComparisonRow]) {
    println!("{:<16} {:>5} {:>12} {:>12} {:>12} {:>12}", "label", "seed", "final_reward", "final_viol", "eval_reward", "eval_viol");
    for r in rows {
        println!(
            "{:<16} {:>5} {:>12.4} {:>12.4} {:>12.4} {:>12.4}",
            r.label, r.seed, r.tail.mean_reward, r.tail.violation_ratio, r.eval.mean_reward, r.eval.violation_ratio
        );
    }
}

fn run(cli: Cli) -> ecoran::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load(&c)?;
            let run = experiment::run_train(&cfg)?;
            println!(
                "{} steps; final {} steps: reward {:.4}, sleep {:.4}, violations {:.4}",
                run.records.len(),
                run.tail.steps,
                run.tail.mean_reward,
                run.tail.mean_sleep_ratio,
                run.tail.violation_ratio
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let s = experiment::run_eval(&cfg, checkpoint.as_deref())?;
            println!(
                "{} steps: reward {:.4}, sleep {:.4}, violations {:.4}",
                s.steps, s.mean_reward, s.mean_sleep_ratio, s.violation_ratio
            );
        }
        Command::Ablate(c) => print_rows(&experiment::run_ablate(&load(&c)?)?),
        Command::ScenarioGrid(c) => print_rows(&experiment::run_grid(&load(&c)?)?),
        Command::ServeDu { common, record } => {
            let cfg = load(&common)?;
            let s = experiment::run_serve_du(&cfg, record)?;
            println!(
                "{} steps: {} fresh, {} repeated, {} fallback{}",
                s.steps,
                s.fresh,
                s.repeated,
                s.fallback,
                if s.connection_lost { " (connection lost)" } else { "" }
            );
        }
        Command::RunRic {
            common,
            train,
            checkpoint,
            record,
        } => {
            let cfg = load(&common)?;
            let mode = if train { RicMode::Train } else { RicMode::Act { checkpoint } };
            match experiment::run_ric(&cfg, &mode, record.as_deref())? {
                RicResult::Trained(run) => println!(
                    "{} steps; final {} steps: reward {:.4}, violations {:.4}",
                    run.records.len(),
                    run.tail.steps,
                    run.tail.mean_reward,
                    run.tail.violation_ratio
                ),
                RicResult::Acted { policies } => println!("{policies} policies sent"),
            }
        }
        Command::Replay {
            common,
            recording,
            checkpoint,
        } => {
            let cfg = load(&common)?;
            let rows = experiment::run_replay(&cfg, &recording, checkpoint.as_deref())?;
            println!("{} steps re-scored", rows.len());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Argument(_) => 2,
        Error::Protocol(_) | Error::Decode { .. } => 4,
        Error::Numerical { .. } | Error::Checkpoint(_) | Error::Io(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ecoran: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
