use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use rbla_core::cli::{compare_table, emit_metrics, parse_config, read_summary, RunSummary};
use rbla_core::federation::{run_experiment, Executor};
use rbla_core::Result;

#[derive(Parser)]
#[command(name = "rbla", version, about = "Heterogeneous-rank LoRA federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        rounds: Option<String>,
        /// full or random
        #[arg(long)]
        participation: Option<String>,
        #[arg(long)]
        seed: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run clients one after another even when built with `parallel`.
        #[arg(long)]
        sequential: bool,
    },
    /// Print a rounds-to-target table for several summary.json files.
    Compare {
        #[arg(required = true, num_args = 2..)]
        summaries: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            method,
            rounds,
            participation,
            seed,
            out,
            sequential,
        } => {
            let mut overrides = BTreeMap::new();
            for (key, value) in [
                ("method", method),
                ("rounds", rounds),
                ("participation", participation),
                ("seed", seed),
                ("out", out.map(|p| p.display().to_string())),
            ] {
                if let Some(v) = value {
                    overrides.insert(key.to_string(), v);
                }
            }
            let cfg = parse_config(config.as_deref(), &overrides)?;
            let (train, test) = cfg.paths.load()?;
            info!(
                "{}: {} train / {} test samples, method {}",
                cfg.dataset.name(),
                train.len(),
                test.len(),
                cfg.round.method
            );
            let executor = if sequential {
                Executor::Sequential
            } else {
                Executor::default()
            };
            let result = run_experiment(cfg.round.clone(), &train, &test, &cfg.target_accuracies, executor)?;
            let summary = RunSummary::new(&cfg, result.summary);
            emit_metrics(&cfg.out, &result.metrics, &summary)?;
            for t in &summary.summary.targets {
                match t.first_round {
                    Some(r) => println!("target {:.2}%: round {r}", t.target * 100.0),
                    None => println!(
                        "target {:.2}%: not reached (best {:.2}%)",
                        t.target * 100.0,
                        summary.summary.best_accuracy * 100.0
                    ),
                }
            }
            println!("wrote {}", cfg.out.display());
            Ok(())
        }
        Command::Compare { summaries } => {
            let runs = summaries
                .iter()
                .map(|p| Ok((p.display().to_string(), read_summary(p)?)))
                .collect::<Result<Vec<_>>>()?;
            print!("{}", compare_table(&runs)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap's own failure code (2) would collide with the data-error code
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
