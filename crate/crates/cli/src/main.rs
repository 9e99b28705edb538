use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use maes_cli::ablate::run_ablations;
use maes_cli::config::ExperimentConfig;
use maes_cli::pipeline::{emit_reports, evaluate_run, prepare_dataset, train_run, Workspace};
use maes_cli::search::run_search;
use maes_cli::sweep::{run_delta_sweep, write_summary};

/// Sequence-modeling lab: attentive expert ensembles under temporal
/// conditional shift, with their baselines and evaluation protocol.
#[derive(Parser)]
#[command(name = "maes", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads for sweeps and ablations (0 = rayon default).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct CellSelector {
    /// Restrict to one delta (default: every delta in the config).
    #[arg(long)]
    delta: Option<f64>,
    /// Restrict to one seed (default: every seed in the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and persist datasets for the configured grid.
    GenData {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellSelector,
    },
    /// Train pool, stacking weights and the ensemble (resumable).
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellSelector,
    },
    /// Evaluate trained models on the test split and write metric files.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellSelector,
    },
    /// Full grid: train + evaluate every (delta, seed), then summarize.
    SweepDelta {
        #[command(flatten)]
        common: Common,
    },
    /// Ablation grids (importance weight, pretraining, attention, experts).
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Sample gate dimensions by random search and persist them.
    Search {
        #[command(flatten)]
        common: Common,
        /// Number of configurations to draw.
        #[arg(long)]
        n_samples: Option<usize>,
        /// Seed for the draw (default: first config seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Emit figure-data files (attention, correlations, traces).
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cell: CellSelector,
    },
}

fn workspace(common: &Common) -> Result<Workspace> {
    let config = ExperimentConfig::load(&common.config)?;
    if common.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(common.threads)
            .build_global()
            .ok();
    }
    Ok(Workspace::new(config, common.out_dir.clone()))
}

fn cells(ws: &Workspace, cell: &CellSelector) -> Vec<(f64, u64)> {
    let deltas: Vec<f64> = match cell.delta {
        Some(d) => vec![d],
        None => ws.config.data.deltas.clone(),
    };
    let seeds: Vec<u64> = match cell.seed {
        Some(s) => vec![s],
        None => ws.config.seeds.clone(),
    };
    let mut out = Vec::new();
    for &d in &deltas {
        for &s in &seeds {
            out.push((d, s));
        }
    }
    out
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common, cell } => {
            let ws = workspace(&common)?;
            ws.write_config_echo()?;
            for (delta, seed) in cells(&ws, &cell) {
                let ds = prepare_dataset(&ws, delta, seed)?;
                println!(
                    "dataset delta={delta} seed={seed}: {}/{}/{} sequences -> {}",
                    ds.train.len(),
                    ds.validation.len(),
                    ds.test.len(),
                    ws.run_dir(delta, seed).join("dataset").display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { common, cell } => {
            let ws = workspace(&common)?;
            ws.write_config_echo()?;
            for (delta, seed) in cells(&ws, &cell) {
                train_run(&ws, delta, seed)?;
                println!("trained delta={delta} seed={seed}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate { common, cell } => {
            let ws = workspace(&common)?;
            let mut evaluations = Vec::new();
            for (delta, seed) in cells(&ws, &cell) {
                let ev = evaluate_run(&ws, delta, seed)?;
                for (model, report) in &ev.reports {
                    println!(
                        "delta={delta} seed={seed} {model}: APR {:.4} ± {:.4}",
                        report.mean_apr, report.std_apr
                    );
                }
                evaluations.push(ev);
            }
            write_summary(&ws, &evaluations)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::SweepDelta { common } => {
            let ws = workspace(&common)?;
            let outcome = run_delta_sweep(&ws)?;
            println!(
                "sweep finished: {} failures; summary in {}",
                outcome.failures.len(),
                ws.out.join("summary").display()
            );
            for failure in &outcome.failures {
                eprintln!("failed sub-run: {failure}");
            }
            if outcome.failures.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Ablate { common } => {
            let ws = workspace(&common)?;
            let records = run_ablations(&ws)?;
            for r in &records {
                println!(
                    "{} = {}: val APR {:.4} ± {:.4}",
                    r.grid, r.setting, r.val_mean_apr, r.val_std_apr
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Search {
            common,
            n_samples,
            seed,
        } => {
            let ws = workspace(&common)?;
            let output = run_search(&ws, n_samples, seed)?;
            println!(
                "sampled {} gate configurations -> {}",
                output.samples.len(),
                ws.out.join("search").join("samples.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { common, cell } => {
            let ws = workspace(&common)?;
            for (delta, seed) in cells(&ws, &cell) {
                emit_reports(&ws, delta, seed)?;
                println!(
                    "reports for delta={delta} seed={seed} -> {}",
                    ws.run_dir(delta, seed).join("report").display()
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
