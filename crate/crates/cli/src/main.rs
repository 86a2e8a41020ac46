use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use srr_cli::experiments::replay_csv;
use srr_cli::output::{check_writable, write_csv};
use srr_cli::{run_eval, run_matrix, run_sweep, run_train, run_weighted, Cache, CellRow, CellSpec, ExperimentConfig};

/// Train and evaluate MNIST classifiers under statistically robust risk.
#[derive(Parser, Debug)]
#[command(name = "srr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one network per seed and record its learning curve.
    Train(Common),
    /// Evaluate a saved network on the configured metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Serialized network (overrides eval.network).
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// A-TSRM over an evaluation grid for several corruption radii.
    Sweep(Common),
    /// Train/test matrix of training methods against metrics.
    Matrix(Common),
    /// Learning curves with a class-weighted cross-entropy loss.
    Weighted(Common),
    /// Print the effective configuration and exit.
    PrintConfig(Common),
    /// Re-run recorded rows and check they reproduce bit for bit.
    Reproduce {
        /// CSV written by one of the other commands.
        #[arg(long, conflicts_with = "spec")]
        csv: Option<PathBuf>,
        /// A single `spec` column value.
        #[arg(long)]
        spec: Option<String>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML config file; omitted keys keep their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// CSV output path (`-` for stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Directory with the MNIST IDX files.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.set(o)?;
        }
        if let Some(output) = &self.output {
            cfg.run.output = output.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.run.seeds = seeds.clone();
        }
        if let Some(dir) = &self.mnist_dir {
            cfg.data.mnist_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit<T: Serialize + CellRow>(cfg: &ExperimentConfig, rows: Vec<T>) -> Result<ExitCode> {
    write_csv(&cfg.run.output, &rows)?;
    let failed = rows.iter().filter(|r| r.failed()).count();
    eprintln!("[srr] wrote {} rows to {}", rows.len(), cfg.run.output.display());
    if failed > 0 {
        eprintln!("[srr] {failed} cells failed; see the `error` column");
        Ok(ExitCode::FAILURE)
    } else {
        Ok(ExitCode::SUCCESS)
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::PrintConfig(common) => {
            print!("{}", common.config()?.to_toml());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train(common) => {
            let cfg = common.config()?;
            check_writable(&cfg.run.output)?;
            emit(&cfg, run_train(&cfg)?)
        }
        Command::Eval { common, network } => {
            let mut cfg = common.config()?;
            if network.is_some() {
                cfg.eval.network = network;
            }
            check_writable(&cfg.run.output)?;
            emit(&cfg, run_eval(&cfg)?)
        }
        Command::Sweep(common) => {
            let cfg = common.config()?;
            check_writable(&cfg.run.output)?;
            emit(&cfg, run_sweep(&cfg)?)
        }
        Command::Matrix(common) => {
            let cfg = common.config()?;
            check_writable(&cfg.run.output)?;
            emit(&cfg, run_matrix(&cfg)?)
        }
        Command::Weighted(common) => {
            let cfg = common.config()?;
            check_writable(&cfg.run.output)?;
            emit(&cfg, run_weighted(&cfg)?)
        }
        Command::Reproduce { csv, spec } => {
            let mut cache = Cache::default();
            match (csv, spec) {
                (Some(path), _) => {
                    let replays = replay_csv(&path, &mut cache)?;
                    let mut bad = 0;
                    for r in &replays {
                        if !r.matches() {
                            bad += 1;
                            println!("line {}: recorded {} reproduced {:?}", r.line, r.recorded, r.reproduced);
                        }
                    }
                    println!("{} of {} rows reproduced exactly", replays.len() - bad, replays.len());
                    Ok(if bad == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
                }
                (None, Some(text)) => {
                    let spec: CellSpec = text.parse()?;
                    let est = cache.run_cell(&spec)?;
                    println!("mean,std_error,n_terms");
                    println!("{},{},{}", est.mean, est.std_error, est.n_terms);
                    Ok(ExitCode::SUCCESS)
                }
                (None, None) => bail!("reproduce needs --csv or --spec"),
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
