//! `hybrid-mgr`: train agents and delegation managers, evaluate teams and
//! reproduce the result tables.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hybrid_manager::harness::{self, ExperimentConfig};
use hybrid_manager::oracle::optimal_cost;

#[derive(Parser)]
#[command(name = "hybrid-mgr", version, about)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML); defaults cover the bundled grids.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per grid and risk level.
    TrainAgents,
    /// Train managers for the configured teams.
    TrainManager(Select),
    /// Evaluate stored managers and write episode traces.
    Evaluate(Select),
    /// Print the optimal cost for a grid and delta.
    Oracle {
        /// Bundled layout name or grid file.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        delta: usize,
    },
    /// Train agents, then run the full sweep and write the tables.
    ReproduceTables {
        /// Independent manager trainings averaged per cell.
        #[arg(long)]
        replicates: Option<usize>,
    },
}

#[derive(Args)]
struct Select {
    /// Restrict to one configured grid (by name).
    #[arg(long)]
    grid: Option<String>,
    /// Restrict to one delta.
    #[arg(long)]
    delta: Option<usize>,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn print_paths(paths: &[PathBuf], json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(paths)?);
    } else {
        for p in paths {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let json = cli.common.json;
    match cli.command {
        Command::TrainAgents => {
            let cfg = load_config(&cli.common)?;
            print_paths(&harness::cmd_train_agents(&cfg)?, json)
        }
        Command::TrainManager(sel) => {
            let cfg = load_config(&cli.common)?;
            print_paths(
                &harness::cmd_train_manager(&cfg, sel.grid.as_deref(), sel.delta)?,
                json,
            )
        }
        Command::Evaluate(sel) => {
            let cfg = load_config(&cli.common)?;
            let records = harness::cmd_evaluate(&cfg, sel.grid.as_deref(), sel.delta)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&records)?);
            } else {
                for r in &records {
                    let team: Vec<&str> = r.team.iter().map(|l| l.name()).collect();
                    let e = &r.evaluation;
                    println!(
                        "{} {} delta_I={}: mean_cost {:.2}, success {:.2}, rho {:.2}, m {:.2}",
                        r.grid,
                        team.join("+"),
                        r.delta_i,
                        e.mean_cost,
                        e.success_rate,
                        e.mean_rho,
                        e.mean_m
                    );
                }
            }
            Ok(())
        }
        Command::Oracle { grid, delta } => {
            let base = cli
                .common
                .config
                .as_deref()
                .and_then(Path::parent)
                .map_or_else(PathBuf::new, Path::to_path_buf);
            let named = harness::resolve_grid(&grid, &base)?;
            let result =
                optimal_cost(&named.grid, delta).with_context(|| format!("grid {}", named.name))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&result)?);
            } else {
                let path: Vec<String> = result.path.iter().map(ToString::to_string).collect();
                println!(
                    "{} delta_I={delta}: cost {} ({} steps, {} interventions)",
                    named.name,
                    result.cost,
                    result.steps(),
                    result.interventions
                );
                println!("path: {}", path.join(" "));
            }
            Ok(())
        }
        Command::ReproduceTables { replicates } => {
            let mut cfg = load_config(&cli.common)?;
            if let Some(n) = replicates {
                cfg.replicates = n;
            }
            let report = harness::cmd_reproduce(&cfg)?;
            let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
            if json {
                println!("{}", serde_json::to_string_pretty(&report.rows)?);
            } else {
                print!("{}", harness::results_markdown(&report.rows, &cfg.deltas));
                println!("wrote {}", report.csv_path.display());
            }
            if failed > 0 {
                log::warn!("{failed} cells failed; see {}", report.json_path.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
