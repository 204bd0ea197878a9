//! Experiment driver: configuration, per-run seeding, artifact persistence
//! and the result tables.
//!
//! Artifacts live under the configured output directory:
//!
//! ```text
//! agents/<grid>/<Level>.json       trained agent policy
//! agents/<grid>/<Level>.log.csv    per-episode training log
//! managers/<grid>/<team>_d<k>.json trained manager
//! traces/<grid>/<team>_d<k>.jsonl  evaluation traces
//! results.csv, results.json, results.md
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{
    train_agent_logged, AgentPolicy, AgentTrainingConfig, PolicyFormatError, RiskLevel,
    RiskProfile, TrainingError,
};
use crate::gridworld::{GridError, GridSpec};
use crate::layouts;
use crate::manager::{
    evaluate_team, traces_to_jsonl, train_manager, ManagerConfig, ManagerError, ManagerFormatError,
    ManagerPolicy, ManagerTrainingError, RewardMode, Team, TeamEvaluation,
};
use crate::oracle::optimal_cost;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "HYBRID_MGR_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot parse configuration {path}: {source}")]
    ConfigSyntax {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("grid file {path} cannot be read: {source}")]
    GridFile {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("grid {name} is invalid: {source}")]
    Grid {
        name: String,
        #[source]
        source: GridError,
    },
    #[error("training on grid {grid} failed: {source}")]
    Training {
        grid: String,
        #[source]
        source: TrainingError,
    },
    #[error("manager training for {team} on {grid} at delta {delta_i} failed: {source}")]
    ManagerTraining {
        grid: String,
        team: String,
        delta_i: usize,
        #[source]
        source: ManagerTrainingError,
    },
    #[error(transparent)]
    Manager(#[from] ManagerError),
    #[error("missing artifact {0}; run the preceding pipeline step first")]
    MissingArtifact(PathBuf),
    #[error("agent policy {path} is unreadable: {source}")]
    AgentFormat {
        path: PathBuf,
        #[source]
        source: PolicyFormatError,
    },
    #[error("manager policy {path} is unreadable: {source}")]
    ManagerFormat {
        path: PathBuf,
        #[source]
        source: ManagerFormatError,
    },
    #[error("artifact {path} does not belong to grid {grid}")]
    ForeignArtifact { path: PathBuf, grid: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    Threads(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Bundled layout names or paths to grid files.
    pub grids: Vec<String>,
    /// Each team lists its agents' risk levels in delegation-index order.
    pub teams: Vec<Vec<RiskLevel>>,
    #[serde(rename = "delta_I")]
    pub deltas: Vec<usize>,
    pub nu: f64,
    pub reward_mode: RewardMode,
    pub agent_episodes: usize,
    pub manager_episodes: usize,
    pub eval_episodes: usize,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Independent manager trainings averaged per cell.
    pub replicates: usize,
    /// Directory that relative grid paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut teams = Vec::new();
        for (i, &a) in RiskLevel::ALL.iter().enumerate() {
            for &b in &RiskLevel::ALL[i + 1..] {
                teams.push(vec![a, b]);
            }
        }
        ExperimentConfig {
            grids: layouts::BUNDLED.iter().map(|s| s.to_string()).collect(),
            teams,
            deltas: vec![0, 1, 2, 3],
            nu: 0.2,
            reward_mode: RewardMode::Episodic,
            agent_episodes: 20_000,
            manager_episodes: 5_000,
            eval_episodes: 50,
            master_seed: 0,
            out_dir: PathBuf::from("results"),
            replicates: 1,
            base_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, HarnessError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|source| HarnessError::ConfigSyntax {
                path: origin.to_path_buf(),
                source,
            })?;
        cfg.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        if cfg.out_dir.is_relative() {
            cfg.out_dir = cfg.base_dir.join(&cfg.out_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: &str| Err(HarnessError::Config(msg.to_string()));
        if self.grids.is_empty() {
            return fail("at least one grid is required");
        }
        if self.teams.is_empty() || self.teams.iter().any(Vec::is_empty) {
            return fail("every team needs at least one agent");
        }
        if self.deltas.is_empty() {
            return fail("at least one delta_I value is required");
        }
        if !(self.nu > 0.0 && self.nu.is_finite()) {
            return fail("nu must be positive");
        }
        for (name, n) in [
            ("agent_episodes", self.agent_episodes),
            ("manager_episodes", self.manager_episodes),
            ("eval_episodes", self.eval_episodes),
            ("replicates", self.replicates),
        ] {
            if n == 0 {
                return Err(HarnessError::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Risk levels appearing in any team, in canonical order.
    pub fn levels(&self) -> Vec<RiskLevel> {
        self.teams
            .iter()
            .flatten()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn resolve_grids(&self) -> Result<Vec<NamedGrid>, HarnessError> {
        self.grids
            .iter()
            .map(|g| resolve_grid(g, &self.base_dir))
            .collect()
    }

    fn agent_path(&self, grid: &str, level: RiskLevel) -> PathBuf {
        self.out_dir
            .join("agents")
            .join(grid)
            .join(format!("{level}.json"))
    }

    fn manager_path(&self, grid: &str, team: &[RiskLevel], delta_i: usize) -> PathBuf {
        self.out_dir
            .join("managers")
            .join(grid)
            .join(format!("{}_d{delta_i}.json", team_label(team)))
    }

    fn trace_path(&self, grid: &str, team: &[RiskLevel], delta_i: usize) -> PathBuf {
        self.out_dir
            .join("traces")
            .join(grid)
            .join(format!("{}_d{delta_i}.jsonl", team_label(team)))
    }

    fn manager_config(
        &self,
        grid: &NamedGrid,
        team: &[RiskLevel],
        delta_i: usize,
        replicate: u64,
    ) -> ManagerConfig {
        ManagerConfig {
            delta_i,
            nu: self.nu,
            reward_mode: self.reward_mode,
            episodes: self.manager_episodes,
            seed: self.seed(grid, team, delta_i, Phase::ManagerTraining, replicate),
            ..ManagerConfig::default()
        }
    }

    fn seed(
        &self,
        grid: &NamedGrid,
        team: &[RiskLevel],
        delta_i: usize,
        phase: Phase,
        episode: u64,
    ) -> u64 {
        seed_derivation(
            self.master_seed,
            &RunIdentity {
                grid_tag: grid.grid.tag(),
                team_tags: team.iter().map(|l| l.name().to_string()).collect(),
                delta_i,
                phase,
                episode,
            },
        )
    }
}

pub fn team_label(team: &[RiskLevel]) -> String {
    team.iter().map(|l| l.name()).collect::<Vec<_>>().join("+")
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedGrid {
    pub name: String,
    pub grid: GridSpec,
}

/// A bundled layout name, or otherwise a file path relative to `base`.
pub fn resolve_grid(spec: &str, base: &Path) -> Result<NamedGrid, HarnessError> {
    if let Some(parsed) = layouts::bundled(spec) {
        let grid = parsed.map_err(|source| HarnessError::Grid {
            name: spec.to_string(),
            source,
        })?;
        return Ok(NamedGrid {
            name: spec.to_string(),
            grid,
        });
    }
    let path = base.join(spec);
    let text = fs::read_to_string(&path).map_err(|source| HarnessError::GridFile {
        path: path.clone(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| spec.to_string());
    let grid = GridSpec::parse(&text).map_err(|source| HarnessError::Grid {
        name: path.display().to_string(),
        source,
    })?;
    Ok(NamedGrid { name, grid })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    AgentTraining,
    ManagerTraining,
    Evaluation,
}

impl Phase {
    fn code(self) -> u8 {
        match self {
            Phase::AgentTraining => 1,
            Phase::ManagerTraining => 2,
            Phase::Evaluation => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RunIdentity {
    pub grid_tag: String,
    pub team_tags: Vec<String>,
    pub delta_i: usize,
    pub phase: Phase,
    pub episode: u64,
}

/// Derives a run seed from the master seed: the first eight bytes,
/// little-endian, of SHA-256 over a length-prefixed encoding of the run
/// identity.
pub fn seed_derivation(master_seed: u64, id: &RunIdentity) -> u64 {
    let mut h = Sha256::new();
    h.update(b"hybrid-mgr/seed/v1");
    h.update(master_seed.to_le_bytes());
    let mut field = |bytes: &[u8]| {
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field(id.grid_tag.as_bytes());
    field(&(id.team_tags.len() as u64).to_le_bytes());
    for tag in &id.team_tags {
        field(tag.as_bytes());
    }
    field(&(id.delta_i as u64).to_le_bytes());
    field(&[id.phase.code()]);
    field(&id.episode.to_le_bytes());
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

fn thread_pool() -> Result<rayon::ThreadPool, HarnessError> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                return Err(HarnessError::Config(format!(
                    "{THREADS_ENV}={v:?} is not a positive integer"
                )))
            }
        },
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Threads(e.to_string()))
}

/// Output files with their contents.
type Batch = Vec<(PathBuf, Vec<u8>)>;

/// Writes every file or none: on failure the files already written in this
/// batch are removed again.
fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<(), HarnessError> {
    let mut written: Vec<&Path> = Vec::new();
    for (path, bytes) in files {
        let result = path
            .parent()
            .map_or(Ok(()), fs::create_dir_all)
            .and_then(|()| fs::write(path, bytes));
        if let Err(source) = result {
            for done in written {
                let _ = fs::remove_file(done);
            }
            return Err(HarnessError::Io {
                path: path.clone(),
                source,
            });
        }
        written.push(path);
    }
    Ok(())
}

fn read_artifact(path: &Path) -> Result<String, HarnessError> {
    match fs::read_to_string(path) {
        Ok(text) => Ok(text),
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            Err(HarnessError::MissingArtifact(path.to_path_buf()))
        }
        Err(source) => Err(HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }),
    }
}

pub fn agent_training_config(
    cfg: &ExperimentConfig,
    grid: &NamedGrid,
    level: RiskLevel,
) -> AgentTrainingConfig {
    AgentTrainingConfig {
        episodes: cfg.agent_episodes,
        seed: cfg.seed(grid, &[level], 0, Phase::AgentTraining, 0),
        ..AgentTrainingConfig::default()
    }
}

fn training_log_csv(logs: &[crate::agents::EpisodeLog]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "episode",
        "start_col",
        "start_row",
        "steps",
        "total_return",
        "epsilon",
    ])?;
    for log in logs {
        w.write_record([
            log.episode.to_string(),
            log.start.col.to_string(),
            log.start.row.to_string(),
            log.steps.to_string(),
            log.total_return.to_string(),
            log.epsilon.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::Io {
        path: PathBuf::from("<training log>"),
        source: e.into_error(),
    })
}

/// Trains one agent per (grid, risk level used by any team) and writes the
/// policies with their training logs. Nothing is left behind on failure.
pub fn cmd_train_agents(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, HarnessError> {
    cfg.validate()?;
    let grids = cfg.resolve_grids()?;
    let jobs: Vec<(&NamedGrid, RiskLevel)> = grids
        .iter()
        .flat_map(|g| cfg.levels().into_iter().map(move |l| (g, l)))
        .collect();
    let trained: Vec<Result<Batch, HarnessError>> = thread_pool()?.install(|| {
        jobs.par_iter()
            .map(|&(grid, level)| {
                let tcfg = agent_training_config(cfg, grid, level);
                let mut logs = Vec::with_capacity(tcfg.episodes);
                let policy =
                    train_agent_logged(&grid.grid, &RiskProfile::standard(level), &tcfg, |l| {
                        logs.push(*l)
                    })
                    .map_err(|source| HarnessError::Training {
                        grid: grid.name.clone(),
                        source,
                    })?;
                log::info!("trained {level} agent on {}", grid.name);
                let path = cfg.agent_path(&grid.name, level);
                let log_path = path.with_extension("log.csv");
                Ok(vec![
                    (path, policy.to_json().into_bytes()),
                    (log_path, training_log_csv(&logs)?),
                ])
            })
            .collect()
    });
    let mut files = Vec::new();
    for job in trained {
        files.extend(job?);
    }
    write_all(&files)?;
    Ok(files
        .into_iter()
        .map(|(p, _)| p)
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect())
}

fn load_agent(
    cfg: &ExperimentConfig,
    grid: &NamedGrid,
    level: RiskLevel,
) -> Result<AgentPolicy, HarnessError> {
    let path = cfg.agent_path(&grid.name, level);
    let policy = AgentPolicy::from_json(&read_artifact(&path)?).map_err(|source| {
        HarnessError::AgentFormat {
            path: path.clone(),
            source,
        }
    })?;
    if policy.grid_tag() != grid.grid.tag() || policy.profile().level() != level {
        return Err(HarnessError::ForeignArtifact {
            path,
            grid: grid.name.clone(),
        });
    }
    Ok(policy)
}

fn load_team(
    cfg: &ExperimentConfig,
    grid: &NamedGrid,
    team: &[RiskLevel],
) -> Result<Team, HarnessError> {
    let agents = team
        .iter()
        .map(|&l| load_agent(cfg, grid, l))
        .collect::<Result<Vec<_>, _>>()?;
    Team::new(agents).map_err(|e| HarnessError::Manager(e.into()))
}

/// One (grid, team, delta) combination of the sweep.
#[derive(Debug, Clone)]
struct Cell<'a> {
    grid: &'a NamedGrid,
    team: &'a [RiskLevel],
    delta_i: usize,
}

fn cells<'a>(
    cfg: &'a ExperimentConfig,
    grids: &'a [NamedGrid],
    only_grid: Option<&str>,
    only_delta: Option<usize>,
) -> Result<Vec<Cell<'a>>, HarnessError> {
    let selected: Vec<&NamedGrid> = grids
        .iter()
        .filter(|g| only_grid.is_none_or(|name| g.name == name))
        .collect();
    if selected.is_empty() {
        return Err(HarnessError::Config(format!(
            "grid {:?} is not part of the configuration",
            only_grid.unwrap_or_default()
        )));
    }
    let deltas: Vec<usize> = match only_delta {
        Some(d) => vec![d],
        None => cfg.deltas.clone(),
    };
    let mut out = Vec::new();
    for grid in selected {
        for team in &cfg.teams {
            for &delta_i in &deltas {
                out.push(Cell {
                    grid,
                    team,
                    delta_i,
                });
            }
        }
    }
    Ok(out)
}

fn train_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    team: &Team,
    replicate: u64,
) -> Result<ManagerPolicy, HarnessError> {
    let mcfg = cfg.manager_config(cell.grid, cell.team, cell.delta_i, replicate);
    train_manager(&cell.grid.grid, team, &mcfg).map_err(|source| HarnessError::ManagerTraining {
        grid: cell.grid.name.clone(),
        team: team_label(cell.team),
        delta_i: cell.delta_i,
        source,
    })
}

/// Trains and stores one manager per selected (grid, team, delta).
pub fn cmd_train_manager(
    cfg: &ExperimentConfig,
    only_grid: Option<&str>,
    only_delta: Option<usize>,
) -> Result<Vec<PathBuf>, HarnessError> {
    cfg.validate()?;
    let grids = cfg.resolve_grids()?;
    let cells = cells(cfg, &grids, only_grid, only_delta)?;
    let trained: Vec<Result<(PathBuf, Vec<u8>), HarnessError>> = thread_pool()?.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let team = load_team(cfg, cell.grid, cell.team)?;
                let mgr = train_cell(cfg, cell, &team, 0)?;
                let path = cfg.manager_path(&cell.grid.name, cell.team, cell.delta_i);
                Ok((path, mgr.to_json().into_bytes()))
            })
            .collect()
    });
    let files = trained.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_all(&files)?;
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationRecord {
    pub grid: String,
    pub team: Vec<RiskLevel>,
    #[serde(rename = "delta_I")]
    pub delta_i: usize,
    #[serde(flatten)]
    pub evaluation: TeamEvaluation,
}

/// Evaluates stored managers and writes their episode traces.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    only_grid: Option<&str>,
    only_delta: Option<usize>,
) -> Result<Vec<EvaluationRecord>, HarnessError> {
    cfg.validate()?;
    let grids = cfg.resolve_grids()?;
    let cells = cells(cfg, &grids, only_grid, only_delta)?;
    type Evaluated = (EvaluationRecord, PathBuf, Vec<u8>);
    let evaluated: Vec<Result<Evaluated, HarnessError>> = thread_pool()?.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let team = load_team(cfg, cell.grid, cell.team)?;
                let path = cfg.manager_path(&cell.grid.name, cell.team, cell.delta_i);
                let mgr = ManagerPolicy::from_json(&read_artifact(&path)?)
                    .map_err(|source| HarnessError::ManagerFormat { path, source })?;
                let mcfg = cfg.manager_config(cell.grid, cell.team, cell.delta_i, 0);
                let seed = cfg.seed(cell.grid, cell.team, cell.delta_i, Phase::Evaluation, 0);
                let (evaluation, traces) =
                    evaluate_team(&cell.grid.grid, &team, &mgr, &mcfg, cfg.eval_episodes, seed)?;
                let record = EvaluationRecord {
                    grid: cell.grid.name.clone(),
                    team: cell.team.to_vec(),
                    delta_i: cell.delta_i,
                    evaluation,
                };
                let trace_path = cfg.trace_path(&cell.grid.name, cell.team, cell.delta_i);
                Ok((record, trace_path, traces_to_jsonl(&traces).into_bytes()))
            })
            .collect()
    });
    let mut records = Vec::new();
    let mut files = Vec::new();
    for item in evaluated {
        let (record, path, bytes) = item?;
        records.push(record);
        files.push((path, bytes));
    }
    write_all(&files)?;
    Ok(records)
}

/// One table cell. Failed cells keep the oracle optimum when it is known
/// and carry the error message instead of measurements.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub grid: String,
    pub grid_tag: String,
    pub team: Vec<RiskLevel>,
    #[serde(rename = "delta_I")]
    pub delta_i: usize,
    pub mean_cost: Option<f64>,
    pub optimal: Option<usize>,
    pub success_rate: Option<f64>,
    pub mean_rho: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<ResultRow>,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
    pub markdown_path: PathBuf,
}

fn run_cell(cfg: &ExperimentConfig, cell: &Cell) -> ResultRow {
    let mut row = ResultRow {
        grid: cell.grid.name.clone(),
        grid_tag: cell.grid.grid.tag(),
        team: cell.team.to_vec(),
        delta_i: cell.delta_i,
        mean_cost: None,
        optimal: None,
        success_rate: None,
        mean_rho: None,
        error: None,
    };
    match optimal_cost(&cell.grid.grid, cell.delta_i) {
        Ok(opt) => row.optimal = Some(opt.cost),
        Err(e) => {
            row.error = Some(e.to_string());
            return row;
        }
    }
    let measured = (|| -> Result<(f64, f64, f64), HarnessError> {
        let team = load_team(cfg, cell.grid, cell.team)?;
        let (mut cost, mut success, mut rho) = (0.0, 0.0, 0.0);
        for r in 0..cfg.replicates as u64 {
            let mgr = train_cell(cfg, cell, &team, r)?;
            let mcfg = cfg.manager_config(cell.grid, cell.team, cell.delta_i, r);
            let seed = cfg.seed(cell.grid, cell.team, cell.delta_i, Phase::Evaluation, r);
            let (eval, _) =
                evaluate_team(&cell.grid.grid, &team, &mgr, &mcfg, cfg.eval_episodes, seed)?;
            cost += eval.mean_cost;
            success += eval.success_rate;
            rho += eval.mean_rho;
        }
        let n = cfg.replicates as f64;
        Ok((cost / n, success / n, rho / n))
    })();
    match measured {
        Ok((cost, success, rho)) => {
            row.mean_cost = Some(cost);
            row.success_rate = Some(success);
            row.mean_rho = Some(rho);
            if row.optimal.is_some_and(|o| cost < o as f64) {
                log::warn!(
                    "{} {} delta {} scored below the oracle optimum",
                    row.grid,
                    team_label(cell.team),
                    row.delta_i
                );
            }
        }
        Err(e) => {
            log::warn!(
                "{} {} delta {}: {e}",
                row.grid,
                team_label(cell.team),
                row.delta_i
            );
            row.error = Some(e.to_string());
        }
    }
    row
}

/// Full sweep over the configured grids, teams and deltas using stored
/// agent policies. Cell failures are recorded in their rows; the sweep
/// itself fails only on configuration or output errors.
pub fn cmd_run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cfg.validate()?;
    let grids = cfg.resolve_grids()?;
    let cells = cells(cfg, &grids, None, None)?;
    let rows: Vec<ResultRow> =
        thread_pool()?.install(|| cells.par_iter().map(|c| run_cell(cfg, c)).collect());

    let csv_path = cfg.out_dir.join("results.csv");
    let json_path = cfg.out_dir.join("results.json");
    let markdown_path = cfg.out_dir.join("results.md");
    let json = serde_json::to_string_pretty(&rows).expect("result rows serialize") + "\n";
    write_all(&[
        (csv_path.clone(), results_csv(&rows)?),
        (json_path.clone(), json.into_bytes()),
        (
            markdown_path.clone(),
            results_markdown(&rows, &cfg.deltas).into_bytes(),
        ),
    ])?;
    Ok(ExperimentReport {
        rows,
        csv_path,
        json_path,
        markdown_path,
    })
}

/// Agent training followed by the full sweep.
pub fn cmd_reproduce(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    cmd_train_agents(cfg)?;
    cmd_run_experiment(cfg)
}

fn opt_fixed(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

pub fn results_csv(rows: &[ResultRow]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "grid",
        "team",
        "delta_I",
        "mean_cost",
        "optimal",
        "success_rate",
        "mean_rho",
    ])?;
    for r in rows {
        w.write_record([
            r.grid.clone(),
            team_label(&r.team),
            r.delta_i.to_string(),
            opt_fixed(r.mean_cost),
            r.optimal.map(|o| o.to_string()).unwrap_or_default(),
            opt_fixed(r.success_rate),
            opt_fixed(r.mean_rho),
        ])?;
    }
    w.into_inner().map_err(|e| HarnessError::Io {
        path: PathBuf::from("<results csv>"),
        source: e.into_error(),
    })
}

/// Formats a table cell as `mean (optimum)`, e.g. `8.00 (8.0)`.
pub fn format_cell(row: &ResultRow) -> String {
    let optimum = row
        .optimal
        .map_or_else(|| "?".to_string(), |o| format!("{:.1}", o as f64));
    match row.mean_cost {
        Some(c) => format!("{c:.2} ({optimum})"),
        None => format!("error ({optimum})"),
    }
}

/// One table per grid: a row per team, a column per delta.
pub fn results_markdown(rows: &[ResultRow], deltas: &[usize]) -> String {
    let mut out = String::new();
    let mut grids: Vec<&str> = Vec::new();
    for r in rows {
        if !grids.contains(&r.grid.as_str()) {
            grids.push(&r.grid);
        }
    }
    for grid in grids {
        let _ = writeln!(out, "### {grid}\n");
        out.push_str("| Team |");
        for d in deltas {
            let _ = write!(out, " δ_I = {d} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---|".repeat(deltas.len()));
        out.push('\n');
        let mut teams: Vec<&[RiskLevel]> = Vec::new();
        for r in rows.iter().filter(|r| r.grid == grid) {
            if !teams.contains(&r.team.as_slice()) {
                teams.push(&r.team);
            }
        }
        for team in teams {
            let names: Vec<&str> = team.iter().map(|l| l.name()).collect();
            let _ = write!(out, "| {} |", names.join(", "));
            for d in deltas {
                let cell = rows
                    .iter()
                    .find(|r| r.grid == grid && r.team == team && r.delta_i == *d)
                    .map_or_else(String::new, format_cell);
                let _ = write!(out, " {cell} |");
            }
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
