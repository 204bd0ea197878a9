//! The intervening manager.
//!
//! The manager observes the team only at intervention points: the start
//! cell and every arrival that violates its proximity constraint. At each
//! such point it delegates control to one team member, whose greedy policy
//! then runs until the next cue, a terminal cell or the step cap. Those
//! delegation windows are the manager's transitions; intermediate cells
//! are recorded for tracing but never reach the learner.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{argmax_canonical, check_range, AgentPolicy, ConfigError};
use crate::gridworld::{CellKind, GridSpec, Position};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    /// Terminal reward, credited backward through the episode's decisions.
    Episodic,
    /// Per-window reward increments that sum to the terminal reward.
    Immediate,
}

impl fmt::Display for RewardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardMode::Episodic => "episodic",
            RewardMode::Immediate => "immediate",
        })
    }
}

impl std::str::FromStr for RewardMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "episodic" => Ok(RewardMode::Episodic),
            "immediate" => Ok(RewardMode::Immediate),
            other => Err(format!("unknown reward mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManagerConfig {
    pub delta_i: usize,
    pub nu: f64,
    pub gamma: f64,
    pub reward_mode: RewardMode,
    pub alpha: f64,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub episodes: usize,
    pub seed: u64,
    /// `None` means four times the number of grid cells.
    pub step_cap: Option<usize>,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig {
            delta_i: 1,
            nu: 0.2,
            gamma: 0.99,
            reward_mode: RewardMode::Episodic,
            alpha: 0.1,
            epsilon_start: 1.0,
            epsilon_decay: 0.995,
            epsilon_floor: 0.01,
            episodes: 5_000,
            seed: 0,
            step_cap: None,
        }
    }
}

impl ManagerConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_range(
            "nu",
            self.nu,
            self.nu > 0.0 && self.nu.is_finite(),
            "(0, inf)",
        )?;
        check_range(
            "gamma",
            self.gamma,
            self.gamma > 0.0 && self.gamma < 1.0,
            "(0, 1)",
        )?;
        check_range(
            "alpha",
            self.alpha,
            self.alpha > 0.0 && self.alpha <= 1.0,
            "(0, 1]",
        )?;
        for (name, v) in [
            ("epsilon_start", self.epsilon_start),
            ("epsilon_decay", self.epsilon_decay),
            ("epsilon_floor", self.epsilon_floor),
        ] {
            check_range(name, v, (0.0..=1.0).contains(&v), "[0, 1]")?;
        }
        if self.episodes == 0 {
            return Err(ConfigError::Zero("episodes"));
        }
        if self.step_cap == Some(0) {
            return Err(ConfigError::Zero("step_cap"));
        }
        Ok(())
    }

    pub fn cap(&self, grid: &GridSpec) -> usize {
        self.step_cap.unwrap_or(4 * grid.cell_count())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TeamError {
    #[error("a team needs at least one agent")]
    Empty,
    #[error("agent {index} was trained on grid {found}, expected {expected}")]
    GridMismatch {
        index: usize,
        expected: String,
        found: String,
    },
}

/// Agents available for delegation, addressed by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Team(Vec<AgentPolicy>);

impl Team {
    pub fn new(agents: Vec<AgentPolicy>) -> Result<Self, TeamError> {
        let first = agents.first().ok_or(TeamError::Empty)?;
        let expected = first.grid_tag().to_string();
        if let Some((index, a)) = agents
            .iter()
            .enumerate()
            .find(|(_, a)| a.grid_tag() != expected)
        {
            return Err(TeamError::GridMismatch {
                index,
                expected,
                found: a.grid_tag().to_string(),
            });
        }
        Ok(Team(agents))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn agents(&self) -> &[AgentPolicy] {
        &self.0
    }

    pub fn grid_tag(&self) -> &str {
        self.0[0].grid_tag()
    }

    /// Profile names in team order, e.g. `["Low", "High"]`.
    pub fn tags(&self) -> Vec<String> {
        self.0
            .iter()
            .map(|a| a.profile().name().to_string())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    GoalFound,
    FailureEntered,
    StepCapExceeded,
}

/// Position plus the fresh-delegation flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CueState {
    pub position: Position,
    pub eta: bool,
}

/// Intervention cue: fires on the goal, or on a constraint violation unless
/// a delegation was just made at this cell.
pub fn cue(grid: &GridSpec, delta_i: usize, pos: Position, eta: bool) -> bool {
    pos == grid.goal() || (violates(grid, delta_i, pos) && !eta)
}

fn violates(grid: &GridSpec, delta_i: usize, pos: Position) -> bool {
    grid.distances().get(pos) <= delta_i
}

/// `1 - tanh(nu * rho)` on success, `-tanh(nu * rho)` otherwise.
pub fn manager_reward(outcome: Outcome, rho: usize, nu: f64) -> f64 {
    let penalty = (nu * rho as f64).tanh();
    match outcome {
        Outcome::GoalFound => 1.0 - penalty,
        _ => -penalty,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WindowEnd {
    Cue,
    Goal,
    Failure,
    Cap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelegationWindow {
    /// Cell after each action, in order; blocked moves repeat the cell.
    pub segment: Vec<Position>,
    pub end: Position,
    pub reason: WindowEnd,
}

/// Runs the delegated agent's greedy policy from a fresh delegation.
///
/// The cue is evaluated on every arrival at a new cell; a blocked move
/// leaves the agent where the delegation was made, so it cannot re-cue.
pub fn run_delegation_window(
    grid: &GridSpec,
    agent: &AgentPolicy,
    start: CueState,
    delta_i: usize,
    step_cap: usize,
) -> DelegationWindow {
    let mut segment = Vec::new();
    let mut pos = start.position;
    let mut eta = start.eta;
    while segment.len() < step_cap {
        let next = grid.step(pos, agent.greedy(pos));
        segment.push(next);
        if next != pos {
            eta = false;
        }
        pos = next;
        let reason = match grid.kind(pos) {
            CellKind::Goal => Some(WindowEnd::Goal),
            CellKind::Failure => Some(WindowEnd::Failure),
            _ if cue(grid, delta_i, pos, eta) => Some(WindowEnd::Cue),
            _ => None,
        };
        if let Some(reason) = reason {
            return DelegationWindow {
                segment,
                end: pos,
                reason,
            };
        }
    }
    DelegationWindow {
        segment,
        end: pos,
        reason: WindowEnd::Cap,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delegation {
    pub position: Position,
    pub agent: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    /// Start cell followed by the cell after every action.
    pub visited: Vec<Position>,
    pub delegations: Vec<Delegation>,
    /// Constraint-violation cues; the goal cue and the initial delegation
    /// are not counted.
    pub rho: usize,
    /// Actions taken across all windows.
    pub m: usize,
    pub outcome: Outcome,
}

pub fn episode_cost(trace: &EpisodeTrace) -> usize {
    trace.m + trace.rho
}

/// Delegation values per (cell, agent).
#[derive(Debug, Clone, PartialEq)]
pub struct ManagerPolicy {
    grid_tag: String,
    team_tags: Vec<String>,
    delta_i: usize,
    nu: f64,
    width: usize,
    height: usize,
    values: Vec<Vec<f64>>,
    walls: Vec<bool>,
}

impl ManagerPolicy {
    pub fn untrained(grid: &GridSpec, team: &Team, delta_i: usize, nu: f64) -> Self {
        ManagerPolicy {
            grid_tag: grid.tag(),
            team_tags: team.tags(),
            delta_i,
            nu,
            width: grid.width(),
            height: grid.height(),
            values: vec![vec![0.0; team.len()]; grid.cell_count()],
            walls: grid
                .positions()
                .map(|p| grid.kind(p) == CellKind::Wall)
                .collect(),
        }
    }

    pub fn grid_tag(&self) -> &str {
        &self.grid_tag
    }

    pub fn team_tags(&self) -> &[String] {
        &self.team_tags
    }

    pub fn delta_i(&self) -> usize {
        self.delta_i
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    fn index(&self, pos: Position) -> usize {
        pos.row * self.width + pos.col
    }

    pub fn values(&self, pos: Position) -> &[f64] {
        &self.values[self.index(pos)]
    }

    fn values_mut(&mut self, pos: Position) -> &mut [f64] {
        let i = self.index(pos);
        &mut self.values[i]
    }

    /// Greedy delegation; ties go to the lowest agent index.
    pub fn choose(&self, pos: Position) -> usize {
        argmax_canonical(self.values(pos))
    }

    fn best_value(&self, pos: Position) -> f64 {
        self.values(pos)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ManagerDoc::from(self)).expect("manager document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ManagerFormatError> {
        let doc: ManagerDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Debug, Error)]
pub enum ManagerFormatError {
    #[error("malformed manager document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported manager document version {0}")]
    Version(u32),
    #[error("table entry ({col}, {row}, agent {agent}) does not fit a {width}x{height} grid with {team} agents")]
    OutOfBounds {
        col: usize,
        row: usize,
        agent: usize,
        width: usize,
        height: usize,
        team: usize,
    },
}

pub const MANAGER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManagerDoc {
    version: u32,
    grid_tag: String,
    team_tags: Vec<String>,
    #[serde(rename = "delta_I")]
    delta_i: usize,
    nu: f64,
    width: usize,
    height: usize,
    table: Vec<(usize, usize, usize, f64)>,
}

impl From<&ManagerPolicy> for ManagerDoc {
    fn from(p: &ManagerPolicy) -> Self {
        let mut table = Vec::new();
        for (i, row) in p.values.iter().enumerate() {
            if p.walls[i] {
                continue;
            }
            for (agent, &value) in row.iter().enumerate() {
                table.push((i % p.width, i / p.width, agent, value));
            }
        }
        ManagerDoc {
            version: MANAGER_VERSION,
            grid_tag: p.grid_tag.clone(),
            team_tags: p.team_tags.clone(),
            delta_i: p.delta_i,
            nu: p.nu,
            width: p.width,
            height: p.height,
            table,
        }
    }
}

impl TryFrom<ManagerDoc> for ManagerPolicy {
    type Error = ManagerFormatError;

    fn try_from(doc: ManagerDoc) -> Result<Self, Self::Error> {
        if doc.version != MANAGER_VERSION {
            return Err(ManagerFormatError::Version(doc.version));
        }
        let team = doc.team_tags.len();
        let cells = doc.width * doc.height;
        let mut values = vec![vec![0.0; team]; cells];
        let mut walls = vec![true; cells];
        for (col, row, agent, value) in doc.table {
            if col >= doc.width || row >= doc.height || agent >= team {
                return Err(ManagerFormatError::OutOfBounds {
                    col,
                    row,
                    agent,
                    width: doc.width,
                    height: doc.height,
                    team,
                });
            }
            let i = row * doc.width + col;
            values[i][agent] = value;
            walls[i] = false;
        }
        Ok(ManagerPolicy {
            grid_tag: doc.grid_tag,
            team_tags: doc.team_tags,
            delta_i: doc.delta_i,
            nu: doc.nu,
            width: doc.width,
            height: doc.height,
            values,
            walls,
        })
    }
}

/// How the manager picks agents during an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Exploration {
    Greedy,
    EpsilonGreedy(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManagerError {
    #[error(transparent)]
    Team(#[from] TeamError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("manager policy was trained for grid {found}, expected {expected}")]
    GridMismatch { expected: String, found: String },
    #[error("manager policy expects {expected} agents, team has {found}")]
    TeamSize { expected: usize, found: usize },
}

fn check_inputs(grid: &GridSpec, team: &Team, mgr: &ManagerPolicy) -> Result<(), ManagerError> {
    if team.is_empty() {
        return Err(TeamError::Empty.into());
    }
    let tag = grid.tag();
    for found in [team.grid_tag(), mgr.grid_tag()] {
        if found != tag {
            return Err(ManagerError::GridMismatch {
                expected: tag,
                found: found.to_string(),
            });
        }
    }
    if mgr.team_tags().len() != team.len() {
        return Err(ManagerError::TeamSize {
            expected: mgr.team_tags().len(),
            found: team.len(),
        });
    }
    Ok(())
}

/// One delegation decision and the window it produced.
struct Transition {
    at: Position,
    agent: usize,
    window: DelegationWindow,
}

fn simulate(
    grid: &GridSpec,
    team: &Team,
    mgr: &ManagerPolicy,
    delta_i: usize,
    cap: usize,
    explore: Exploration,
    rng: &mut ChaCha8Rng,
) -> (EpisodeTrace, Vec<Transition>) {
    let mut pos = grid.start();
    let mut visited = vec![pos];
    let mut transitions: Vec<Transition> = Vec::new();
    let mut rho = 0;
    let outcome = loop {
        let agent = match explore {
            Exploration::EpsilonGreedy(eps) if rng.gen::<f64>() < eps => {
                rng.gen_range(0..team.len())
            }
            _ => mgr.choose(pos),
        };
        let remaining = cap - (visited.len() - 1);
        let window = run_delegation_window(
            grid,
            &team.agents()[agent],
            CueState {
                position: pos,
                eta: true,
            },
            delta_i,
            remaining,
        );
        visited.extend_from_slice(&window.segment);
        pos = window.end;
        let reason = window.reason;
        transitions.push(Transition {
            at: window_start(&transitions, grid),
            agent,
            window,
        });
        match reason {
            WindowEnd::Goal => break Outcome::GoalFound,
            WindowEnd::Failure => break Outcome::FailureEntered,
            WindowEnd::Cap => break Outcome::StepCapExceeded,
            WindowEnd::Cue => {
                rho += 1;
                if visited.len() > cap {
                    break Outcome::StepCapExceeded;
                }
            }
        }
    };
    let trace = EpisodeTrace {
        m: visited.len() - 1,
        visited,
        delegations: transitions
            .iter()
            .map(|t| Delegation {
                position: t.at,
                agent: t.agent,
            })
            .collect(),
        rho,
        outcome,
    };
    (trace, transitions)
}

fn window_start(previous: &[Transition], grid: &GridSpec) -> Position {
    previous.last().map_or(grid.start(), |t| t.window.end)
}

/// Runs one managed episode. The initial delegation at the start cell is
/// free; every constraint-violation cue afterwards counts toward `rho`.
pub fn run_managed_episode(
    grid: &GridSpec,
    team: &Team,
    mgr: &ManagerPolicy,
    cfg: &ManagerConfig,
    seed: u64,
    explore: Exploration,
) -> Result<EpisodeTrace, ManagerError> {
    check_inputs(grid, team, mgr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(simulate(
        grid,
        team,
        mgr,
        cfg.delta_i,
        cfg.cap(grid),
        explore,
        &mut rng,
    )
    .0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TeamEvaluation {
    pub episodes: usize,
    pub mean_cost: f64,
    pub success_rate: f64,
    pub mean_rho: f64,
    pub mean_m: f64,
}

/// Greedy episodes; `seed` feeds the per-episode generators even though a
/// greedy manager never draws from them.
pub fn evaluate_team(
    grid: &GridSpec,
    team: &Team,
    mgr: &ManagerPolicy,
    cfg: &ManagerConfig,
    episodes: usize,
    seed: u64,
) -> Result<(TeamEvaluation, Vec<EpisodeTrace>), ManagerError> {
    check_inputs(grid, team, mgr)?;
    let mut traces = Vec::with_capacity(episodes);
    for k in 0..episodes {
        traces.push(run_managed_episode(
            grid,
            team,
            mgr,
            cfg,
            seed.wrapping_add(k as u64),
            Exploration::Greedy,
        )?);
    }
    let n = episodes.max(1) as f64;
    let sum = |f: &dyn Fn(&EpisodeTrace) -> f64| traces.iter().map(f).sum::<f64>() / n;
    let eval = TeamEvaluation {
        episodes,
        mean_cost: sum(&|t| episode_cost(t) as f64),
        success_rate: sum(&|t| f64::from(u8::from(t.outcome == Outcome::GoalFound))),
        mean_rho: sum(&|t| t.rho as f64),
        mean_m: sum(&|t| t.m as f64),
    };
    Ok((eval, traces))
}

/// Serializes traces as JSON lines.
pub fn traces_to_jsonl(traces: &[EpisodeTrace]) -> String {
    let mut out = String::new();
    for t in traces {
        out.push_str(&serde_json::to_string(t).expect("trace serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManagerTrainingError {
    #[error(transparent)]
    Invalid(#[from] ManagerError),
    #[error("manager did not converge after {episodes} episodes: greedy evaluation success rate {}", .snapshot.success_rate)]
    NotConverged {
        episodes: usize,
        snapshot: TeamEvaluation,
        policy: Box<ManagerPolicy>,
    },
}

/// Tabular Q-learning over intervention states.
///
/// Episodic mode replays the episode's decisions backward once it ends:
/// the last decision is pulled toward the terminal reward and each earlier
/// one toward the discounted best value of the next decision cell.
/// Immediate mode updates online after every window with a reward that
/// telescopes to the terminal reward over the episode.
pub fn train_manager(
    grid: &GridSpec,
    team: &Team,
    cfg: &ManagerConfig,
) -> Result<ManagerPolicy, ManagerTrainingError> {
    cfg.validate().map_err(ManagerError::from)?;
    let mut mgr = ManagerPolicy::untrained(grid, team, cfg.delta_i, cfg.nu);
    check_inputs(grid, team, &mgr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cap = cfg.cap(grid);
    let mut epsilon = cfg.epsilon_start;

    for _ in 0..cfg.episodes {
        match cfg.reward_mode {
            RewardMode::Episodic => {
                let (trace, transitions) = simulate(
                    grid,
                    team,
                    &mgr,
                    cfg.delta_i,
                    cap,
                    Exploration::EpsilonGreedy(epsilon),
                    &mut rng,
                );
                let terminal = manager_reward(trace.outcome, trace.rho, cfg.nu);
                let mut next_value: Option<f64> = None;
                for t in transitions.iter().rev() {
                    let target = match next_value {
                        None => terminal,
                        Some(v) => cfg.gamma * v,
                    };
                    let q = &mut mgr.values_mut(t.at)[t.agent];
                    *q += cfg.alpha * (target - *q);
                    next_value = Some(mgr.best_value(t.at));
                }
            }
            RewardMode::Immediate => {
                immediate_episode(grid, team, &mut mgr, cfg, cap, epsilon, &mut rng)
            }
        }
        epsilon = (epsilon * cfg.epsilon_decay).max(cfg.epsilon_floor);
    }

    let (snapshot, _) = evaluate_team(grid, team, &mgr, cfg, 1, cfg.seed)?;
    if snapshot.success_rate < 1.0 {
        return Err(ManagerTrainingError::NotConverged {
            episodes: cfg.episodes,
            snapshot,
            policy: Box::new(mgr),
        });
    }
    Ok(mgr)
}

fn immediate_episode(
    grid: &GridSpec,
    team: &Team,
    mgr: &mut ManagerPolicy,
    cfg: &ManagerConfig,
    cap: usize,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) {
    let mut pos = grid.start();
    let mut steps = 0;
    let mut rho = 0;
    loop {
        let agent = if rng.gen::<f64>() < epsilon {
            rng.gen_range(0..team.len())
        } else {
            mgr.choose(pos)
        };
        let window = run_delegation_window(
            grid,
            &team.agents()[agent],
            CueState {
                position: pos,
                eta: true,
            },
            cfg.delta_i,
            cap - steps,
        );
        steps += window.segment.len();
        let before = (cfg.nu * rho as f64).tanh();
        let (reward, terminal) = match window.reason {
            WindowEnd::Goal => (1.0, true),
            WindowEnd::Failure | WindowEnd::Cap => (0.0, true),
            WindowEnd::Cue => {
                rho += 1;
                (before - (cfg.nu * rho as f64).tanh(), steps >= cap)
            }
        };
        let target = if terminal {
            reward
        } else {
            reward + cfg.gamma * mgr.best_value(window.end)
        };
        let q = &mut mgr.values_mut(pos)[agent];
        *q += cfg.alpha * (target - *q);
        if terminal {
            return;
        }
        pos = window.end;
    }
}
