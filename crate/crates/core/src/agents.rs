//! Risk-averse navigating agents.
//!
//! Each agent sees the navigation reward plus its own proximity penalty,
//! evaluated at the arrived-at cell, and is trained independently with
//! one-step Q-learning from uniformly random start cells.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Action, CellKind, GridSpec, Position};

/// Values within this margin of the row maximum count as tied; ties go to
/// the earliest candidate in canonical order.
pub const TIE_TOLERANCE: f64 = 1e-9;

pub(crate) fn argmax_canonical(values: &[f64]) -> usize {
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .position(|&v| v >= best - TIE_TOLERANCE)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RiskLevel {
    None,
    Low,
    Medium,
    High,
}

impl RiskLevel {
    pub const ALL: [RiskLevel; 4] = [
        RiskLevel::None,
        RiskLevel::Low,
        RiskLevel::Medium,
        RiskLevel::High,
    ];

    /// Largest failure distance that still draws a penalty.
    pub fn support(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            RiskLevel::None => "None",
            RiskLevel::Low => "Low",
            RiskLevel::Medium => "Medium",
            RiskLevel::High => "High",
        }
    }

    pub fn from_support(support: usize) -> Option<Self> {
        Self::ALL.get(support).copied()
    }
}

impl fmt::Display for RiskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RiskLevel {
    type Err = ProfileError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ProfileError::UnknownLevel(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("unknown risk level {0:?}")]
    UnknownLevel(String),
    #[error("penalty at distance 0 is not allowed")]
    ZeroDistance,
    #[error("penalty {penalty} at distance {distance} must be negative")]
    NonNegative { distance: usize, penalty: f64 },
    #[error("penalty severity must not grow with distance (distance {distance})")]
    NotMonotone { distance: usize },
    #[error("penalty support {0} exceeds the High level")]
    SupportTooLarge(usize),
}

/// Per-agent proximity penalty schedule: failure distance to a negative
/// penalty, zero outside the listed distances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ProfileDoc", into = "ProfileDoc")]
pub struct RiskProfile {
    level: RiskLevel,
    penalties: BTreeMap<usize, f64>,
}

impl RiskProfile {
    /// Builds a profile from a contiguous schedule starting at distance 1.
    /// The level is the largest penalized distance.
    pub fn new(penalties: impl IntoIterator<Item = (usize, f64)>) -> Result<Self, ProfileError> {
        let penalties: BTreeMap<usize, f64> = penalties.into_iter().collect();
        let mut previous: Option<f64> = None;
        for (expected, (&distance, &penalty)) in (1..).zip(penalties.iter()) {
            if distance == 0 {
                return Err(ProfileError::ZeroDistance);
            }
            if penalty.is_nan() || penalty >= 0.0 {
                return Err(ProfileError::NonNegative { distance, penalty });
            }
            // gaps would leave a zero penalty inside the support
            if distance != expected {
                return Err(ProfileError::NotMonotone { distance });
            }
            if previous.is_some_and(|p| penalty.abs() > p.abs()) {
                return Err(ProfileError::NotMonotone { distance });
            }
            previous = Some(penalty);
        }
        let support = penalties.keys().next_back().copied().unwrap_or(0);
        let level =
            RiskLevel::from_support(support).ok_or(ProfileError::SupportTooLarge(support))?;
        Ok(RiskProfile { level, penalties })
    }

    pub fn standard(level: RiskLevel) -> Self {
        let schedule: &[(usize, f64)] = match level {
            RiskLevel::None => &[],
            RiskLevel::Low => &[(1, -20.0)],
            RiskLevel::Medium => &[(1, -20.0), (2, -10.0)],
            RiskLevel::High => &[(1, -35.0), (2, -15.0), (3, -5.0)],
        };
        RiskProfile::new(schedule.iter().copied()).expect("standard schedules are valid")
    }

    pub fn level(&self) -> RiskLevel {
        self.level
    }

    pub fn name(&self) -> &'static str {
        self.level.name()
    }

    pub fn penalties(&self) -> &BTreeMap<usize, f64> {
        &self.penalties
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileDoc {
    name: String,
    penalties: Vec<(usize, f64)>,
}

impl TryFrom<ProfileDoc> for RiskProfile {
    type Error = ProfileError;

    fn try_from(doc: ProfileDoc) -> Result<Self, Self::Error> {
        let profile = RiskProfile::new(doc.penalties)?;
        let named: RiskLevel = doc.name.parse()?;
        if named != profile.level {
            return Err(ProfileError::UnknownLevel(doc.name));
        }
        Ok(profile)
    }
}

impl From<RiskProfile> for ProfileDoc {
    fn from(p: RiskProfile) -> Self {
        ProfileDoc {
            name: p.name().to_string(),
            penalties: p.penalties.into_iter().collect(),
        }
    }
}

/// None, Low, Medium and High schedules.
pub fn standard_profiles() -> Vec<RiskProfile> {
    RiskLevel::ALL
        .into_iter()
        .map(RiskProfile::standard)
        .collect()
}

/// Navigation reward for the transition `s --a--> s2`.
pub fn nav_reward(grid: &GridSpec, s: Position, _a: Action, s2: Position) -> f64 {
    if s2 == s {
        return -10.0;
    }
    match grid.kind(s2) {
        CellKind::Failure => -20.0,
        CellKind::Goal => 100.0,
        _ => -1.0,
    }
}

pub fn proximity_penalty(profile: &RiskProfile, dist: usize) -> f64 {
    profile.penalties.get(&dist).copied().unwrap_or(0.0)
}

/// Navigation reward plus the proximity penalty at the arrived-at cell.
pub fn total_reward(
    grid: &GridSpec,
    profile: &RiskProfile,
    s: Position,
    a: Action,
    s2: Position,
) -> f64 {
    nav_reward(grid, s, a, s2) + proximity_penalty(profile, grid.distances().get(s2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrainingConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_decay: f64,
    pub epsilon_floor: f64,
    pub episodes: usize,
    /// `None` means four times the number of grid cells.
    pub max_steps: Option<usize>,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AgentTrainingConfig {
    fn default() -> Self {
        AgentTrainingConfig {
            alpha: 0.1,
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_decay: 0.999,
            epsilon_floor: 0.01,
            episodes: 20_000,
            max_steps: None,
            random_start: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{name} = {value} is outside {range}")]
    OutOfRange {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("{0} must be at least 1")]
    Zero(&'static str),
}

pub(crate) fn check_range(
    name: &'static str,
    value: f64,
    ok: bool,
    range: &'static str,
) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange { name, value, range })
    }
}

impl AgentTrainingConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_range(
            "alpha",
            self.alpha,
            self.alpha > 0.0 && self.alpha <= 1.0,
            "(0, 1]",
        )?;
        check_range(
            "gamma",
            self.gamma,
            self.gamma > 0.0 && self.gamma < 1.0,
            "(0, 1)",
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
        if self.max_steps == Some(0) {
            return Err(ConfigError::Zero("max_steps"));
        }
        Ok(())
    }

    pub fn step_cap(&self, grid: &GridSpec) -> usize {
        self.max_steps.unwrap_or(4 * grid.cell_count())
    }
}

/// Trained action-value table for one agent; the greedy readout is the
/// agent's behavior policy.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPolicy {
    grid_tag: String,
    profile: RiskProfile,
    width: usize,
    height: usize,
    /// Row-major per cell; walls keep zeros and are never read.
    values: Vec<[f64; 4]>,
    walls: Vec<bool>,
}

impl AgentPolicy {
    /// Zero-initialized table.
    pub fn untrained(grid: &GridSpec, profile: RiskProfile) -> Self {
        AgentPolicy {
            grid_tag: grid.tag(),
            profile,
            width: grid.width(),
            height: grid.height(),
            values: vec![[0.0; 4]; grid.cell_count()],
            walls: grid
                .positions()
                .map(|p| grid.kind(p) == CellKind::Wall)
                .collect(),
        }
    }

    pub fn grid_tag(&self) -> &str {
        &self.grid_tag
    }

    pub fn profile(&self) -> &RiskProfile {
        &self.profile
    }

    fn index(&self, pos: Position) -> usize {
        pos.row * self.width + pos.col
    }

    pub fn values(&self, pos: Position) -> &[f64; 4] {
        &self.values[self.index(pos)]
    }

    pub fn value(&self, pos: Position, action: Action) -> f64 {
        self.values[self.index(pos)][action.index()]
    }

    fn values_mut(&mut self, pos: Position) -> &mut [f64; 4] {
        let i = self.index(pos);
        &mut self.values[i]
    }

    pub fn greedy(&self, pos: Position) -> Action {
        Action::from_index(argmax_canonical(self.values(pos))).expect("four actions")
    }

    pub fn max_value(&self, pos: Position) -> f64 {
        self.values(pos)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PolicyDoc::from(self)).expect("policy document serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyFormatError> {
        let doc: PolicyDoc = serde_json::from_str(text)?;
        doc.try_into()
    }
}

#[derive(Debug, Error)]
pub enum PolicyFormatError {
    #[error("malformed policy document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported policy document version {0}")]
    Version(u32),
    #[error("policy table entry ({col}, {row}) lies outside the {width}x{height} grid")]
    OutOfBounds {
        col: usize,
        row: usize,
        width: usize,
        height: usize,
    },
    #[error("policy table entry ({col}, {row}) is out of order or duplicated")]
    Layout { col: usize, row: usize },
}

pub const POLICY_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PolicyDoc {
    version: u32,
    grid_tag: String,
    width: usize,
    height: usize,
    profile: RiskProfile,
    table: Vec<(usize, usize, Action, f64)>,
}

impl From<&AgentPolicy> for PolicyDoc {
    fn from(p: &AgentPolicy) -> Self {
        let mut table = Vec::new();
        for (i, row) in p.values.iter().enumerate() {
            if p.walls[i] {
                continue;
            }
            let (col, r) = (i % p.width, i / p.width);
            for action in Action::ALL {
                table.push((col, r, action, row[action.index()]));
            }
        }
        PolicyDoc {
            version: POLICY_VERSION,
            grid_tag: p.grid_tag.clone(),
            width: p.width,
            height: p.height,
            profile: p.profile.clone(),
            table,
        }
    }
}

impl TryFrom<PolicyDoc> for AgentPolicy {
    type Error = PolicyFormatError;

    fn try_from(doc: PolicyDoc) -> Result<Self, Self::Error> {
        if doc.version != POLICY_VERSION {
            return Err(PolicyFormatError::Version(doc.version));
        }
        let cells = doc.width * doc.height;
        let mut values = vec![[0.0; 4]; cells];
        let mut seen = vec![[false; 4]; cells];
        for (col, row, action, value) in doc.table {
            if col >= doc.width || row >= doc.height {
                return Err(PolicyFormatError::OutOfBounds {
                    col,
                    row,
                    width: doc.width,
                    height: doc.height,
                });
            }
            let i = row * doc.width + col;
            if seen[i][action.index()] {
                return Err(PolicyFormatError::Layout { col, row });
            }
            seen[i][action.index()] = true;
            values[i][action.index()] = value;
        }
        let walls: Vec<bool> = seen.iter().map(|s| !s.iter().any(|&x| x)).collect();
        if let Some(i) = seen
            .iter()
            .position(|s| s.iter().any(|&x| x) && !s.iter().all(|&x| x))
        {
            return Err(PolicyFormatError::Layout {
                col: i % doc.width,
                row: i / doc.width,
            });
        }
        Ok(AgentPolicy {
            grid_tag: doc.grid_tag,
            profile: doc.profile,
            width: doc.width,
            height: doc.height,
            values,
            walls,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutEnd {
    Goal,
    Failure,
    StepCap,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollout {
    pub path: Vec<Position>,
    pub end: RolloutEnd,
}

impl Rollout {
    pub fn steps(&self) -> usize {
        self.path.len() - 1
    }
}

/// Follows the greedy action from `from` until a terminal cell or the cap.
pub fn greedy_rollout(
    grid: &GridSpec,
    policy: &AgentPolicy,
    from: Position,
    cap: usize,
) -> Rollout {
    let mut path = vec![from];
    let mut pos = from;
    while path.len() <= cap {
        match grid.kind(pos) {
            CellKind::Goal => {
                return Rollout {
                    path,
                    end: RolloutEnd::Goal,
                }
            }
            CellKind::Failure => {
                return Rollout {
                    path,
                    end: RolloutEnd::Failure,
                }
            }
            _ => {}
        }
        pos = grid.step(pos, policy.greedy(pos));
        path.push(pos);
    }
    let end = match grid.kind(pos) {
        CellKind::Goal => RolloutEnd::Goal,
        CellKind::Failure => RolloutEnd::Failure,
        _ => RolloutEnd::StepCap,
    };
    Rollout { path, end }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{profile} agent failed to converge after {episodes} episodes: greedy rollout ended with {:?} after {} steps", .rollout.end, .rollout.steps())]
pub struct TrainingError {
    pub profile: RiskLevel,
    pub episodes: usize,
    pub rollout: Rollout,
    pub policy: Box<AgentPolicy>,
}

/// Per-episode training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub start: Position,
    pub steps: usize,
    pub total_return: f64,
    pub epsilon: f64,
}

/// Q-learning with epsilon-greedy exploration. On success the greedy
/// rollout from the start cell reaches the goal within the step cap.
pub fn train_agent(
    grid: &GridSpec,
    profile: &RiskProfile,
    cfg: &AgentTrainingConfig,
) -> Result<AgentPolicy, TrainingError> {
    train_agent_logged(grid, profile, cfg, |_| {})
}

pub fn train_agent_logged(
    grid: &GridSpec,
    profile: &RiskProfile,
    cfg: &AgentTrainingConfig,
    mut on_episode: impl FnMut(&EpisodeLog),
) -> Result<AgentPolicy, TrainingError> {
    let mut policy = AgentPolicy::untrained(grid, profile.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cap = cfg.step_cap(grid);
    let starts: Vec<Position> = grid
        .open_positions()
        .filter(|&p| !grid.is_terminal(p))
        .collect();
    let mut epsilon = cfg.epsilon_start;

    for episode in 0..cfg.episodes {
        let start = if cfg.random_start {
            starts[rng.gen_range(0..starts.len())]
        } else {
            grid.start()
        };
        let mut pos = start;
        let mut total_return = 0.0;
        let mut steps = 0;
        while steps < cap && !grid.is_terminal(pos) {
            let action = if rng.gen::<f64>() < epsilon {
                Action::ALL[rng.gen_range(0..4)]
            } else {
                policy.greedy(pos)
            };
            let next = grid.step(pos, action);
            let reward = total_reward(grid, profile, pos, action, next);
            let target = if grid.is_terminal(next) {
                reward
            } else {
                reward + cfg.gamma * policy.max_value(next)
            };
            let q = &mut policy.values_mut(pos)[action.index()];
            *q += cfg.alpha * (target - *q);
            total_return += reward;
            steps += 1;
            pos = next;
        }
        on_episode(&EpisodeLog {
            episode,
            start,
            steps,
            total_return,
            epsilon,
        });
        epsilon = (epsilon * cfg.epsilon_decay).max(cfg.epsilon_floor);
    }

    let rollout = greedy_rollout(grid, &policy, grid.start(), cap);
    if rollout.end == RolloutEnd::Goal {
        Ok(policy)
    } else {
        Err(TrainingError {
            profile: profile.level(),
            episodes: cfg.episodes,
            rollout,
            policy: Box::new(policy),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgentEvaluation {
    pub success_rate: f64,
    pub mean_path_length: f64,
}

/// Greedy rollouts from the start cell with a cap of four times the cell
/// count.
pub fn evaluate_agent(grid: &GridSpec, policy: &AgentPolicy, episodes: usize) -> AgentEvaluation {
    let cap = 4 * grid.cell_count();
    let mut successes = 0usize;
    let mut total_len = 0usize;
    for _ in 0..episodes {
        let rollout = greedy_rollout(grid, policy, grid.start(), cap);
        if rollout.end == RolloutEnd::Goal {
            successes += 1;
        }
        total_len += rollout.steps();
    }
    let n = episodes.max(1) as f64;
    AgentEvaluation {
        success_rate: successes as f64 / n,
        mean_path_length: total_len as f64 / n,
    }
}
