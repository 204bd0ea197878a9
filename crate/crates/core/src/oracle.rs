//! Ground-truth computations used to check agents and managers.
//!
//! Nothing here shares code with the manager simulator beyond the grid
//! primitives: delegation windows are replayed with a separate rollout so
//! the brute-force search stays an independent check.

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

use crate::agents::{argmax_canonical, total_reward, AgentPolicy, RiskProfile};
use crate::gridworld::{Action, CellKind, GridSpec, Position};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OptimalResult {
    pub cost: usize,
    pub path: Vec<Position>,
    pub interventions: usize,
}

impl OptimalResult {
    pub fn steps(&self) -> usize {
        self.path.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no path from {start} to {goal} avoids every failure cell")]
pub struct Infeasible {
    pub start: Position,
    pub goal: Position,
}

/// Cost of entering `pos`: one step, plus one intervention when the cell
/// lies within `delta_i` of a failure (the goal is exempt).
fn entry_cost(grid: &GridSpec, delta_i: usize, pos: Position) -> usize {
    1 + usize::from(pos != grid.goal() && grid.distances().get(pos) <= delta_i)
}

/// Minimal `path length + interventions` from start to goal.
///
/// Label-correcting search over cells with a FIFO queue; labels only
/// improve on a strict decrease and neighbors are relaxed in canonical
/// action order, which fixes the returned path among equal-cost ones.
pub fn optimal_cost(grid: &GridSpec, delta_i: usize) -> Result<OptimalResult, Infeasible> {
    let n = grid.cell_count();
    let mut label = vec![usize::MAX; n];
    let mut pred: Vec<Option<usize>> = vec![None; n];
    let mut queued = vec![false; n];
    let start = grid.index(grid.start());
    label[start] = 0;
    let mut queue = VecDeque::from([start]);
    queued[start] = true;

    while let Some(i) = queue.pop_front() {
        queued[i] = false;
        let pos = grid.position(i);
        if grid.is_terminal(pos) {
            continue;
        }
        for action in Action::ALL {
            let next = grid.step(pos, action);
            if next == pos || grid.kind(next) == CellKind::Failure {
                continue;
            }
            let j = grid.index(next);
            let candidate = label[i] + entry_cost(grid, delta_i, next);
            if candidate < label[j] {
                label[j] = candidate;
                pred[j] = Some(i);
                if !queued[j] {
                    queued[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }

    let goal = grid.index(grid.goal());
    if label[goal] == usize::MAX {
        return Err(Infeasible {
            start: grid.start(),
            goal: grid.goal(),
        });
    }
    let mut path = vec![grid.goal()];
    let mut cursor = goal;
    while let Some(p) = pred[cursor] {
        path.push(grid.position(p));
        cursor = p;
    }
    path.reverse();
    let interventions = label[goal] - (path.len() - 1);
    Ok(OptimalResult {
        cost: label[goal],
        path,
        interventions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueIterationResult {
    /// Row-major state values; walls and terminals hold 0.
    pub values: Vec<f64>,
    /// Row-major action values under the converged state values.
    pub q: Vec<[f64; 4]>,
    /// Greedy action per non-wall, non-terminal cell.
    pub policy: Vec<Option<Action>>,
    pub sweeps: usize,
    pub residual: f64,
}

impl ValueIterationResult {
    pub fn action(&self, grid: &GridSpec, pos: Position) -> Option<Action> {
        self.policy[grid.index(pos)]
    }
}

pub const VI_TOLERANCE: f64 = 1e-9;

fn backup(
    grid: &GridSpec,
    profile: &RiskProfile,
    gamma: f64,
    values: &[f64],
    pos: Position,
) -> [f64; 4] {
    Action::ALL.map(|a| {
        let next = grid.step(pos, a);
        total_reward(grid, profile, pos, a, next) + gamma * values[grid.index(next)]
    })
}

/// Gauss-Seidel value iteration under the agent reward. Terminal cells
/// keep value 0; their reward is collected on entry.
pub fn value_iteration(grid: &GridSpec, profile: &RiskProfile, gamma: f64) -> ValueIterationResult {
    let states: Vec<Position> = grid
        .open_positions()
        .filter(|&p| !grid.is_terminal(p))
        .collect();
    let mut values = vec![0.0; grid.cell_count()];
    let mut sweeps = 0;
    loop {
        sweeps += 1;
        let mut delta: f64 = 0.0;
        for &pos in &states {
            let best = backup(grid, profile, gamma, &values, pos)
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            let i = grid.index(pos);
            delta = delta.max((best - values[i]).abs());
            values[i] = best;
        }
        if delta < VI_TOLERANCE {
            break;
        }
    }
    let mut q = vec![[0.0; 4]; grid.cell_count()];
    let mut policy = vec![None; grid.cell_count()];
    let mut residual: f64 = 0.0;
    for &pos in &states {
        let i = grid.index(pos);
        let row = backup(grid, profile, gamma, &values, pos);
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        residual = residual.max((best - values[i]).abs());
        policy[i] = Action::from_index(argmax_canonical(&row));
        q[i] = row;
    }
    ValueIterationResult {
        values,
        q,
        policy,
        sweeps,
        residual,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BruteForceResult {
    pub cost: usize,
    pub rho: usize,
    pub steps: usize,
    /// Delegation decisions in order: where, and to which team member.
    pub assignment: Vec<(Position, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BruteForceError {
    #[error("instance too large for exhaustive search: {0}")]
    TooLarge(String),
    #[error("search exceeded {0} explored windows")]
    Explosion(usize),
    #[error("no delegation assignment reaches the goal")]
    NoSuccess,
}

pub const BRUTE_FORCE_MAX_SIDE: usize = 6;
pub const BRUTE_FORCE_MAX_TEAM: usize = 2;
pub const BRUTE_FORCE_MAX_INTERVENTIONS: usize = 24;
const BRUTE_FORCE_WINDOW_BUDGET: usize = 2_000_000;

enum Leg {
    Goal(usize),
    Cue(Position, usize),
    Dead,
}

/// Replays one agent from a fresh delegation until the next constraint
/// violation, a terminal cell or the remaining step budget.
fn replay(
    grid: &GridSpec,
    agent: &AgentPolicy,
    delta_i: usize,
    from: Position,
    budget: usize,
) -> Leg {
    let mut pos = from;
    for taken in 1..=budget {
        let next = grid.step(pos, agent.greedy(pos));
        if next == pos {
            // a blocked move repeats forever under a greedy policy
            return Leg::Dead;
        }
        pos = next;
        match grid.kind(pos) {
            CellKind::Goal => return Leg::Goal(taken),
            CellKind::Failure => return Leg::Dead,
            _ => {}
        }
        if grid.distances().get(pos) <= delta_i {
            return Leg::Cue(pos, taken);
        }
    }
    Leg::Dead
}

/// Minimal episode cost over every delegation choice at the start cell and
/// at every reachable cue point, with agents following their greedy
/// policies between decisions.
pub fn brute_force_delegation(
    grid: &GridSpec,
    team: &[AgentPolicy],
    delta_i: usize,
    step_cap: usize,
) -> Result<BruteForceResult, BruteForceError> {
    if grid.width() > BRUTE_FORCE_MAX_SIDE || grid.height() > BRUTE_FORCE_MAX_SIDE {
        return Err(BruteForceError::TooLarge(format!(
            "grid {}x{} exceeds {side}x{side}",
            grid.width(),
            grid.height(),
            side = BRUTE_FORCE_MAX_SIDE
        )));
    }
    if team.is_empty() || team.len() > BRUTE_FORCE_MAX_TEAM {
        return Err(BruteForceError::TooLarge(format!(
            "team of {} agents",
            team.len()
        )));
    }
    let mut search = Search {
        grid,
        team,
        delta_i,
        step_cap,
        explored: 0,
        best: None,
        trail: Vec::new(),
        on_branch: vec![false; grid.cell_count()],
    };
    search.expand(grid.start(), 0, 0)?;
    search.best.ok_or(BruteForceError::NoSuccess)
}

struct Search<'a> {
    grid: &'a GridSpec,
    team: &'a [AgentPolicy],
    delta_i: usize,
    step_cap: usize,
    explored: usize,
    best: Option<BruteForceResult>,
    trail: Vec<(Position, usize)>,
    on_branch: Vec<bool>,
}

impl Search<'_> {
    fn expand(&mut self, pos: Position, rho: usize, steps: usize) -> Result<(), BruteForceError> {
        // revisiting a decision cell on the same branch only adds cost
        let cell = self.grid.index(pos);
        if self.on_branch[cell] {
            return Ok(());
        }
        if rho > BRUTE_FORCE_MAX_INTERVENTIONS {
            return Err(BruteForceError::TooLarge(format!(
                "more than {BRUTE_FORCE_MAX_INTERVENTIONS} interventions on one branch"
            )));
        }
        self.on_branch[cell] = true;
        for agent in 0..self.team.len() {
            self.explored += 1;
            if self.explored > BRUTE_FORCE_WINDOW_BUDGET {
                return Err(BruteForceError::Explosion(BRUTE_FORCE_WINDOW_BUDGET));
            }
            self.trail.push((pos, agent));
            let budget = self.step_cap.saturating_sub(steps);
            match replay(self.grid, &self.team[agent], self.delta_i, pos, budget) {
                Leg::Goal(taken) => {
                    let total = steps + taken;
                    let cost = total + rho;
                    if self.best.as_ref().is_none_or(|b| cost < b.cost) {
                        self.best = Some(BruteForceResult {
                            cost,
                            rho,
                            steps: total,
                            assignment: self.trail.clone(),
                        });
                    }
                }
                Leg::Cue(next, taken) => {
                    let bound = self.best.as_ref().map_or(usize::MAX, |b| b.cost);
                    if steps + taken + rho + 1 < bound {
                        self.expand(next, rho + 1, steps + taken)?;
                    }
                }
                Leg::Dead => {}
            }
            self.trail.pop();
        }
        self.on_branch[cell] = false;
        Ok(())
    }
}
