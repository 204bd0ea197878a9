//! Grid environment: layout parsing, deterministic movement and the
//! failure-distance field shared by agents, manager and oracle.
//!
//! Grid files are plain ASCII, one row per line, over the alphabet
//! `S` (start), `G` (goal), `.` (open), `#` (wall) and `F` (failure).
//! Coordinates are `(col, row)` with the origin at the top-left corner
//! and rows increasing downward.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// A cell coordinate: `col` is x, `row` is y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub col: usize,
    pub row: usize,
}

impl Position {
    pub const fn new(col: usize, row: usize) -> Self {
        Self { col, row }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.col, self.row)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CellKind {
    Start,
    Goal,
    Open,
    Wall,
    Failure,
}

impl CellKind {
    pub fn from_char(ch: char) -> Option<Self> {
        match ch {
            'S' => Some(CellKind::Start),
            'G' => Some(CellKind::Goal),
            '.' => Some(CellKind::Open),
            '#' => Some(CellKind::Wall),
            'F' => Some(CellKind::Failure),
            _ => None,
        }
    }

    pub fn to_char(self) -> char {
        match self {
            CellKind::Start => 'S',
            CellKind::Goal => 'G',
            CellKind::Open => '.',
            CellKind::Wall => '#',
            CellKind::Failure => 'F',
        }
    }

    /// Goal and failure cells end an episode on entry.
    pub fn is_terminal(self) -> bool {
        matches!(self, CellKind::Goal | CellKind::Failure)
    }
}

/// Movement directions. The declaration order is the canonical
/// tie-breaking order used by every greedy readout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Left,
    Right,
    Up,
    Down,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Left, Action::Right, Action::Up, Action::Down];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Up => (0, -1),
            Action::Down => (0, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("grid text is empty")]
    Empty,
    #[error("row {row} has length {found}, expected {expected}")]
    RaggedRows {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("unknown character {ch:?} at row {row}, column {col}")]
    UnknownChar { ch: char, row: usize, col: usize },
    #[error("grid has no start cell")]
    MissingStart,
    #[error("grid has {0} start cells, expected exactly one")]
    MultipleStarts(usize),
    #[error("grid has no goal cell")]
    MissingGoal,
    #[error("grid has {0} goal cells, expected exactly one")]
    MultipleGoals(usize),
    #[error("grid has no failure cell")]
    NoFailure,
    #[error("goal is unreachable from start without entering a failure cell")]
    GoalUnreachable,
}

/// Immutable grid layout together with its failure-distance field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    width: usize,
    height: usize,
    cells: Vec<CellKind>,
    start: Position,
    goal: Position,
    failures: Vec<Position>,
    distances: DistanceField,
}

impl GridSpec {
    /// Parses an ASCII map. A single trailing newline is accepted; any
    /// other whitespace is rejected as an unknown character.
    pub fn parse(text: &str) -> Result<Self, GridError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let body = body.strip_suffix('\r').unwrap_or(body);
        if body.is_empty() {
            return Err(GridError::Empty);
        }
        let lines: Vec<&str> = body
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .collect();
        let width = lines[0].chars().count();
        let height = lines.len();
        let mut cells = Vec::with_capacity(width * height);
        let (mut starts, mut goals, mut failures) = (Vec::new(), Vec::new(), Vec::new());
        for (row, line) in lines.iter().enumerate() {
            let found = line.chars().count();
            if found != width {
                return Err(GridError::RaggedRows {
                    row,
                    expected: width,
                    found,
                });
            }
            for (col, ch) in line.chars().enumerate() {
                let kind =
                    CellKind::from_char(ch).ok_or(GridError::UnknownChar { ch, row, col })?;
                let pos = Position::new(col, row);
                match kind {
                    CellKind::Start => starts.push(pos),
                    CellKind::Goal => goals.push(pos),
                    CellKind::Failure => failures.push(pos),
                    _ => {}
                }
                cells.push(kind);
            }
        }
        let start = match starts.len() {
            0 => return Err(GridError::MissingStart),
            1 => starts[0],
            n => return Err(GridError::MultipleStarts(n)),
        };
        let goal = match goals.len() {
            0 => return Err(GridError::MissingGoal),
            1 => goals[0],
            n => return Err(GridError::MultipleGoals(n)),
        };
        if failures.is_empty() {
            return Err(GridError::NoFailure);
        }
        let distances = DistanceField::compute(width, height, &failures);
        let grid = GridSpec {
            width,
            height,
            cells,
            start,
            goal,
            failures,
            distances,
        };
        if !grid.goal_reachable() {
            return Err(GridError::GoalUnreachable);
        }
        Ok(grid)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> Position {
        self.start
    }

    pub fn goal(&self) -> Position {
        self.goal
    }

    pub fn failures(&self) -> &[Position] {
        &self.failures
    }

    pub fn distances(&self) -> &DistanceField {
        &self.distances
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn in_bounds(&self, col: isize, row: isize) -> bool {
        col >= 0 && row >= 0 && (col as usize) < self.width && (row as usize) < self.height
    }

    pub fn index(&self, pos: Position) -> usize {
        pos.row * self.width + pos.col
    }

    pub fn position(&self, index: usize) -> Position {
        Position::new(index % self.width, index / self.width)
    }

    pub fn kind(&self, pos: Position) -> CellKind {
        self.cells[self.index(pos)]
    }

    pub fn is_terminal(&self, pos: Position) -> bool {
        self.kind(pos).is_terminal()
    }

    /// Iterates all cells row-major.
    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        (0..self.cells.len()).map(move |i| self.position(i))
    }

    /// Non-wall cells, row-major.
    pub fn open_positions(&self) -> impl Iterator<Item = Position> + '_ {
        self.positions()
            .filter(move |&p| self.kind(p) != CellKind::Wall)
    }

    /// Deterministic move. Walls and the boundary block movement; goal and
    /// failure cells are enterable.
    pub fn step(&self, pos: Position, action: Action) -> Position {
        let (dc, dr) = action.delta();
        let col = pos.col as isize + dc;
        let row = pos.row as isize + dr;
        if !self.in_bounds(col, row) {
            return pos;
        }
        let next = Position::new(col as usize, row as usize);
        if self.kind(next) == CellKind::Wall {
            pos
        } else {
            next
        }
    }

    /// Stable identity of the layout, derived from its ASCII rendering.
    pub fn tag(&self) -> String {
        let digest = Sha256::digest(self.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn goal_reachable(&self) -> bool {
        let mut seen = vec![false; self.cells.len()];
        let mut queue = VecDeque::from([self.start]);
        seen[self.index(self.start)] = true;
        while let Some(pos) = queue.pop_front() {
            if pos == self.goal {
                return true;
            }
            for action in Action::ALL {
                let next = self.step(pos, action);
                let i = self.index(next);
                if !seen[i] && self.kind(next) != CellKind::Failure {
                    seen[i] = true;
                    queue.push_back(next);
                }
            }
        }
        false
    }
}

impl FromStr for GridSpec {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GridSpec::parse(s)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in 0..self.height {
            let line: String = (0..self.width)
                .map(|col| self.kind(Position::new(col, row)).to_char())
                .collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

/// `|x1 - x2| + |y1 - y2|`.
pub fn manhattan(a: Position, b: Position) -> usize {
    a.col.abs_diff(b.col) + a.row.abs_diff(b.row)
}

/// Per-cell minimum Manhattan distance to any failure cell. Walls are
/// ignored: the distance is geometric, not a path length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceField {
    width: usize,
    values: Vec<usize>,
}

impl DistanceField {
    fn compute(width: usize, height: usize, failures: &[Position]) -> Self {
        let values = (0..width * height)
            .map(|i| {
                let pos = Position::new(i % width, i / width);
                failures
                    .iter()
                    .map(|&f| manhattan(pos, f))
                    .min()
                    .unwrap_or(usize::MAX)
            })
            .collect();
        DistanceField { width, values }
    }

    pub fn get(&self, pos: Position) -> usize {
        self.values[pos.row * self.width + pos.col]
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.values.len() / self.width
    }
}

pub fn distance_field(grid: &GridSpec) -> DistanceField {
    DistanceField::compute(grid.width, grid.height, &grid.failures)
}
