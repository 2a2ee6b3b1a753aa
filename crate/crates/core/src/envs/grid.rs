use serde::{Deserialize, Serialize};

use super::tabular::TabularMdp;
use super::EnvError;

pub const NORTH: usize = 0;
pub const EAST: usize = 1;
pub const SOUTH: usize = 2;
pub const WEST: usize = 3;
pub const N_MOVES: usize = 4;

/// Rectangular gridworld with the four compass moves. Moving off the grid
/// leaves the agent in place. Each step costs `step_reward`; entering the goal
/// additionally pays `goal_reward` and ends the episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridWorldSpec {
    pub width: usize,
    pub height: usize,
    pub start: (usize, usize),
    pub goal: (usize, usize),
    pub step_reward: f64,
    pub goal_reward: f64,
    pub horizon: usize,
    pub gamma: f64,
    /// With this probability a uniformly random move replaces the chosen one.
    pub slip_prob: f64,
}

impl Default for GridWorldSpec {
    fn default() -> Self {
        GridWorldSpec {
            width: 7,
            height: 7,
            start: (0, 0),
            goal: (6, 6),
            step_reward: -1.0,
            goal_reward: 0.0,
            horizon: 60,
            gamma: 0.99,
            slip_prob: 0.0,
        }
    }
}

impl GridWorldSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::InvalidSpec(msg));
        if self.width == 0 || self.height == 0 {
            return bad("grid extents must be positive".into());
        }
        for (name, (x, y)) in [("start", self.start), ("goal", self.goal)] {
            if x >= self.width || y >= self.height {
                return bad(format!("{name} ({x}, {y}) lies outside the grid"));
            }
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..1.0).contains(&self.slip_prob) {
            return bad(format!("slip_prob must lie in [0, 1), got {}", self.slip_prob));
        }
        if !self.step_reward.is_finite() || !self.goal_reward.is_finite() {
            return bad("rewards must be finite".into());
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, cell: usize) -> (usize, usize) {
        (cell % self.width, cell / self.width)
    }

    pub fn start_cell(&self) -> usize {
        self.cell(self.start.0, self.start.1)
    }

    pub fn goal_cell(&self) -> usize {
        self.cell(self.goal.0, self.goal.1)
    }

    /// Cell reached by a successful move.
    pub fn target(&self, cell: usize, action: usize) -> usize {
        let (x, y) = self.coords(cell);
        let (x, y) = match action {
            NORTH if y + 1 < self.height => (x, y + 1),
            EAST if x + 1 < self.width => (x + 1, y),
            SOUTH if y > 0 => (x, y - 1),
            WEST if x > 0 => (x - 1, y),
            _ => (x, y),
        };
        self.cell(x, y)
    }

    pub fn manhattan_to_goal(&self, cell: usize) -> usize {
        let (x, y) = self.coords(cell);
        x.abs_diff(self.goal.0) + y.abs_diff(self.goal.1)
    }

    /// Next-cell distribution after choosing `action` (slip included).
    pub fn outcomes(&self, cell: usize, action: usize) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::with_capacity(N_MOVES + 1);
        let mut add = |c: usize, p: f64| {
            if p == 0.0 {
                return;
            }
            match out.iter_mut().find(|(k, _)| *k == c) {
                Some(entry) => entry.1 += p,
                None => out.push((c, p)),
            }
        };
        add(self.target(cell, action), 1.0 - self.slip_prob);
        for b in 0..N_MOVES {
            add(self.target(cell, b), self.slip_prob / N_MOVES as f64);
        }
        out
    }

    /// Explicit MDP over cells. The goal is absorbing; the horizon is not
    /// part of the state, so the tables describe the stationary discounted
    /// problem.
    pub fn to_tabular(&self) -> Result<TabularMdp, EnvError> {
        self.validate()?;
        let n = self.n_cells();
        let goal = self.goal_cell();
        let mut transitions = Vec::with_capacity(n * N_MOVES);
        let mut rewards = Vec::with_capacity(n * N_MOVES);
        for cell in 0..n {
            for a in 0..N_MOVES {
                if cell == goal {
                    transitions.push(vec![(goal, 1.0)]);
                    rewards.push(0.0);
                    continue;
                }
                let outs = self.outcomes(cell, a);
                let p_goal: f64 = outs.iter().filter(|(c, _)| *c == goal).map(|(_, p)| p).sum();
                rewards.push(self.step_reward + self.goal_reward * p_goal);
                transitions.push(outs);
            }
        }
        let terminal = (0..n).map(|c| c == goal).collect();
        TabularMdp::new(n, N_MOVES, transitions, rewards, terminal, self.gamma)
    }
}
