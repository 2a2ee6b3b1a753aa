//! Synthetic episodic MDPs: a tabular gridworld with exact dynamic-programming
//! oracles and a linear point-mass with an LQR expert.

mod grid;
mod oracle;
mod pointmass;
mod policy;
pub mod tabular;
mod tiers;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use grid::{GridWorldSpec, EAST, NORTH, N_MOVES, SOUTH, WEST};
pub use oracle::{AdvantageEstimate, AdvantageOracle, DEFAULT_MC_ROLLOUTS};
pub use pointmass::LinPointMassSpec;
pub(crate) use policy::sample_index;
pub use policy::{mean_return, rollout, LinearController, Policy, ScriptedPolicy, StepRecord};
pub use tabular::{TabularMdp, TabularPolicy, ValueTables};
pub use tiers::{expected_return, expert_policy, make_tier_policies, reference_returns, ReferenceReturns, TierPolicy};

use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment: {0}")]
    InvalidSpec(String),
    #[error("step called on a finished episode")]
    EpisodeOver,
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("policy evaluation did not converge after {sweeps} sweeps (residual {residual:e})")]
    NotConverged { sweeps: usize, residual: f64 },
    #[error("tier calibration failed: requested {requested:?}, achieved {achieved:?}")]
    Calibration { requested: Vec<f64>, achieved: Vec<f64> },
    #[error("operation needs a tabular environment")]
    NotTabular,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    Gridworld(GridWorldSpec),
    PointMass(LinPointMassSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnvState {
    Grid { cell: usize, t: usize, done: bool },
    PointMass { x: Vec<f64>, t: usize, done: bool },
}

impl EnvState {
    pub fn t(&self) -> usize {
        match self {
            EnvState::Grid { t, .. } | EnvState::PointMass { t, .. } => *t,
        }
    }

    pub fn done(&self) -> bool {
        match self {
            EnvState::Grid { done, .. } | EnvState::PointMass { done, .. } => *done,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        match self {
            EnvSpec::Gridworld(g) => g.validate(),
            EnvSpec::PointMass(p) => p.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Gridworld(_) => "gridworld",
            EnvSpec::PointMass(_) => "point-mass",
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, EnvSpec::Gridworld(_))
    }

    /// Length of the observation vector fed to models.
    pub fn obs_dim(&self) -> usize {
        match self {
            EnvSpec::Gridworld(g) => g.n_cells(),
            EnvSpec::PointMass(p) => p.n,
        }
    }

    /// Length of the action encoding fed to models.
    pub fn action_dim(&self) -> usize {
        match self {
            EnvSpec::Gridworld(_) => N_MOVES,
            EnvSpec::PointMass(p) => p.m,
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            EnvSpec::Gridworld(g) => g.horizon,
            EnvSpec::PointMass(p) => p.horizon,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            EnvSpec::Gridworld(g) => g.gamma,
            EnvSpec::PointMass(p) => p.gamma,
        }
    }

    pub fn grid(&self) -> Option<&GridWorldSpec> {
        match self {
            EnvSpec::Gridworld(g) => Some(g),
            EnvSpec::PointMass(_) => None,
        }
    }

    /// Gridworld: the fixed start cell. Point-mass: `N(0, reset_std² I)`.
    pub fn reset(&self, rng: &mut Rng) -> EnvState {
        match self {
            EnvSpec::Gridworld(g) => EnvState::Grid {
                cell: g.start_cell(),
                t: 0,
                done: g.start_cell() == g.goal_cell(),
            },
            EnvSpec::PointMass(p) => {
                let x = (0..p.n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        p.reset_std * z
                    })
                    .collect();
                EnvState::PointMass { x, t: 0, done: false }
            }
        }
    }

    pub fn reset_seeded(&self, seed: u64) -> EnvState {
        self.reset(&mut rng::derive(seed, &[]))
    }

    pub fn step(&self, state: &EnvState, action: &Action, rng: &mut Rng) -> Result<StepOutcome, EnvError> {
        self.step_impl(state, action, rng, true)
    }

    /// Like [`step`](Self::step) but ignores the horizon, for oracles of
    /// the stationary problem.
    pub(crate) fn step_impl(
        &self,
        state: &EnvState,
        action: &Action,
        rng: &mut Rng,
        enforce_horizon: bool,
    ) -> Result<StepOutcome, EnvError> {
        if state.done() {
            return Err(EnvError::EpisodeOver);
        }
        match (self, state) {
            (EnvSpec::Gridworld(g), EnvState::Grid { cell, t, .. }) => {
                let a = match action {
                    Action::Discrete(a) if *a < N_MOVES => *a,
                    other => {
                        return Err(EnvError::InvalidAction(format!(
                            "gridworld expects a move index below {N_MOVES}, got {other:?}"
                        )))
                    }
                };
                let executed = if g.slip_prob > 0.0 && rng.random::<f64>() < g.slip_prob {
                    rng.random_range(0..N_MOVES)
                } else {
                    a
                };
                let next = g.target(*cell, executed);
                let at_goal = next == g.goal_cell();
                let reward = g.step_reward + if at_goal { g.goal_reward } else { 0.0 };
                let t = t + 1;
                let done = at_goal || (enforce_horizon && t >= g.horizon);
                Ok(StepOutcome {
                    state: EnvState::Grid { cell: next, t, done },
                    reward,
                    done,
                })
            }
            (EnvSpec::PointMass(p), EnvState::PointMass { x, t, .. }) => {
                let u = match action {
                    Action::Continuous(u) if u.len() == p.m => p.clip(u),
                    other => {
                        return Err(EnvError::InvalidAction(format!(
                            "point-mass expects a {}-vector, got {other:?}",
                            p.m
                        )))
                    }
                };
                if u.iter().any(|v| !v.is_finite()) {
                    return Err(EnvError::InvalidAction("non-finite action".into()));
                }
                let (next, reward) = p.transition(x, &u);
                let t = t + 1;
                let done = enforce_horizon && t >= p.horizon;
                Ok(StepOutcome {
                    state: EnvState::PointMass { x: next, t, done },
                    reward,
                    done,
                })
            }
            _ => Err(EnvError::InvalidSpec(
                "state does not belong to this environment".into(),
            )),
        }
    }

    /// Model input for a state: one-hot cell, or the raw point-mass state.
    pub fn observe(&self, state: &EnvState) -> Vec<f64> {
        match (self, state) {
            (EnvSpec::Gridworld(g), EnvState::Grid { cell, .. }) => one_hot(*cell, g.n_cells()),
            (EnvSpec::PointMass(_), EnvState::PointMass { x, .. }) => x.clone(),
            _ => panic!("state does not belong to this environment"),
        }
    }

    /// Model encoding of an action: one-hot move, or the clipped vector.
    pub fn encode_action(&self, action: &Action) -> Vec<f64> {
        match (self, action) {
            (EnvSpec::Gridworld(_), Action::Discrete(a)) => one_hot(*a, N_MOVES),
            (EnvSpec::PointMass(p), Action::Continuous(u)) => p.clip(u),
            _ => panic!("action does not belong to this environment"),
        }
    }

    /// Inverse of [`encode_action`](Self::encode_action); discrete encodings
    /// decode to their largest entry.
    pub fn decode_action(&self, encoding: &[f64]) -> Action {
        match self {
            EnvSpec::Gridworld(_) => Action::Discrete(argmax(encoding)),
            EnvSpec::PointMass(_) => Action::Continuous(encoding.to_vec()),
        }
    }

    /// A draw from the random policy: uniform moves or uniform on the box.
    pub fn random_action(&self, rng: &mut Rng) -> Action {
        match self {
            EnvSpec::Gridworld(_) => Action::Discrete(rng.random_range(0..N_MOVES)),
            EnvSpec::PointMass(p) => Action::Continuous(
                (0..p.m)
                    .map(|_| rng.random_range(-p.action_bound..=p.action_bound))
                    .collect(),
            ),
        }
    }

    /// Visits every cell of a gridworld as an observation (used for exact
    /// evaluation of neural policies).
    pub fn all_grid_observations(&self) -> Result<Vec<Vec<f64>>, EnvError> {
        let g = self.grid().ok_or(EnvError::NotTabular)?;
        Ok((0..g.n_cells()).map(|c| one_hot(c, g.n_cells())).collect())
    }
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
