//! Finite MDPs in explicit form and exact dynamic-programming oracles.

use serde::{Deserialize, Serialize};

use super::EnvError;

/// A finite MDP with expected rewards `r(s, a)` and absorbing terminal states.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// `transitions[s * n_actions + a]` lists `(next_state, probability)`.
    transitions: Vec<Vec<(usize, f64)>>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Vec<(usize, f64)>>,
        rewards: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
    ) -> Result<Self, EnvError> {
        let pairs = n_states * n_actions;
        if transitions.len() != pairs || rewards.len() != pairs || terminal.len() != n_states {
            return Err(EnvError::InvalidSpec(format!(
                "tabular MDP tables do not match {n_states} states x {n_actions} actions"
            )));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(EnvError::InvalidSpec(format!("gamma must lie in (0, 1], got {gamma}")));
        }
        for (i, row) in transitions.iter().enumerate() {
            let total: f64 = row.iter().map(|&(_, p)| p).sum();
            if (total - 1.0).abs() > 1e-12 || row.iter().any(|&(s, p)| s >= n_states || p < 0.0) {
                return Err(EnvError::InvalidSpec(format!(
                    "transition row for state {} action {} is not a distribution",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        Ok(TabularMdp {
            n_states,
            n_actions,
            transitions,
            rewards,
            terminal,
            gamma,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn transitions(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s * self.n_actions + a]
    }

    fn backup(&self, v: &[f64], s: usize, a: usize, gamma: f64) -> f64 {
        let next: f64 = self.transitions(s, a).iter().map(|&(s2, p)| p * v[s2]).sum();
        self.reward(s, a) + gamma * next
    }
}

/// A stationary stochastic policy given as one action distribution per state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EnvError> {
        let n_actions = rows.first().map_or(0, Vec::len);
        let mut probs = Vec::with_capacity(rows.len() * n_actions);
        for (s, row) in rows.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.len() != n_actions || (total - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(EnvError::InvalidSpec(format!(
                    "policy row for state {s} is not a distribution over {n_actions} actions"
                )));
            }
            probs.extend_from_slice(row);
        }
        Ok(TabularPolicy { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Uniform over the actions within `tol` of `max_a q(s, a)`.
    pub fn greedy(q: &[f64], n_actions: usize, tol: f64) -> Self {
        let mut probs = vec![0.0; q.len()];
        for (row, out) in q.chunks(n_actions).zip(probs.chunks_mut(n_actions)) {
            let best = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ties = row.iter().filter(|&&x| x >= best - tol).count() as f64;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = if x >= best - tol { 1.0 / ties } else { 0.0 };
            }
        }
        TabularPolicy { n_actions, probs }
    }

    /// `(1 - eps) * self + eps * uniform`
    pub fn epsilon_mix(&self, eps: f64) -> Self {
        let u = 1.0 / self.n_actions as f64;
        TabularPolicy {
            n_actions: self.n_actions,
            probs: self.probs.iter().map(|&p| (1.0 - eps) * p + eps * u).collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len() / self.n_actions.max(1)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }
}

/// `V^π`, `Q^π` and the Bellman residual of the returned `V`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTables {
    pub v: Vec<f64>,
    pub q: Vec<f64>,
    pub residual: f64,
    pub sweeps: usize,
    n_actions: usize,
}

impl ValueTables {
    pub fn q(&self, s: usize, a: usize) -> f64 {
        self.q[s * self.n_actions + a]
    }

    pub fn advantage(&self, s: usize, a: usize) -> f64 {
        self.q(s, a) - self.v[s]
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }
}

pub const BELLMAN_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 200_000;

fn check_policy(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<(), EnvError> {
    if pi.n_states() != mdp.n_states || pi.n_actions() != mdp.n_actions {
        return Err(EnvError::InvalidSpec(format!(
            "policy covers {}x{} but the MDP has {}x{}",
            pi.n_states(),
            pi.n_actions(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    Ok(())
}

fn tables_from_v(mdp: &TabularMdp, v: Vec<f64>, residual: f64, sweeps: usize) -> ValueTables {
    let na = mdp.n_actions;
    let mut q = vec![0.0; mdp.n_states * na];
    for s in 0..mdp.n_states {
        if mdp.terminal[s] {
            continue;
        }
        for a in 0..na {
            q[s * na + a] = mdp.backup(&v, s, a, mdp.gamma);
        }
    }
    ValueTables {
        v,
        q,
        residual,
        sweeps,
        n_actions: na,
    }
}

/// Iterates `V <- T^π V` until `max_s |T^π V - V| <= 1e-10` and returns that
/// `V` (whose residual is reported) together with `Q^π`. Terminal states are
/// absorbing with value zero.
pub fn policy_evaluation(mdp: &TabularMdp, pi: &TabularPolicy) -> Result<ValueTables, EnvError> {
    check_policy(mdp, pi)?;
    let mut v = vec![0.0; mdp.n_states];
    let mut next = vec![0.0; mdp.n_states];
    let mut residual = f64::INFINITY;
    for sweep in 0..MAX_SWEEPS {
        residual = 0.0;
        for s in 0..mdp.n_states {
            next[s] = if mdp.terminal[s] {
                0.0
            } else {
                (0..mdp.n_actions)
                    .map(|a| pi.prob(s, a) * mdp.backup(&v, s, a, mdp.gamma))
                    .sum()
            };
            residual = f64::max(residual, (next[s] - v[s]).abs());
        }
        if !residual.is_finite() {
            break;
        }
        if residual <= BELLMAN_TOL {
            return Ok(tables_from_v(mdp, v, residual, sweep));
        }
        std::mem::swap(&mut v, &mut next);
    }
    Err(EnvError::NotConverged {
        sweeps: MAX_SWEEPS,
        residual,
    })
}

/// Optimal `V*`, `Q*` by value iteration to the same residual tolerance.
pub fn value_iteration(mdp: &TabularMdp) -> Result<ValueTables, EnvError> {
    let mut v = vec![0.0; mdp.n_states];
    let mut next = vec![0.0; mdp.n_states];
    let mut residual = f64::INFINITY;
    for sweep in 0..MAX_SWEEPS {
        residual = 0.0;
        for s in 0..mdp.n_states {
            next[s] = if mdp.terminal[s] {
                0.0
            } else {
                (0..mdp.n_actions)
                    .map(|a| mdp.backup(&v, s, a, mdp.gamma))
                    .fold(f64::NEG_INFINITY, f64::max)
            };
            residual = f64::max(residual, (next[s] - v[s]).abs());
        }
        if !residual.is_finite() {
            break;
        }
        if residual <= BELLMAN_TOL {
            return Ok(tables_from_v(mdp, v, residual, sweep));
        }
        std::mem::swap(&mut v, &mut next);
    }
    Err(EnvError::NotConverged {
        sweeps: MAX_SWEEPS,
        residual,
    })
}

/// Expected undiscounted return of an episode truncated at `horizon` steps,
/// by backward induction from `start`.
pub fn finite_horizon_return(
    mdp: &TabularMdp,
    pi: &TabularPolicy,
    start: usize,
    horizon: usize,
) -> Result<f64, EnvError> {
    check_policy(mdp, pi)?;
    let mut v = vec![0.0; mdp.n_states];
    let mut next = vec![0.0; mdp.n_states];
    for _ in 0..horizon {
        for s in 0..mdp.n_states {
            next[s] = if mdp.terminal[s] {
                0.0
            } else {
                (0..mdp.n_actions)
                    .map(|a| pi.prob(s, a) * mdp.backup(&v, s, a, 1.0))
                    .sum()
            };
        }
        std::mem::swap(&mut v, &mut next);
    }
    Ok(v[start])
}
