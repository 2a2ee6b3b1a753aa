use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Action, EnvError, EnvSpec, EnvState, TabularPolicy};
use crate::rng::Rng;

/// Anything that can choose actions in an environment.
pub trait Policy {
    fn act(&self, env: &EnvSpec, state: &EnvState, rng: &mut Rng) -> Action;

    /// Action probabilities at `state`, when the policy is discrete and
    /// can report them.
    fn action_probs(&self, _env: &EnvSpec, _state: &EnvState) -> Option<Vec<f64>> {
        None
    }
}

/// `u = -scale * K x + noise_std * z`, with `z` standard normal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearController {
    pub gain: Vec<Vec<f64>>,
    pub scale: f64,
    pub noise_std: f64,
}

impl LinearController {
    pub fn control(&self, x: &[f64], rng: &mut Rng) -> Vec<f64> {
        self.gain
            .iter()
            .map(|row| {
                let u = -self.scale * row.iter().zip(x).map(|(k, xi)| k * xi).sum::<f64>();
                if self.noise_std > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    u + self.noise_std * z
                } else {
                    u
                }
            })
            .collect()
    }
}

/// Hand-built (non-learned) policies: experts, tiers and the random policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScriptedPolicy {
    Tabular(TabularPolicy),
    Linear(LinearController),
    Random,
}

pub(crate) fn sample_index(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

impl Policy for ScriptedPolicy {
    fn act(&self, env: &EnvSpec, state: &EnvState, rng: &mut Rng) -> Action {
        match (self, state) {
            (ScriptedPolicy::Tabular(pi), EnvState::Grid { cell, .. }) => {
                Action::Discrete(sample_index(pi.row(*cell), rng))
            }
            (ScriptedPolicy::Linear(c), EnvState::PointMass { x, .. }) => Action::Continuous(c.control(x, rng)),
            (ScriptedPolicy::Random, _) => env.random_action(rng),
            _ => panic!("scripted policy does not match the environment"),
        }
    }

    fn action_probs(&self, _env: &EnvSpec, state: &EnvState) -> Option<Vec<f64>> {
        match (self, state) {
            (ScriptedPolicy::Tabular(pi), EnvState::Grid { cell, .. }) => Some(pi.row(*cell).to_vec()),
            (ScriptedPolicy::Random, EnvState::Grid { .. }) => {
                let n = super::N_MOVES;
                Some(vec![1.0 / n as f64; n])
            }
            _ => None,
        }
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, env: &EnvSpec, state: &EnvState, rng: &mut Rng) -> Action {
        (**self).act(env, state, rng)
    }

    fn action_probs(&self, env: &EnvSpec, state: &EnvState) -> Option<Vec<f64>> {
        (**self).action_probs(env, state)
    }
}

/// One executed step of an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub state: EnvState,
    pub action: Action,
    pub reward: f64,
    pub done: bool,
}

/// Runs one episode from a fresh reset. Actions are recorded as executed
/// (after clipping for the point-mass).
pub fn rollout(env: &EnvSpec, policy: &dyn Policy, rng: &mut Rng) -> Result<Vec<StepRecord>, EnvError> {
    let mut state = env.reset(rng);
    let mut steps = Vec::new();
    while !state.done() {
        let action = match (env, policy.act(env, &state, rng)) {
            (EnvSpec::PointMass(p), Action::Continuous(u)) => Action::Continuous(p.clip(&u)),
            (_, a) => a,
        };
        let out = env.step(&state, &action, rng)?;
        steps.push(StepRecord {
            state,
            action,
            reward: out.reward,
            done: out.done,
        });
        state = out.state;
    }
    Ok(steps)
}

/// Mean undiscounted episode return over `episodes` episodes drawn from the
/// generator seeded by `seed`.
pub fn mean_return(env: &EnvSpec, policy: &dyn Policy, episodes: usize, seed: u64) -> Result<f64, EnvError> {
    let mut total = 0.0;
    for i in 0..episodes {
        let mut rng = crate::rng::derive(seed, &[i as u64]);
        total += rollout(env, policy, &mut rng)?.iter().map(|s| s.reward).sum::<f64>();
    }
    Ok(total / episodes.max(1) as f64)
}
