use super::tabular::{policy_evaluation, ValueTables};
use super::{Action, EnvError, EnvSpec, EnvState, Policy, TabularPolicy};
use crate::rng;

pub const DEFAULT_MC_ROLLOUTS: usize = 1024;

/// Discount weight below which a stationary rollout is truncated.
const NEGLIGIBLE_DISCOUNT: f64 = 1e-12;
const MAX_ROLLOUT_STEPS: usize = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageEstimate {
    pub value: f64,
    /// Zero for exact oracles.
    pub std_err: f64,
}

/// `A^π(s, a) = Q^π(s, a) - V^π(s)` for a fixed policy, either from exact
/// tables (gridworld) or by paired Monte-Carlo rollouts.
///
/// Gridworld values are those of the stationary discounted problem (the
/// horizon is not part of the state); Monte-Carlo rollouts on a gridworld
/// therefore ignore the horizon too and run until the goal or until the
/// discount weight is negligible. Point-mass rollouts stop at the horizon.
pub enum AdvantageOracle<'a> {
    Exact(ValueTables),
    MonteCarlo {
        env: &'a EnvSpec,
        policy: &'a dyn Policy,
        rollouts: usize,
        seed: u64,
    },
}

impl<'a> AdvantageOracle<'a> {
    pub fn exact(env: &EnvSpec, policy: &TabularPolicy) -> Result<Self, EnvError> {
        let grid = env.grid().ok_or(EnvError::NotTabular)?;
        Ok(AdvantageOracle::Exact(policy_evaluation(&grid.to_tabular()?, policy)?))
    }

    pub fn monte_carlo(env: &'a EnvSpec, policy: &'a dyn Policy, rollouts: usize, seed: u64) -> Self {
        AdvantageOracle::MonteCarlo {
            env,
            policy,
            rollouts,
            seed,
        }
    }

    pub fn tables(&self) -> Option<&ValueTables> {
        match self {
            AdvantageOracle::Exact(t) => Some(t),
            AdvantageOracle::MonteCarlo { .. } => None,
        }
    }

    pub fn advantage(&self, state: &EnvState, action: &Action) -> Result<AdvantageEstimate, EnvError> {
        match self {
            AdvantageOracle::Exact(tables) => match (state, action) {
                (EnvState::Grid { cell, .. }, Action::Discrete(a)) if *a < tables.n_actions() => {
                    Ok(AdvantageEstimate {
                        value: tables.advantage(*cell, *a),
                        std_err: 0.0,
                    })
                }
                _ => Err(EnvError::InvalidAction(format!(
                    "exact oracle needs a grid state and move, got {action:?}"
                ))),
            },
            AdvantageOracle::MonteCarlo {
                env,
                policy,
                rollouts,
                seed,
            } => mc_advantage(env, *policy, state, action, *rollouts, *seed),
        }
    }
}

/// Discounted return from `state`, starting with `first` if given and
/// following `policy` afterwards.
fn discounted_return(
    env: &EnvSpec,
    policy: &dyn Policy,
    state: &EnvState,
    first: Option<&Action>,
    first_rng: &mut rng::Rng,
    rng: &mut rng::Rng,
) -> Result<f64, EnvError> {
    let stationary = env.is_discrete();
    let gamma = env.gamma();
    let mut state = state.clone();
    let mut discount = 1.0;
    let mut total = 0.0;
    let mut steps = 0;
    while !state.done() && discount >= NEGLIGIBLE_DISCOUNT && steps < MAX_ROLLOUT_STEPS {
        let action = match (steps, first) {
            (0, Some(a)) => a.clone(),
            (0, None) => policy.act(env, &state, first_rng),
            _ => policy.act(env, &state, rng),
        };
        let out = env.step_impl(&state, &action, rng, !stationary)?;
        total += discount * out.reward;
        discount *= gamma;
        state = out.state;
        steps += 1;
    }
    Ok(total)
}

/// Paired estimator: rollout `i` of `Q` and of `V` share the random stream
/// for everything after the first action, so most of the noise cancels.
/// When the policy reports its action probabilities, `V` is the
/// probability-weighted sum of per-action rollouts instead of a rollout with
/// a sampled first action, which removes the first-action noise as well.
fn mc_advantage(
    env: &EnvSpec,
    policy: &dyn Policy,
    state: &EnvState,
    action: &Action,
    rollouts: usize,
    seed: u64,
) -> Result<AdvantageEstimate, EnvError> {
    if rollouts < 2 {
        return Err(EnvError::InvalidSpec(
            "Monte-Carlo oracle needs at least 2 rollouts".into(),
        ));
    }
    let mut diffs = Vec::with_capacity(rollouts);
    let probs = policy.action_probs(env, state);
    for i in 0..rollouts {
        let i = i as u64;
        if let Some(p) = &probs {
            let mut q_a = 0.0;
            let mut v = 0.0;
            for (b, pb) in p.iter().enumerate() {
                let first = Action::Discrete(b);
                let skip = *pb == 0.0 && first != *action;
                if skip {
                    continue;
                }
                let q = discounted_return(
                    env,
                    policy,
                    state,
                    Some(&first),
                    &mut rng::derive(seed, &[i, 0]),
                    &mut rng::derive(seed, &[i, 1]),
                )?;
                v += pb * q;
                if first == *action {
                    q_a = q;
                }
            }
            diffs.push(q_a - v);
            continue;
        }
        let q = discounted_return(
            env,
            policy,
            state,
            Some(action),
            &mut rng::derive(seed, &[i, 0]),
            &mut rng::derive(seed, &[i, 1]),
        )?;
        let v = discounted_return(
            env,
            policy,
            state,
            None,
            &mut rng::derive(seed, &[i, 0]),
            &mut rng::derive(seed, &[i, 1]),
        )?;
        diffs.push(q - v);
    }
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(AdvantageEstimate {
        value: mean,
        std_err: (var / n).sqrt(),
    })
}
