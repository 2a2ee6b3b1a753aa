//! Experts, reference returns and corrupted "tier" policies whose performance
//! sits at requested fractions of the expert's.

use serde::{Deserialize, Serialize};

use super::tabular::{finite_horizon_return, value_iteration, TabularPolicy};
use super::{mean_return, EnvError, EnvSpec, LinearController, ScriptedPolicy};

/// Episodes used when the expected return has to be estimated by rollouts.
const CALIBRATION_EPISODES: usize = 512;
const CALIBRATION_SEED: u64 = 0x7132;
const BISECTION_STEPS: usize = 60;
/// Calibration target, in normalized-score points.
const TARGET_TOL: f64 = 0.5;
/// Hard failure threshold, in normalized-score points.
const FAIL_TOL: f64 = 10.0;

/// Gridworld: uniform over the optimal moves of value iteration.
/// Point-mass: the discounted LQR controller.
pub fn expert_policy(env: &EnvSpec) -> Result<ScriptedPolicy, EnvError> {
    match env {
        EnvSpec::Gridworld(g) => {
            let mdp = g.to_tabular()?;
            let opt = value_iteration(&mdp)?;
            Ok(ScriptedPolicy::Tabular(TabularPolicy::greedy(
                &opt.q,
                mdp.n_actions(),
                1e-9,
            )))
        }
        EnvSpec::PointMass(p) => Ok(ScriptedPolicy::Linear(LinearController {
            gain: p.lqr_gain()?,
            scale: 1.0,
            noise_std: 0.0,
        })),
    }
}

/// Expected undiscounted episode return: exact for gridworlds, a fixed-seed
/// rollout average otherwise.
pub fn expected_return(env: &EnvSpec, policy: &ScriptedPolicy) -> Result<f64, EnvError> {
    match (env, policy) {
        (EnvSpec::Gridworld(g), ScriptedPolicy::Tabular(pi)) => {
            finite_horizon_return(&g.to_tabular()?, pi, g.start_cell(), g.horizon)
        }
        (EnvSpec::Gridworld(g), ScriptedPolicy::Random) => finite_horizon_return(
            &g.to_tabular()?,
            &TabularPolicy::uniform(g.n_cells(), super::N_MOVES),
            g.start_cell(),
            g.horizon,
        ),
        _ => mean_return(env, policy, CALIBRATION_EPISODES, CALIBRATION_SEED),
    }
}

/// The two anchors of the normalized score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReturns {
    pub expert: f64,
    pub random: f64,
}

impl ReferenceReturns {
    pub fn score(&self, mean: f64) -> f64 {
        100.0 * (mean - self.random) / (self.expert - self.random)
    }
}

pub fn reference_returns(env: &EnvSpec) -> Result<ReferenceReturns, EnvError> {
    let expert = expected_return(env, &expert_policy(env)?)?;
    let random = expected_return(env, &ScriptedPolicy::Random)?;
    if !(expert - random).is_normal() {
        return Err(EnvError::InvalidSpec(format!(
            "expert and random returns coincide ({expert}); normalized score undefined"
        )));
    }
    Ok(ReferenceReturns { expert, random })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierPolicy {
    pub fraction: f64,
    /// Gridworld: the uniform-mixture weight ε. Point-mass: `c` in
    /// `u = -(1-c) K x + c·bound·z`.
    pub corruption: f64,
    /// Normalized score of the calibrated policy.
    pub achieved: f64,
    pub policy: ScriptedPolicy,
}

fn corrupt(env: &EnvSpec, expert: &ScriptedPolicy, c: f64) -> ScriptedPolicy {
    match (env, expert) {
        (_, ScriptedPolicy::Tabular(pi)) => ScriptedPolicy::Tabular(pi.epsilon_mix(c)),
        (EnvSpec::PointMass(p), ScriptedPolicy::Linear(k)) => ScriptedPolicy::Linear(LinearController {
            gain: k.gain.clone(),
            scale: 1.0 - c,
            noise_std: c * p.action_bound,
        }),
        _ => unreachable!("expert policy kind follows the environment"),
    }
}

/// Corrupted experts whose normalized scores sit at `100 * fraction`, found by
/// bisection on the corruption parameter (score decreases as it grows).
pub fn make_tier_policies(env: &EnvSpec, fractions: &[f64]) -> Result<Vec<TierPolicy>, EnvError> {
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(EnvError::InvalidSpec(format!(
            "tier fractions must lie in (0, 1), got {f}"
        )));
    }
    let expert = expert_policy(env)?;
    let refs = reference_returns(env)?;
    let score = |c: f64| -> Result<f64, EnvError> { Ok(refs.score(expected_return(env, &corrupt(env, &expert, c))?)) };
    let mut tiers = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let target = 100.0 * fraction;
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut best = (0.0, score(0.0)?);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            let s = score(mid)?;
            if (s - target).abs() < (best.1 - target).abs() {
                best = (mid, s);
            }
            if (s - target).abs() <= TARGET_TOL {
                break;
            }
            if s > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        tiers.push(TierPolicy {
            fraction,
            corruption: best.0,
            achieved: best.1,
            policy: corrupt(env, &expert, best.0),
        });
    }
    if tiers.iter().any(|t| (t.achieved - 100.0 * t.fraction).abs() > FAIL_TOL) {
        return Err(EnvError::Calibration {
            requested: fractions.to_vec(),
            achieved: tiers.iter().map(|t| t.achieved / 100.0).collect(),
        });
    }
    Ok(tiers)
}
