use std::f64::consts::PI;

use ilmar_autodiff::{ParamVars, ParamVector, Tape, Tensor, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::mlp::Mlp;
use crate::envs::{argmax, Action, EnvError, EnvSpec, EnvState, Policy, TabularPolicy};
use crate::rng::{self, Rng};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const LOG_STD: &str = "pi.log_std";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyHead {
    Categorical,
    /// Mean from the trunk, state-independent log-std.
    Gaussian,
}

/// How the policy's own action at `s` is presented to the ranker.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankerInput {
    /// Probability vector (discrete) or mean (continuous).
    #[default]
    Expectation,
    /// One-hot draw (discrete) or a Gaussian draw (continuous).
    Sample,
}

/// How the policy acts when it is rolled out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalAction {
    #[default]
    Sample,
    /// Arg-max move or mean action.
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub head: PolicyHead,
}

/// Action distribution over a batch of states.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionDist {
    Categorical { probs: Tensor },
    Gaussian { mean: Tensor, std: Vec<f64> },
}

impl ActionDist {
    pub fn rows(&self) -> usize {
        match self {
            ActionDist::Categorical { probs } => probs.rows(),
            ActionDist::Gaussian { mean, .. } => mean.rows(),
        }
    }

    /// The action encoding the ranker sees for each row.
    pub fn ranker_actions(&self, mode: RankerInput, rng: &mut Rng) -> Tensor {
        match (self, mode) {
            (ActionDist::Categorical { probs }, RankerInput::Expectation) => probs.clone(),
            (ActionDist::Gaussian { mean, .. }, RankerInput::Expectation) => mean.clone(),
            (d, RankerInput::Sample) => d.sample(rng),
        }
    }

    /// One-hot draws or Gaussian draws, one per row.
    pub fn sample(&self, rng: &mut Rng) -> Tensor {
        match self {
            ActionDist::Categorical { probs } => {
                let k = probs.cols();
                let mut out = Tensor::zeros(&[probs.rows(), k]);
                for r in 0..probs.rows() {
                    let a = crate::envs::sample_index(probs.row_slice(r), rng);
                    out.data_mut()[r * k + a] = 1.0;
                }
                out
            }
            ActionDist::Gaussian { mean, std } => {
                let mut out = mean.clone();
                for (i, x) in out.data_mut().iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(rng);
                    *x += std[i % std.len()] * z;
                }
                out
            }
        }
    }

    fn act(&self, row: usize, mode: EvalAction, rng: &mut Rng) -> Action {
        match (self, mode) {
            (ActionDist::Categorical { probs }, EvalAction::Greedy) => Action::Discrete(argmax(probs.row_slice(row))),
            (ActionDist::Categorical { probs }, EvalAction::Sample) => {
                Action::Discrete(crate::envs::sample_index(probs.row_slice(row), rng))
            }
            (ActionDist::Gaussian { mean, .. }, EvalAction::Greedy) => Action::Continuous(mean.row_slice(row).to_vec()),
            (ActionDist::Gaussian { mean, std }, EvalAction::Sample) => Action::Continuous(
                mean.row_slice(row)
                    .iter()
                    .zip(std)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s * z
                    })
                    .collect(),
            ),
        }
    }
}

impl PolicyArch {
    pub fn for_env(env: &EnvSpec, hidden: Vec<usize>) -> Self {
        PolicyArch {
            obs_dim: env.obs_dim(),
            act_dim: env.action_dim(),
            hidden,
            head: if env.is_discrete() {
                PolicyHead::Categorical
            } else {
                PolicyHead::Gaussian
            },
        }
    }

    fn trunk(&self) -> Mlp {
        let mut sizes = vec![self.obs_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.act_dim);
        Mlp::new("pi", sizes)
    }

    pub fn init(&self, seed: u64) -> ParamVector {
        let mut p = ParamVector::new();
        self.trunk().init(&mut p, &mut rng::derive(seed, &[0x9011]), false);
        if self.head == PolicyHead::Gaussian {
            p.insert(LOG_STD, Tensor::zeros(&[1, self.act_dim]))
                .expect("unique layer name");
        }
        p
    }

    /// Logits (categorical) or means (Gaussian), `[N, act_dim]`.
    pub fn head_output<'t>(&self, p: &ParamVars<'t>, obs: Var<'t>) -> Var<'t> {
        self.trunk().forward(p, obs, false)
    }

    fn log_std<'t>(&self, p: &ParamVars<'t>) -> Var<'t> {
        p.get(LOG_STD).clamp(LOG_STD_MIN, LOG_STD_MAX)
    }

    /// `log π(a|s)` per row, `[N, 1]`. Discrete actions are one-hot rows.
    pub fn log_prob<'t>(&self, p: &ParamVars<'t>, obs: Var<'t>, actions: Var<'t>) -> Var<'t> {
        self.log_prob_from_head(p, self.head_output(p, obs), actions)
    }

    /// Same as [`log_prob`](Self::log_prob) but reusing a computed head.
    pub fn log_prob_from_head<'t>(&self, p: &ParamVars<'t>, head: Var<'t>, actions: Var<'t>) -> Var<'t> {
        match self.head {
            PolicyHead::Categorical => (head.log_softmax() * actions).sum_cols(),
            PolicyHead::Gaussian => {
                let n = head.shape()[0];
                let log_std = self.log_std(p);
                let inv_std = log_std.scale(-1.0).exp().broadcast_rows(n);
                let z = (actions - head) * inv_std;
                let norm = log_std.sum_all().expand(n, 1);
                let c = 0.5 * self.act_dim as f64 * (2.0 * PI).ln();
                (z.square().sum_cols().scale(-0.5) - norm).affine(1.0, -c)
            }
        }
    }

    /// Distribution read off an already computed head output.
    pub fn dist_from_head(&self, p: &ParamVars<'_>, head: &Tensor) -> ActionDist {
        match self.head {
            PolicyHead::Categorical => {
                let mut probs = head.clone();
                let k = probs.cols();
                for row in probs.data_mut().chunks_mut(k) {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        total += *x;
                    }
                    row.iter_mut().for_each(|x| *x /= total);
                }
                ActionDist::Categorical { probs }
            }
            PolicyHead::Gaussian => ActionDist::Gaussian {
                mean: head.clone(),
                std: self.log_std(p).value().data().iter().map(|l| l.exp()).collect(),
            },
        }
    }
}

/// A policy network together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyModel {
    pub arch: PolicyArch,
    pub params: ParamVector,
}

impl PolicyModel {
    pub fn new(arch: PolicyArch, seed: u64) -> Self {
        let params = arch.init(seed);
        PolicyModel { arch, params }
    }

    pub fn distribution(&self, obs: &Tensor) -> ActionDist {
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let head = self.arch.head_output(&p, tape.constant(obs.clone()));
        let head = head.to_tensor();
        self.arch.dist_from_head(&p, &head)
    }

    pub fn log_prob(&self, obs: &Tensor, actions: &Tensor) -> Vec<f64> {
        let tape = Tape::new();
        let p = self.params.bind_const(&tape);
        let lp = self
            .arch
            .log_prob(&p, tape.constant(obs.clone()), tape.constant(actions.clone()));
        lp.to_tensor().into_data()
    }

    pub fn action_for_ranker(&self, obs: &Tensor, mode: RankerInput, rng: &mut Rng) -> Tensor {
        self.distribution(obs).ranker_actions(mode, rng)
    }

    /// Acting wrapper for rollouts.
    pub fn actor(&self, mode: EvalAction) -> Actor<'_> {
        Actor { model: self, mode }
    }

    /// Per-cell action distribution of a categorical policy on a gridworld,
    /// as the policy would act under `mode`.
    pub fn to_tabular(&self, env: &EnvSpec, mode: EvalAction) -> Result<TabularPolicy, EnvError> {
        let rows = env.all_grid_observations()?;
        let obs = Tensor::from_rows(&rows).map_err(|e| EnvError::InvalidSpec(e.to_string()))?;
        let ActionDist::Categorical { probs } = self.distribution(&obs) else {
            return Err(EnvError::NotTabular);
        };
        let k = probs.cols();
        let rows = (0..probs.rows())
            .map(|r| {
                let row = probs.row_slice(r);
                match mode {
                    EvalAction::Sample => {
                        let total: f64 = row.iter().sum();
                        row.iter().map(|p| p / total).collect()
                    }
                    EvalAction::Greedy => crate::envs::one_hot(argmax(row), k),
                }
            })
            .collect();
        TabularPolicy::from_rows(rows)
    }
}

pub struct Actor<'a> {
    model: &'a PolicyModel,
    mode: EvalAction,
}

impl Policy for Actor<'_> {
    fn act(&self, env: &EnvSpec, state: &EnvState, rng: &mut Rng) -> Action {
        let obs = Tensor::row(env.observe(state));
        self.model.distribution(&obs).act(0, self.mode, rng)
    }
}
