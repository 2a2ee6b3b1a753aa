//! Policy evaluation, the normalized score, rank correlation of learned
//! weights against oracle advantages, and learning-curve aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use ilmar_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::DemoDataset;
use crate::envs::{rollout, AdvantageOracle, EnvError, EnvSpec, EnvState, Policy, ReferenceReturns, TabularMdp};
use crate::models::{EvalAction, PolicyModel, RankerInput, RankerModel, WeightValue};
use crate::rng;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("normalized score undefined: expert and random references are both {0}")]
    DegenerateReference(f64),
    #[error("rank correlation needs two sequences of equal length at least 2 (got {0} and {1})")]
    Length(usize, usize),
    #[error("rank correlation undefined: the {0} sequence is constant")]
    Constant(&'static str),
    #[error("every weight is zero; weight quality is undefined")]
    AllWeightsZero,
    #[error("n_episodes must be at least 1")]
    NoEpisodes,
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub std_return: f64,
    pub normalized_score: f64,
    pub n_episodes: usize,
    pub seed: u64,
}

/// `100 · (mean − random) / (expert − random)`.
pub fn normalized_score(mean: f64, random_ref: f64, expert_ref: f64) -> Result<f64, EvalError> {
    if expert_ref == random_ref {
        return Err(EvalError::DegenerateReference(expert_ref));
    }
    Ok(100.0 * (mean - random_ref) / (expert_ref - random_ref))
}

/// Undiscounted returns of `n_episodes` rollouts; episode `i` uses the
/// generator derived from `(seed, i)`.
pub fn evaluate_policy(
    policy: &dyn Policy,
    env: &EnvSpec,
    n_episodes: usize,
    seed: u64,
    refs: &ReferenceReturns,
) -> Result<EvalResult, EvalError> {
    if n_episodes == 0 {
        return Err(EvalError::NoEpisodes);
    }
    let returns = (0..n_episodes)
        .map(|i| {
            let mut r = rng::derive(seed, &[i as u64]);
            Ok(rollout(env, policy, &mut r)?.iter().map(|s| s.reward).sum::<f64>())
        })
        .collect::<Result<Vec<f64>, EnvError>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok(EvalResult {
        mean_return: mean,
        std_return: var.sqrt(),
        normalized_score: normalized_score(mean, refs.random, refs.expert)?,
        n_episodes,
        seed,
    })
}

/// Scores learned policies during training. On a gridworld the expected
/// return is computed exactly from the policy's action table, so the score
/// carries no sampling noise; elsewhere it falls back to rollouts.
#[derive(Clone, Debug)]
pub struct Evaluator {
    env: EnvSpec,
    refs: ReferenceReturns,
    mdp: Option<TabularMdp>,
    action: EvalAction,
    episodes: usize,
    seed: u64,
}

impl Evaluator {
    pub fn new(
        env: &EnvSpec,
        refs: ReferenceReturns,
        action: EvalAction,
        episodes: usize,
        seed: u64,
    ) -> Result<Self, EvalError> {
        let mdp = env.grid().map(|g| g.to_tabular()).transpose()?;
        Ok(Evaluator {
            env: env.clone(),
            refs,
            mdp,
            action,
            episodes,
            seed,
        })
    }

    pub fn refs(&self) -> &ReferenceReturns {
        &self.refs
    }

    /// Expected (or sample-mean) undiscounted return.
    pub fn expected_return(&self, model: &PolicyModel) -> Result<f64, EvalError> {
        match (&self.mdp, self.env.grid()) {
            (Some(mdp), Some(g)) => {
                let pi = model.to_tabular(&self.env, self.action)?;
                Ok(crate::envs::tabular::finite_horizon_return(
                    mdp,
                    &pi,
                    g.start_cell(),
                    g.horizon,
                )?)
            }
            _ => {
                let r = evaluate_policy(
                    &model.actor(self.action),
                    &self.env,
                    self.episodes,
                    self.seed,
                    &self.refs,
                )?;
                Ok(r.mean_return)
            }
        }
    }

    pub fn score(&self, model: &PolicyModel) -> Result<f64, EvalError> {
        normalized_score(self.expected_return(model)?, self.refs.random, self.refs.expert)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rho: f64,
    pub n: usize,
    pub variant: String,
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64, EvalError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 {
        return Err(EvalError::Constant("first"));
    }
    if syy == 0.0 {
        return Err(EvalError::Constant("second"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation as the Pearson correlation of average ranks,
/// which equals `1 − 6Σd²/(n(n²−1))` when there are no ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<CorrelationReport, EvalError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(EvalError::Length(x.len(), y.len()));
    }
    Ok(CorrelationReport {
        rho: pearson(&average_ranks(x), &average_ranks(y))?,
        n: x.len(),
        variant: "average-rank".into(),
    })
}

/// What learned weights are compared against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityVariant {
    /// Per transition: weight against the oracle advantage.
    Advantage,
    /// Per trajectory: mean weight against the episode return.
    TrajectoryReturn,
}

impl QualityVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            QualityVariant::Advantage => "advantage",
            QualityVariant::TrajectoryReturn => "trajectory-return",
        }
    }
}

/// Weights `w(s, a, π)` for every supplementary transition, trajectory by
/// trajectory.
pub fn supplementary_weights(
    ranker: &RankerModel,
    policy: &PolicyModel,
    ds: &DemoDataset,
    input: RankerInput,
    seed: u64,
) -> Result<Vec<Vec<WeightValue>>, EvalError> {
    let mut rng = rng::derive(seed, &[0x7e18]);
    ds.supplementary
        .iter()
        .map(|t| {
            let states: Vec<&[f64]> = t.transitions.iter().map(|tr| tr.state.as_slice()).collect();
            let actions: Vec<&[f64]> = t.transitions.iter().map(|tr| tr.action.as_slice()).collect();
            let s = Tensor::from_rows(&states).map_err(|e| EnvError::InvalidSpec(e.to_string()))?;
            let a = Tensor::from_rows(&actions).map_err(|e| EnvError::InvalidSpec(e.to_string()))?;
            let own = policy.action_for_ranker(&s, input, &mut rng);
            Ok(ranker
                .forward(&s, &a, &own)
                .into_iter()
                .map(WeightValue::from_c)
                .collect())
        })
        .collect()
}

/// Rank correlation between learned weights and ground truth on the
/// supplementary set.
pub fn weight_quality(
    weights: &[Vec<WeightValue>],
    ds: &DemoDataset,
    env: &EnvSpec,
    oracle: &AdvantageOracle<'_>,
    variant: QualityVariant,
) -> Result<CorrelationReport, EvalError> {
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (traj, w) in ds.supplementary.iter().zip(weights) {
        match variant {
            QualityVariant::Advantage => {
                for (tr, wv) in traj.transitions.iter().zip(w) {
                    let state = state_of(env, &tr.state)?;
                    x.push(wv.w);
                    y.push(oracle.advantage(&state, &env.decode_action(&tr.action))?.value);
                }
            }
            QualityVariant::TrajectoryReturn => {
                x.push(w.iter().map(|v| v.w).sum::<f64>() / w.len().max(1) as f64);
                y.push(traj.total_return());
            }
        }
    }
    if x.iter().all(|&v| v == 0.0) {
        return Err(EvalError::AllWeightsZero);
    }
    let mut report = spearman_rho(&x, &y)?;
    report.variant = variant.as_str().into();
    Ok(report)
}

/// Recovers an environment state from its observation (time set to zero).
fn state_of(env: &EnvSpec, obs: &[f64]) -> Result<EnvState, EvalError> {
    Ok(match env {
        EnvSpec::Gridworld(g) => {
            let cell = crate::envs::argmax(obs);
            EnvState::Grid {
                cell,
                t: 0,
                done: cell == g.goal_cell(),
            }
        }
        EnvSpec::PointMass(_) => EnvState::PointMass {
            x: obs.to_vec(),
            t: 0,
            done: false,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: usize,
    pub mean_score: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub n_seeds: usize,
}

/// Mean and `mean ± 1.96·s/√n` per iteration across runs, where `s` is the
/// sample standard deviation (zero for a single run).
pub fn aggregate_curves(runs: &[Vec<(usize, f64)>]) -> Vec<CurvePoint> {
    let mut by_iter: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for &(it, score) in run {
            by_iter.entry(it).or_default().push(score);
        }
    }
    by_iter
        .into_iter()
        .map(|(iter, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 {
                (v.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let half = 1.96 * std / n.sqrt();
            CurvePoint {
                iter,
                mean_score: mean,
                ci_lo: mean - half,
                ci_hi: mean + half,
                n_seeds: v.len(),
            }
        })
        .collect()
}

/// Writes one `iter,score` CSV per run (named `run-<i>.csv`) and the
/// aggregate `curves.csv` into `dir`.
pub fn emit_curves(runs: &[Vec<(usize, f64)>], dir: &Path) -> Result<Vec<CurvePoint>, EvalError> {
    let csv_err = |path: &Path| {
        let path = path.display().to_string();
        move |source| EvalError::Csv { path, source }
    };
    for (i, run) in runs.iter().enumerate() {
        let path = dir.join(format!("run-{i}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        w.write_record(["iter", "score"]).map_err(csv_err(&path))?;
        for (it, s) in run {
            w.write_record([it.to_string(), s.to_string()])
                .map_err(csv_err(&path))?;
        }
        w.flush().map_err(|e| csv_err(&path)(e.into()))?;
    }
    let points = aggregate_curves(runs);
    let path = dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    for p in &points {
        w.serialize(p).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| csv_err(&path)(e.into()))?;
    Ok(points)
}
