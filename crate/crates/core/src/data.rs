//! Demonstration datasets: collection, the expert/supplementary mixture,
//! JSON-lines persistence and summary statistics.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::envs::{rollout, EnvError, EnvSpec, Policy, TierPolicy};
use crate::rng;

pub const SCHEMA_VERSION: u32 = 1;
pub const EXPERT_SOURCE: &str = "expert";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid mixture: {0}")]
    Mixture(String),
}

/// One recorded step. `reward` is kept for evaluation and reporting; the
/// training code only ever sees a [`TrainingView`], which has no rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub episode_id: usize,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn episode_id(&self) -> usize {
        self.transitions[0].episode_id
    }

    pub fn source_id(&self) -> &str {
        &self.transitions[0].source_id
    }

    pub fn total_return(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// Where the trajectories of a dataset came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Trajectories per source in the expert split.
    pub expert_split: IndexMap<String, usize>,
    /// Trajectories per source in the supplementary split.
    pub supplementary_split: IndexMap<String, usize>,
    /// Tiers that received one extra trajectory when the suboptimal count
    /// did not divide evenly.
    pub remainder_to: Vec<String>,
    pub tiers: Vec<TierInfo>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierInfo {
    pub source_id: String,
    pub fraction: f64,
    pub corruption: f64,
    pub achieved_score: f64,
}

/// `D^E` (expert split) and `D^S` (supplementary split); `D` is their union.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemoDataset {
    pub expert: Vec<Trajectory>,
    pub supplementary: Vec<Trajectory>,
    pub provenance: Provenance,
}

/// Runs `n_episodes` episodes; actions are recorded as executed.
pub fn collect(
    policy: &dyn Policy,
    env: &EnvSpec,
    n_episodes: usize,
    seed: u64,
    source_id: &str,
    first_episode_id: usize,
) -> Result<Vec<Trajectory>, DataError> {
    let mut out = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let mut rng = rng::derive(seed, &[i as u64]);
        let steps = rollout(env, policy, &mut rng)?;
        let episode_id = first_episode_id + i;
        out.push(Trajectory {
            transitions: steps
                .into_iter()
                .map(|s| Transition {
                    state: env.observe(&s.state),
                    action: env.encode_action(&s.action),
                    reward: s.reward,
                    done: s.done,
                    episode_id,
                    source_id: source_id.to_string(),
                })
                .collect(),
        });
    }
    Ok(out)
}

/// Suboptimal-to-expert ratio of the supplementary split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio(pub f64);

impl Ratio {
    pub const T1: Ratio = Ratio(0.25);
    pub const T2: Ratio = Ratio(1.0);
    pub const T3: Ratio = Ratio(4.0);
}

impl FromStr for Ratio {
    type Err = String;

    /// Accepts the presets `T1`, `T2`, `T3` or a non-negative number.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T1" => Ok(Ratio::T1),
            "T2" => Ok(Ratio::T2),
            "T3" => Ok(Ratio::T3),
            other => match other.parse::<f64>() {
                Ok(r) if r >= 0.0 && r.is_finite() => Ok(Ratio(r)),
                _ => Err(format!("expected T1, T2, T3 or a non-negative number, got `{s}`")),
            },
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSpec {
    pub n_expert_in_de: usize,
    pub n_expert_in_ds: usize,
    /// Suboptimal trajectories per expert trajectory in `D^S`.
    pub suboptimal_ratio: f64,
    pub tier_fractions: Vec<f64>,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        MixtureSpec {
            n_expert_in_de: 1,
            n_expert_in_ds: 40,
            suboptimal_ratio: Ratio::T3.0,
            tier_fractions: vec![0.8, 0.6, 0.4, 0.2],
            seed: 0,
        }
    }
}

impl MixtureSpec {
    pub fn n_suboptimal(&self) -> usize {
        (self.suboptimal_ratio * self.n_expert_in_ds as f64).round() as usize
    }

    /// Trajectories per tier: equal shares, remainder to the first tiers.
    pub fn per_tier_counts(&self) -> Vec<usize> {
        let k = self.tier_fractions.len();
        if k == 0 {
            return Vec::new();
        }
        let total = self.n_suboptimal();
        (0..k).map(|i| total / k + usize::from(i < total % k)).collect()
    }
}

pub fn tier_source_id(index: usize) -> String {
    format!("tier-{}", index + 1)
}

/// Builds `D^E` and `D^S` with exact trajectory counts per source.
pub fn build_mixture(
    spec: &MixtureSpec,
    env: &EnvSpec,
    expert: &dyn Policy,
    tiers: &[TierPolicy],
) -> Result<DemoDataset, DataError> {
    if spec.n_expert_in_de == 0 {
        return Err(DataError::Mixture(
            "the expert split needs at least one trajectory".into(),
        ));
    }
    if !(spec.suboptimal_ratio >= 0.0 && spec.suboptimal_ratio.is_finite()) {
        return Err(DataError::Mixture(format!(
            "ratio must be non-negative, got {}",
            spec.suboptimal_ratio
        )));
    }
    let counts = spec.per_tier_counts();
    if spec.n_suboptimal() > 0 && tiers.len() != spec.tier_fractions.len() {
        return Err(DataError::Mixture(format!(
            "{} tier fractions but {} tier policies",
            spec.tier_fractions.len(),
            tiers.len()
        )));
    }
    let seed = spec.seed;
    let mut prov = Provenance {
        seed: Some(seed),
        ..Default::default()
    };

    let de = collect(
        expert,
        env,
        spec.n_expert_in_de,
        rng::derive_seed(seed, &[0]),
        EXPERT_SOURCE,
        0,
    )?;
    prov.expert_split.insert(EXPERT_SOURCE.into(), de.len());

    let mut ds = collect(
        expert,
        env,
        spec.n_expert_in_ds,
        rng::derive_seed(seed, &[1]),
        EXPERT_SOURCE,
        0,
    )?;
    prov.supplementary_split.insert(EXPERT_SOURCE.into(), ds.len());
    let even = spec.n_suboptimal() / counts.len().max(1);
    for (k, (tier, &n)) in tiers.iter().zip(&counts).enumerate() {
        let source = tier_source_id(k);
        let trajs = collect(
            &tier.policy,
            env,
            n,
            rng::derive_seed(seed, &[2 + k as u64]),
            &source,
            ds.len(),
        )?;
        ds.extend(trajs);
        if n > even {
            prov.remainder_to.push(source.clone());
        }
        prov.supplementary_split.insert(source.clone(), n);
        prov.tiers.push(TierInfo {
            source_id: source,
            fraction: tier.fraction,
            corruption: tier.corruption,
            achieved_score: tier.achieved,
        });
    }
    Ok(DemoDataset {
        expert: de,
        supplementary: ds,
        provenance: prov,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
    env: Option<EnvSpec>,
    provenance: Provenance,
}

#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Expert,
    Supplementary,
}

#[derive(Serialize, Deserialize)]
struct Line {
    split: Split,
    #[serde(flatten)]
    t: Transition,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl DemoDataset {
    /// Iterates `D = D^E ∪ D^S`.
    pub fn all(&self) -> impl Iterator<Item = &Trajectory> {
        self.expert.iter().chain(&self.supplementary)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        for (name, split) in [("expert", &self.expert), ("supplementary", &self.supplementary)] {
            let mut seen = std::collections::HashSet::new();
            for t in split {
                if t.is_empty() {
                    return Err(DataError::Mixture(format!("empty trajectory in the {name} split")));
                }
                if !seen.insert(t.episode_id()) {
                    return Err(DataError::Mixture(format!(
                        "episode id {} repeated in the {name} split",
                        t.episode_id()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, env: Option<&EnvSpec>, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            schema: SCHEMA_VERSION,
            env: env.cloned(),
            provenance: self.provenance.clone(),
        };
        writeln!(w, "{}", to_line(&header)).map_err(io_err(path))?;
        for (split, trajs) in [
            (Split::Expert, &self.expert),
            (Split::Supplementary, &self.supplementary),
        ] {
            for t in trajs.iter() {
                for tr in &t.transitions {
                    let line = Line { split, t: tr.clone() };
                    writeln!(w, "{}", to_line(&line)).map_err(io_err(path))?;
                }
            }
        }
        w.flush().map_err(io_err(path))
    }

    /// Reads a file written by [`save`](Self::save); returns the dataset and
    /// the environment recorded in the header.
    pub fn load(path: &Path) -> Result<(DemoDataset, Option<EnvSpec>), DataError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let parse = |line: usize, message: String| DataError::Parse { line, message };

        let header: Header = match lines.next() {
            Some((_, Ok(text))) => {
                let value: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| parse(1, format!("bad header: {e}")))?;
                match value.get("schema").and_then(|s| s.as_u64()) {
                    Some(v) if v == SCHEMA_VERSION as u64 => {}
                    other => {
                        return Err(parse(
                            1,
                            format!("unsupported schema {other:?}, expected {SCHEMA_VERSION}"),
                        ))
                    }
                }
                serde_json::from_value(value).map_err(|e| parse(1, format!("bad header: {e}")))?
            }
            Some((_, Err(e))) => return Err(io_err(path)(e)),
            None => return Err(parse(1, "empty file (missing header)".into())),
        };

        let mut ds = DemoDataset {
            provenance: header.provenance,
            ..Default::default()
        };
        let mut open_line = None;
        for (i, text) in lines {
            let lineno = i + 1;
            let text = text.map_err(io_err(path))?;
            let line: Line = serde_json::from_str(&text).map_err(|e| parse(lineno, e.to_string()))?;
            let split = match line.split {
                Split::Expert => &mut ds.expert,
                Split::Supplementary => &mut ds.supplementary,
            };
            let continues = split.last().is_some_and(|t: &Trajectory| {
                t.episode_id() == line.t.episode_id && !t.transitions.last().is_some_and(|x| x.done)
            });
            if continues {
                split.last_mut().unwrap().transitions.push(line.t);
            } else {
                if let Some(l) = open_line {
                    return Err(parse(l, "trajectory ends without a terminal step".into()));
                }
                split.push(Trajectory {
                    transitions: vec![line.t],
                });
            }
            let last_done = split.last().unwrap().transitions.last().unwrap().done;
            open_line = if last_done { None } else { Some(lineno) };
        }
        if let Some(l) = open_line {
            return Err(parse(l, "file truncated inside a trajectory".into()));
        }
        ds.validate()?;
        Ok((ds, header.env))
    }

    /// Reward-free arrays for training.
    pub fn training_view(&self) -> TrainingView {
        TrainingView::new(self)
    }
}

fn to_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("dataset records serialize")
}

/// State-action pairs of `D` without rewards. Rows `0..n_expert` are `D^E`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingView {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    /// Index into `sources` per row.
    pub source: Vec<usize>,
    pub sources: Vec<String>,
    pub n_expert: usize,
}

impl TrainingView {
    fn new(ds: &DemoDataset) -> Self {
        let first = ds.all().flat_map(|t| t.transitions.first()).next();
        let obs_dim = first.map_or(0, |t| t.state.len());
        let action_dim = first.map_or(0, |t| t.action.len());
        let mut view = TrainingView {
            obs_dim,
            action_dim,
            states: Vec::new(),
            actions: Vec::new(),
            source: Vec::new(),
            sources: Vec::new(),
            n_expert: ds.expert.iter().map(Trajectory::len).sum(),
        };
        for t in ds.all() {
            for tr in &t.transitions {
                let idx = match view.sources.iter().position(|s| *s == tr.source_id) {
                    Some(i) => i,
                    None => {
                        view.sources.push(tr.source_id.clone());
                        view.sources.len() - 1
                    }
                };
                view.states.extend_from_slice(&tr.state);
                view.actions.extend_from_slice(&tr.action);
                view.source.push(idx);
            }
        }
        view
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    pub fn state(&self, row: usize) -> &[f64] {
        &self.states[row * self.obs_dim..(row + 1) * self.obs_dim]
    }

    pub fn action(&self, row: usize) -> &[f64] {
        &self.actions[row * self.action_dim..(row + 1) * self.action_dim]
    }

    pub fn source_of(&self, row: usize) -> &str {
        &self.sources[self.source[row]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub trajectories: usize,
    pub transitions: usize,
    pub mean_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Keyed by `split/source`, e.g. `supplementary/tier-2`.
    pub sources: IndexMap<String, SourceStats>,
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

fn moments(rows: &[&[f64]], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r.iter()) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *v += (x - m).powi(2) / n;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

pub fn dataset_stats(ds: &DemoDataset) -> DatasetStats {
    let mut acc: IndexMap<String, (usize, usize, f64)> = IndexMap::new();
    for (split, trajs) in [("expert", &ds.expert), ("supplementary", &ds.supplementary)] {
        for t in trajs.iter() {
            let e = acc.entry(format!("{split}/{}", t.source_id())).or_default();
            e.0 += 1;
            e.1 += t.len();
            e.2 += t.total_return();
        }
    }
    let sources = acc
        .into_iter()
        .map(|(k, (n, len, ret))| {
            (
                k,
                SourceStats {
                    trajectories: n,
                    transitions: len,
                    mean_return: ret / n as f64,
                },
            )
        })
        .collect();
    let trs: Vec<&Transition> = ds.all().flat_map(|t| &t.transitions).collect();
    let obs_dim = trs.first().map_or(0, |t| t.state.len());
    let act_dim = trs.first().map_or(0, |t| t.action.len());
    let (state_mean, state_std) = moments(&trs.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>(), obs_dim);
    let (action_mean, action_std) = moments(&trs.iter().map(|t| t.action.as_slice()).collect::<Vec<_>>(), act_dim);
    DatasetStats {
        sources,
        state_mean,
        state_std,
        action_mean,
        action_std,
    }
}
