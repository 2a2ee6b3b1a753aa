use ilmar_autodiff::{sgd_step_traced, ParamVars, Tape, Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::TrainingView;
use crate::envs::EnvSpec;
use crate::models::{weight_mask, PolicyArch, PolicyModel, RankerArch, RankerInput};
use crate::rng::Rng;

/// Rows of the training view gathered into dense tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub states: Tensor,
    pub actions: Tensor,
}

impl Batch {
    pub fn gather(view: &TrainingView, rows: Vec<usize>) -> Self {
        let mut states = Vec::with_capacity(rows.len() * view.obs_dim);
        let mut actions = Vec::with_capacity(rows.len() * view.action_dim);
        for &r in &rows {
            states.extend_from_slice(view.state(r));
            actions.extend_from_slice(view.action(r));
        }
        let n = rows.len();
        Batch {
            rows,
            states: Tensor::new(vec![n, view.obs_dim], states).expect("state rows"),
            actions: Tensor::new(vec![n, view.action_dim], actions).expect("action rows"),
        }
    }

    /// `n` rows drawn uniformly with replacement from `range`.
    pub fn sample(view: &TrainingView, range: std::ops::Range<usize>, n: usize, rng: &mut Rng) -> Self {
        let rows = (0..n).map(|_| rng.random_range(range.clone())).collect();
        Self::gather(view, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairKind {
    /// `(a_E, π_θ(s))` with `(s, a_E)` from the expert set.
    ExpertVsPolicy,
    /// `(a, π^r(s))` with `(s, a)` from the full dataset.
    DataVsRandom,
    /// `(π_θ(s), π^r(s))` with `s` from the full dataset.
    PolicyVsRandom,
}

impl PairKind {
    /// Which slot, if any, holds the policy's own action.
    pub fn policy_slot(self) -> Option<usize> {
        match self {
            PairKind::ExpertVsPolicy => Some(1),
            PairKind::DataVsRandom => None,
            PairKind::PolicyVsRandom => Some(0),
        }
    }
}

/// Ordered comparisons `a1 ⪰ a2` at `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub states: Tensor,
    pub a1: Tensor,
    pub a2: Tensor,
    pub kinds: Vec<PairKind>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    /// `[N, 1]` indicator of rows whose slot `slot` holds the policy action.
    pub fn policy_mask(&self, slot: usize) -> Tensor {
        let data = self
            .kinds
            .iter()
            .map(|k| if k.policy_slot() == Some(slot) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![self.len(), 1], data).expect("mask shape")
    }
}

/// Kind counts for `n` pairs: thirds, with the remainder going to the
/// earlier kinds.
pub fn pair_counts(n: usize) -> [usize; 3] {
    let base = n / 3;
    let rem = n % 3;
    [base + (rem > 0) as usize, base + (rem > 1) as usize, base]
}

/// Builds `n` comparison pairs at the policy's current parameters. Never
/// compares two dataset actions with each other.
pub fn sample_pairs(
    view: &TrainingView,
    policy: &PolicyModel,
    env: &EnvSpec,
    n: usize,
    input: RankerInput,
    rng: &mut Rng,
) -> PairBatch {
    let [n_ep, n_dr, n_pr] = pair_counts(n);
    let mut rows = Vec::with_capacity(n);
    rows.extend((0..n_ep).map(|_| rng.random_range(0..view.n_expert)));
    rows.extend((0..n_dr + n_pr).map(|_| rng.random_range(0..view.len())));
    let kinds: Vec<PairKind> = std::iter::repeat_n(PairKind::ExpertVsPolicy, n_ep)
        .chain(std::iter::repeat_n(PairKind::DataVsRandom, n_dr))
        .chain(std::iter::repeat_n(PairKind::PolicyVsRandom, n_pr))
        .collect();
    let batch = Batch::gather(view, rows);
    let own = policy.action_for_ranker(&batch.states, input, rng);
    let random: Vec<f64> = kinds
        .iter()
        .flat_map(|_| env.encode_action(&env.random_action(rng)))
        .collect();
    let k = view.action_dim;
    let mut a1 = Vec::with_capacity(n * k);
    let mut a2 = Vec::with_capacity(n * k);
    for (i, kind) in kinds.iter().enumerate() {
        let data = batch.actions.row_slice(i);
        let mine = own.row_slice(i);
        let rand = &random[i * k..(i + 1) * k];
        let (x, y) = match kind {
            PairKind::ExpertVsPolicy => (data, mine),
            PairKind::DataVsRandom => (data, rand),
            PairKind::PolicyVsRandom => (mine, rand),
        };
        a1.extend_from_slice(x);
        a2.extend_from_slice(y);
    }
    PairBatch {
        states: batch.states,
        a1: Tensor::new(vec![n, k], a1).expect("pair rows"),
        a2: Tensor::new(vec![n, k], a2).expect("pair rows"),
        kinds,
    }
}

/// Ranker weights `w = 𝕀(c > 1/2) · c` for dataset pairs against the policy
/// action. The mask is a constant; gradients reach `ψ` only through `c`.
pub fn ranker_weights<'t>(
    arch: &RankerArch,
    psi: &ParamVars<'t>,
    states: Var<'t>,
    actions: Var<'t>,
    policy_actions: Var<'t>,
) -> (Var<'t>, Var<'t>) {
    let c = arch.forward(psi, states, actions, policy_actions);
    let mask = weight_mask(&c.value());
    let w = c * c.tape().constant(mask);
    (c, w)
}

/// `-(1/N) Σ w_i log π_θ(a_i|s_i)`; `head` is the policy head for the batch.
pub fn weighted_nll<'t>(
    arch: &PolicyArch,
    theta: &ParamVars<'t>,
    head: Var<'t>,
    actions: Var<'t>,
    w: Var<'t>,
) -> Var<'t> {
    -(w * arch.log_prob_from_head(theta, head, actions)).mean_all()
}

/// The actor loss on `batch`, with the policy action for the ranker already
/// chosen. Differentiable in `psi` when `psi` holds leaves.
pub fn actor_loss<'t>(
    policy: &PolicyArch,
    theta: &ParamVars<'t>,
    ranker: &RankerArch,
    psi: &ParamVars<'t>,
    batch: &Batch,
    policy_actions: &Tensor,
) -> Var<'t> {
    let tape = theta_tape(theta);
    let s = tape.constant(batch.states.clone());
    let a = tape.constant(batch.actions.clone());
    let (_, w) = ranker_weights(ranker, psi, s, a, tape.constant(policy_actions.clone()));
    weighted_nll(policy, theta, policy.head_output(theta, s), a, w)
}

fn theta_tape<'t>(theta: &ParamVars<'t>) -> &'t Tape {
    theta.iter().next().expect("policy has parameters").1.tape()
}

/// Expert negative log-likelihood, the meta objective.
pub fn expert_nll<'t>(arch: &PolicyArch, theta: &ParamVars<'t>, expert: &Batch) -> Var<'t> {
    let tape = theta_tape(theta);
    let lp = arch.log_prob(
        theta,
        tape.constant(expert.states.clone()),
        tape.constant(expert.actions.clone()),
    );
    -lp.mean_all()
}

/// Parameters after one policy step, remembering whether the step was
/// recorded on the tape.
pub struct Lookahead<'t> {
    pub params: ParamVars<'t>,
    pub traced: bool,
}

impl<'t> Lookahead<'t> {
    /// `θ - μ g`, recorded on the tape so that `ψ`-dependence of `g` survives.
    pub fn traced(theta: &ParamVars<'t>, grad: &ParamVars<'t>, lr: f64) -> Self {
        Lookahead {
            params: sgd_step_traced(theta, grad, lr),
            traced: true,
        }
    }

    /// Already computed parameters placed on the tape as constants.
    pub fn detached(params: ParamVars<'t>) -> Self {
        Lookahead { params, traced: false }
    }
}

/// Expert NLL at the lookahead parameters. Asking for `ψ`-gradients through
/// a detached lookahead is an error, since they would silently be zero.
pub fn meta_loss<'t>(
    arch: &PolicyArch,
    next: &Lookahead<'t>,
    expert: &Batch,
    wants_psi_grad: bool,
) -> Result<Var<'t>, TrainError> {
    if wants_psi_grad && !next.traced {
        return Err(TrainError::Untraced);
    }
    Ok(expert_nll(arch, &next.params, expert))
}

/// Pairwise NLL `−log C(s,a1,a2) − log(1 − C(s,a2,a1))`, averaged over pairs.
pub fn pair_nll<'t>(arch: &RankerArch, psi: &ParamVars<'t>, s: Var<'t>, a1: Var<'t>, a2: Var<'t>) -> Var<'t> {
    let (c12, c21) = arch.forward_both(psi, s, a1, a2);
    let terms = c12.ln() + c21.affine(-1.0, 1.0).ln();
    -terms.mean_all()
}

/// The vanilla loss on fixed pairs, split into its NLL and penalty parts.
/// The total is `nll + gp_coef · penalty`.
pub fn vanilla_loss<'t>(
    arch: &RankerArch,
    tape: &'t Tape,
    psi: &ParamVars<'t>,
    pairs: &PairBatch,
    gp_coef: f64,
    rng: &mut Rng,
) -> Result<(Var<'t>, Option<Var<'t>>), TrainError> {
    let s = tape.constant(pairs.states.clone());
    let nll = pair_nll(
        arch,
        psi,
        s,
        tape.constant(pairs.a1.clone()),
        tape.constant(pairs.a2.clone()),
    );
    if gp_coef == 0.0 {
        return Ok((nll, None));
    }
    let gp = arch.gradient_penalty(tape, psi, &pairs.states, &pairs.a1, &pairs.a2, rng)?;
    Ok((nll, Some(gp.scale(gp_coef))))
}
