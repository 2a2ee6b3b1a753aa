use ilmar_autodiff::{loss_fn, value_and_grad, AutodiffError, ParamVars, ParamVector, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::losses::{expert_nll, pair_nll, Batch, PairBatch};
use super::report::DiagnosticSummary;
use crate::models::{PolicyArch, PolicyHead, RankerArch};

/// Alignment between a policy step and the composite ranker loss, measured
/// on one fixed batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub iter: usize,
    /// `⟨∇_θ L_C(θ_{t+1}), ∇_θ L_actor(θ_t)⟩`
    pub inner: f64,
    pub g2sq: f64,
    /// `inner / g2sq`; undefined for a vanishing actor gradient.
    pub implied_k: Option<f64>,
    pub loss_before: f64,
    pub loss_after: f64,
}

pub const G2SQ_FLOOR: f64 = 1e-12;

impl AlignmentReport {
    pub fn from_parts(
        iter: usize,
        actor_grad: &ParamVector,
        lc_grad_after: &ParamVector,
        before: f64,
        after: f64,
    ) -> Result<Self, AutodiffError> {
        let inner = lc_grad_after.dot(actor_grad)?;
        let g2sq = actor_grad.norm_sq();
        Ok(AlignmentReport {
            iter,
            inner,
            g2sq,
            implied_k: (g2sq >= G2SQ_FLOOR).then(|| inner / g2sq),
            loss_before: before,
            loss_after: after,
        })
    }

    pub fn change(&self) -> f64 {
        self.loss_after - self.loss_before
    }
}

/// The policy's expected action as a differentiable function of `θ`:
/// probabilities for a categorical head, the mean for a Gaussian one.
pub fn policy_expectation<'t>(arch: &PolicyArch, theta: &ParamVars<'t>, s: Var<'t>) -> Var<'t> {
    let head = arch.head_output(theta, s);
    match arch.head {
        PolicyHead::Categorical => head.log_softmax().exp(),
        PolicyHead::Gaussian => head,
    }
}

/// `L_C(θ) = α · expert NLL(θ) + β · pair NLL(θ)` with the ranker fixed.
/// Slots of `pairs` that held the policy's action are recomputed from `θ`.
#[allow(clippy::too_many_arguments)]
pub fn composite_in_theta<'t>(
    tape: &'t Tape,
    theta: &ParamVars<'t>,
    policy: &PolicyArch,
    ranker: &RankerArch,
    psi: &ParamVars<'t>,
    expert: &Batch,
    pairs: Option<&PairBatch>,
    alpha: f64,
    beta: f64,
) -> Var<'t> {
    let mut total = expert_nll(policy, theta, expert).scale(alpha);
    if let (Some(p), true) = (pairs, beta > 0.0) {
        let s = tape.constant(p.states.clone());
        let own = policy_expectation(policy, theta, s);
        let slot = |fixed: &Tensor, k: usize| {
            let m = p.policy_mask(k);
            let keep = m.map(|x| 1.0 - x);
            let cols = fixed.cols();
            let fixed = tape.constant(fixed.clone()) * tape.constant(keep).broadcast_cols(cols);
            fixed + own * tape.constant(m).broadcast_cols(cols)
        };
        let a1 = slot(&p.a1, 0);
        let a2 = slot(&p.a2, 1);
        total = total + pair_nll(ranker, psi, s, a1, a2).scale(beta);
    }
    total
}

/// Realized change of `L_C` across one policy step together with the
/// alignment terms, all on the same batches.
#[allow(clippy::too_many_arguments)]
pub fn alignment_diagnostic(
    iter: usize,
    theta_before: &ParamVector,
    theta_after: &ParamVector,
    actor_grad: &ParamVector,
    policy: &PolicyArch,
    ranker: &RankerArch,
    psi: &ParamVector,
    expert: &Batch,
    pairs: Option<&PairBatch>,
    alpha: f64,
    beta: f64,
) -> Result<AlignmentReport, AutodiffError> {
    let lc = loss_fn(|tape, theta| {
        let psi = psi.bind_const(tape);
        composite_in_theta(tape, theta, policy, ranker, &psi, expert, pairs, alpha, beta)
    });
    let before = ilmar_autodiff::eval(lc, theta_before)?;
    let (after, grad_after) = value_and_grad(lc, theta_after)?;
    AlignmentReport::from_parts(iter, actor_grad, &grad_after, before, after)
}

/// `L(θ) = ½ θᵀ H θ` with diagonal curvature `h`, so the smoothness
/// constant is `max h`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticTestbed {
    pub curvature: Vec<f64>,
    pub start: Vec<f64>,
}

impl QuadraticTestbed {
    pub fn lipschitz(&self) -> f64 {
        self.curvature.iter().cloned().fold(0.0, f64::max)
    }

    fn loss<'t>(&self, theta: &ParamVars<'t>) -> Var<'t> {
        let x = theta.get("theta");
        let h = x.tape().constant(Tensor::row(self.curvature.clone()));
        (x.square() * h).sum_all().scale(0.5)
    }

    /// Runs `steps` gradient steps of size `lr` on `L_actor = L_C = L` and
    /// reports the diagnostic at each one.
    pub fn run(&self, lr: f64, steps: usize) -> Result<Vec<AlignmentReport>, AutodiffError> {
        let mut theta = ParamVector::new();
        theta.insert("theta", Tensor::row(self.start.clone()))?;
        let f = loss_fn(|_, p| self.loss(p));
        let mut out = Vec::with_capacity(steps);
        for it in 0..steps {
            let (before, g) = value_and_grad(f, &theta)?;
            let next = ilmar_autodiff::sgd_step(&theta, &g, lr)?;
            let (after, g_after) = value_and_grad(f, &next)?;
            out.push(AlignmentReport::from_parts(it, &g, &g_after, before, after)?);
            theta = next;
        }
        Ok(out)
    }
}

pub fn summarize(reports: &[AlignmentReport]) -> DiagnosticSummary {
    let steps = reports.len();
    let mut ks: Vec<f64> = reports.iter().filter_map(|r| r.implied_k).collect();
    ks.sort_by(f64::total_cmp);
    let frac = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
    DiagnosticSummary {
        steps,
        non_increasing_frac: frac(reports.iter().filter(|r| r.change() <= 0.0).count(), steps),
        implied_k_defined: ks.len(),
        implied_k_min: ks.first().copied(),
        implied_k_median: (!ks.is_empty()).then(|| {
            let m = ks.len() / 2;
            if ks.len().is_multiple_of(2) {
                0.5 * (ks[m - 1] + ks[m])
            } else {
                ks[m]
            }
        }),
        implied_k_max: ks.last().copied(),
        implied_k_positive_frac: frac(ks.iter().filter(|&&k| k > 0.0).count(), ks.len()),
    }
}
