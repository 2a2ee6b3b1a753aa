//! Gradient verification on tiny networks: the meta-gradient computed
//! three ways, first-order gradients of every training loss against central
//! differences, and a sign-flip mutation that the checks must catch.

use std::time::{Duration, Instant};

use ilmar_autodiff::{
    coupled_fn, eval, finite_diff_grad, grad, loss_fn, max_relative_error, mixed_second_vjp, sgd_step, value_and_grad,
    AutodiffError, ParamVector, Tape, Tensor,
};
use rand::Rng as _;
use serde::Serialize;

use crate::envs::{EnvSpec, GridWorldSpec, LinPointMassSpec};
use crate::models::{ClassifierArch, PolicyArch, RankerArch, RankerSizes, DEFAULT_CLIP};
use crate::rng;
use crate::train::{actor_loss, expert_nll, meta_loss, pair_nll, Batch, Lookahead, PairBatch, PairKind};

pub const FD_STEP: f64 = 1e-5;
/// Relative errors are taken against `max(|a|, |b|, floor)`.
pub const REL_FLOOR: f64 = 1e-6;
pub const META_FORMULA_TOL: f64 = 1e-6;
pub const META_FD_TOL: f64 = 1e-4;
pub const FIRST_ORDER_TOL: f64 = 1e-6;
pub const FIRST_ORDER_MAX_PARAMS: usize = 200;

/// Rows closer than this to the weight threshold or the clip bounds are
/// resampled: finite differences across either kink are meaningless.
const KINK_MARGIN: f64 = 1e-3;

/// One bi-level problem: a policy step on the weighted loss followed by the
/// expert loss at the stepped parameters.
#[derive(Clone, Debug)]
pub struct MetaCase {
    pub env: EnvSpec,
    pub policy: PolicyArch,
    pub ranker: RankerArch,
    pub theta: ParamVector,
    pub psi: ParamVector,
    pub batch: Batch,
    /// The policy action shown to the ranker, fixed for the case.
    pub own: Tensor,
    pub expert: Batch,
    pub lr: f64,
}

fn tiny_envs() -> [EnvSpec; 2] {
    [
        EnvSpec::Gridworld(GridWorldSpec {
            width: 3,
            height: 3,
            goal: (2, 2),
            ..Default::default()
        }),
        EnvSpec::PointMass(LinPointMassSpec::default()),
    ]
}

fn uniform(r: &mut rng::Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

fn actions(env: &EnvSpec, r: &mut rng::Rng, rows: usize) -> Tensor {
    let k = env.action_dim();
    if env.is_discrete() {
        let mut t = Tensor::zeros(&[rows, k]);
        for i in 0..rows {
            let a = r.random_range(0..k);
            t.data_mut()[i * k + a] = 1.0;
        }
        t
    } else {
        uniform(r, rows, k, 1.0)
    }
}

fn soft_actions(env: &EnvSpec, r: &mut rng::Rng, rows: usize) -> Tensor {
    if !env.is_discrete() {
        return uniform(r, rows, env.action_dim(), 1.0);
    }
    let mut t = uniform(r, rows, env.action_dim(), 1.0).map(f64::exp);
    let k = t.cols();
    for row in t.data_mut().chunks_mut(k) {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= total);
    }
    t
}

fn batch(s: Tensor, a: Tensor) -> Batch {
    Batch {
        rows: (0..s.rows()).collect(),
        states: s,
        actions: a,
    }
}

pub const TINY_STATE_DIM: usize = 2;

fn tiny_policy(env: &EnvSpec) -> PolicyArch {
    PolicyArch {
        obs_dim: TINY_STATE_DIM,
        ..PolicyArch::for_env(env, vec![4])
    }
}

fn tiny_ranker(env: &EnvSpec) -> RankerArch {
    RankerArch {
        obs_dim: TINY_STATE_DIM,
        ..RankerArch::for_env(
            env,
            RankerSizes {
                state_hidden: vec![4],
                action_hidden: vec![],
                head_hidden: vec![4],
                ..Default::default()
            },
        )
    }
}

fn away_from_kinks(c: &[f64], clip: f64) -> bool {
    c.iter()
        .all(|&c| (c - 0.5).abs() > KINK_MARGIN && c > clip + KINK_MARGIN && c < 1.0 - clip - KINK_MARGIN)
}

impl MetaCase {
    /// Alternates categorical (grid moves) and Gaussian (point-mass) action
    /// spaces, always over two-dimensional states. The ranker is scaled up so
    /// that a good share of rows get non-zero weight.
    pub fn tiny(index: usize, seed: u64) -> Self {
        let envs = tiny_envs();
        let env = envs[index % 2].clone();
        for attempt in 0u64.. {
            let mut r = rng::derive(seed, &[index as u64, attempt]);
            let policy = tiny_policy(&env);
            let ranker = tiny_ranker(&env);
            let theta = policy.init(r.random());
            let psi = ranker.init(r.random()).map(|x| 3.0 * x);
            let n = 6;
            let b = batch(uniform(&mut r, n, TINY_STATE_DIM, 1.0), actions(&env, &mut r, n));
            let own = soft_actions(&env, &mut r, n);
            let expert = batch(uniform(&mut r, 5, TINY_STATE_DIM, 1.0), actions(&env, &mut r, 5));
            let case = MetaCase {
                env: env.clone(),
                policy,
                ranker,
                theta,
                psi,
                batch: b,
                own,
                expert,
                lr: 0.5,
            };
            let c = case.ranker_outputs();
            if away_from_kinks(&c, case.ranker.sizes.clip_eps) && c.iter().filter(|&&c| c > 0.5).count() >= 2 {
                return case;
            }
        }
        unreachable!()
    }

    pub fn ranker_outputs(&self) -> Vec<f64> {
        let tape = Tape::new();
        let psi = self.psi.bind_const(&tape);
        self.ranker
            .forward(
                &psi,
                tape.constant(self.batch.states.clone()),
                tape.constant(self.batch.actions.clone()),
                tape.constant(self.own.clone()),
            )
            .to_tensor()
            .into_data()
    }

    pub fn num_params(&self) -> usize {
        self.theta.total_len() + self.psi.total_len()
    }

    /// Backpropagation through the recorded policy step.
    pub fn traced(&self) -> Result<ParamVector, AutodiffError> {
        let tape = Tape::new();
        let theta = self.theta.bind(&tape);
        let psi = self.psi.bind(&tape);
        let loss = actor_loss(&self.policy, &theta, &self.ranker, &psi, &self.batch, &self.own);
        let g = theta.with_same_names(tape.grad(loss, &theta.vars(), true)?);
        let next = Lookahead::traced(&theta, &g, self.lr);
        let lm = meta_loss(&self.policy, &next, &self.expert, true).expect("traced lookahead");
        Ok(psi.with_same_names(tape.grad(lm, &psi.vars(), false)?).values())
    }

    /// `-μ (∂²L_actor/∂ψ∂θ) ∇_θ L_meta(θ')`, assembled from a plain gradient
    /// and one mixed second-order product.
    pub fn formula(&self) -> Result<ParamVector, AutodiffError> {
        let actor = coupled_fn(|_t, th, ps| actor_loss(&self.policy, th, &self.ranker, ps, &self.batch, &self.own));
        let inner = loss_fn(|t, th| {
            let ps = self.psi.bind_const(t);
            actor(t, th, &ps)
        });
        let g = grad(inner, &self.theta)?;
        let next = sgd_step(&self.theta, &g, self.lr)?;
        let v = grad(loss_fn(|_t, th| expert_nll(&self.policy, th, &self.expert)), &next)?;
        Ok(mixed_second_vjp(&v, actor, &self.theta, &self.psi)?.map(|x| -self.lr * x))
    }

    /// Meta loss as a function of `ψ` alone, differenced numerically.
    pub fn finite_difference(&self, step: f64) -> Result<ParamVector, AutodiffError> {
        let meta = |psi: &ParamVector| -> Result<f64, AutodiffError> {
            let inner = loss_fn(|t, th| {
                let ps = psi.bind_const(t);
                actor_loss(&self.policy, th, &self.ranker, &ps, &self.batch, &self.own)
            });
            let g = grad(inner, &self.theta)?;
            let next = sgd_step(&self.theta, &g, self.lr)?;
            eval(loss_fn(|_t, th| expert_nll(&self.policy, th, &self.expert)), &next)
        };
        let base = self.psi.flatten();
        let mut probe = base.clone();
        let mut out = vec![0.0; base.len()];
        for i in 0..base.len() {
            probe[i] = base[i] + step;
            let hi = meta(&self.psi.unflatten(&probe)?)?;
            probe[i] = base[i] - step;
            let lo = meta(&self.psi.unflatten(&probe)?)?;
            probe[i] = base[i];
            out[i] = (hi - lo) / (2.0 * step);
        }
        self.psi.unflatten(&out)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MetaAgreement {
    pub case: usize,
    pub env: String,
    pub params: usize,
    pub traced_vs_formula: f64,
    pub traced_vs_fd: f64,
    pub formula_vs_fd: f64,
}

impl MetaAgreement {
    pub fn passed(&self) -> bool {
        self.traced_vs_formula <= META_FORMULA_TOL
            && self.traced_vs_fd <= META_FD_TOL
            && self.formula_vs_fd <= META_FD_TOL
    }
}

pub fn check_meta(index: usize, case: &MetaCase) -> Result<MetaAgreement, AutodiffError> {
    check_meta_mutated(index, case, false)
}

/// With `flip_sign`, the closed-form meta-gradient is negated before the
/// comparison; a sound check must then fail.
pub fn check_meta_mutated(index: usize, case: &MetaCase, flip_sign: bool) -> Result<MetaAgreement, AutodiffError> {
    let a = case.traced()?;
    let mut b = case.formula()?;
    if flip_sign {
        b = b.map(|x| -x);
    }
    let c = case.finite_difference(FD_STEP)?;
    Ok(MetaAgreement {
        case: index,
        env: case.env.name().to_string(),
        params: case.num_params(),
        traced_vs_formula: max_relative_error(&a, &b, REL_FLOOR),
        traced_vs_fd: max_relative_error(&a, &c, REL_FLOOR),
        formula_vs_fd: max_relative_error(&b, &c, REL_FLOOR),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub params: usize,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol && self.params <= FIRST_ORDER_MAX_PARAMS
    }
}

fn compare<F>(name: String, loss: F, at: &ParamVector, flip_sign: bool) -> Result<GradCheck, AutodiffError>
where
    F: for<'t> Fn(&'t Tape, &ilmar_autodiff::ParamVars<'t>) -> ilmar_autodiff::Var<'t>,
{
    let (_, mut analytic) = value_and_grad(&loss, at)?;
    if flip_sign {
        analytic = analytic.map(|x| -x);
    }
    let numeric = finite_diff_grad(&loss, at, FD_STEP)?;
    Ok(GradCheck {
        name,
        params: at.total_len(),
        max_rel_err: max_relative_error(&analytic, &numeric, REL_FLOOR),
        tol: FIRST_ORDER_TOL,
    })
}

fn pairs_for(case: &MetaCase, r: &mut rng::Rng) -> PairBatch {
    let n = case.batch.len();
    let a2 = soft_actions(&case.env, r, n);
    PairBatch {
        states: case.batch.states.clone(),
        a1: case.batch.actions.clone(),
        a2,
        kinds: vec![PairKind::DataVsRandom; n],
    }
}

/// Every first-order gradient the training loop uses, on the tiny cases.
/// With `flip_sign` the analytic gradients are negated, which every check
/// must then report as a failure.
pub fn first_order_suite(seed: u64, flip_sign: bool) -> Result<Vec<GradCheck>, AutodiffError> {
    let mut out = Vec::new();
    for index in 0..2 {
        let case = MetaCase::tiny(index, seed);
        let env = case.env.name();
        let mut r = rng::derive(seed, &[0x6c, index as u64]);

        let actor_theta = loss_fn(|t, th| {
            let ps = case.psi.bind_const(t);
            actor_loss(&case.policy, th, &case.ranker, &ps, &case.batch, &case.own)
        });
        out.push(compare(
            format!("{env}/actor-loss/theta"),
            actor_theta,
            &case.theta,
            flip_sign,
        )?);

        let actor_psi = loss_fn(|t, ps| {
            let th = case.theta.bind_const(t);
            actor_loss(&case.policy, &th, &case.ranker, ps, &case.batch, &case.own)
        });
        out.push(compare(
            format!("{env}/actor-loss/psi"),
            actor_psi,
            &case.psi,
            flip_sign,
        )?);

        let meta = loss_fn(|_t, th| expert_nll(&case.policy, th, &case.expert));
        out.push(compare(format!("{env}/meta-loss/theta"), meta, &case.theta, flip_sign)?);

        let pairs = pairs_for(&case, &mut r);
        let vanilla = loss_fn(|t, ps| {
            pair_nll(
                &case.ranker,
                ps,
                t.constant(pairs.states.clone()),
                t.constant(pairs.a1.clone()),
                t.constant(pairs.a2.clone()),
            )
        });
        out.push(compare(
            format!("{env}/vanilla-loss/psi"),
            vanilla,
            &case.psi,
            flip_sign,
        )?);

        let penalty = loss_fn(|t, ps| {
            case.ranker
                .gradient_penalty(
                    t,
                    ps,
                    &pairs.states,
                    &pairs.a1,
                    &pairs.a2,
                    &mut rng::derive(seed, &[0x67]),
                )
                .expect("penalty graph")
        });
        out.push(compare(
            format!("{env}/gradient-penalty/psi"),
            penalty,
            &case.psi,
            flip_sign,
        )?);

        let classifier = ClassifierArch {
            obs_dim: TINY_STATE_DIM,
            ..ClassifierArch::for_env(&case.env, vec![4], DEFAULT_CLIP)
        };
        let chi = classifier.init(r.random());
        let negatives = pairs.a2.clone();
        let bce = loss_fn(|t, p| {
            let s = t.constant(case.batch.states.clone());
            let pos = classifier.forward(p, s, t.constant(case.batch.actions.clone()));
            let neg = classifier.forward(p, s, t.constant(negatives.clone()));
            -(pos.ln().mean_all() + neg.affine(-1.0, 1.0).ln().mean_all())
        });
        out.push(compare(format!("{env}/classifier-loss/chi"), bce, &chi, flip_sign)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub meta: Vec<MetaAgreement>,
    pub meta_elapsed: Duration,
    pub first_order: Vec<GradCheck>,
    pub first_order_elapsed: Duration,
    /// Checks that still passed with negated gradients, first-order checks
    /// by name and meta trials as `meta/<trial>`. Must be empty.
    pub mutation_survivors: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.meta.iter().all(MetaAgreement::passed)
            && self.first_order.iter().all(GradCheck::passed)
            && self.mutation_survivors.is_empty()
    }
}

pub const META_CASES: usize = 10;

pub fn run_suite(seed: u64) -> Result<GradcheckReport, AutodiffError> {
    let start = Instant::now();
    let meta = (0..META_CASES)
        .map(|i| check_meta(i, &MetaCase::tiny(i, seed)))
        .collect::<Result<Vec<_>, _>>()?;
    let meta_elapsed = start.elapsed();
    let start = Instant::now();
    let first_order = first_order_suite(seed, false)?;
    let first_order_elapsed = start.elapsed();
    let mut mutation_survivors: Vec<String> = first_order_suite(seed, true)?
        .into_iter()
        .filter(GradCheck::passed)
        .map(|c| c.name)
        .collect();
    for i in 0..META_CASES {
        if check_meta_mutated(i, &MetaCase::tiny(i, seed), true)?.passed() {
            mutation_survivors.push(format!("meta/{i}"));
        }
    }
    Ok(GradcheckReport {
        meta,
        meta_elapsed,
        first_order,
        first_order_elapsed,
        mutation_survivors,
    })
}
