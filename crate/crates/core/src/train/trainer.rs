use ilmar_autodiff::{adam_step, sgd_step, AdamState, ParamVector, Tape};
use serde::{Deserialize, Serialize};

use super::config::{Optimizer, TrainConfig};
use super::diag::{alignment_diagnostic, AlignmentReport};
use super::losses::{
    expert_nll, meta_loss, ranker_weights, sample_pairs, vanilla_loss, weighted_nll, Batch, Lookahead, PairBatch,
};
use super::report::ReportRow;
use super::TrainError;
use crate::data::TrainingView;
use crate::envs::EnvSpec;
use crate::eval::Evaluator;
use crate::models::{ClassifierArch, ClassifierModel, PolicyArch, PolicyModel, RankerArch, RankerModel};
use crate::rng;

// stream tags for per-iteration generators
const EXPERT_BATCH: u64 = 1;
const DATA_BATCH: u64 = 2;
const RANKER_INPUT: u64 = 3;
const PAIRS: u64 = 4;
const PENALTY: u64 = 5;
const NEGATIVES: u64 = 6;
const INIT: u64 = 0x1417;

/// Everything that changes during training. Restoring it resumes a run
/// exactly, because every random draw is derived from `(seed, iteration)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Iterations completed so far.
    pub iteration: usize,
    pub policy: ParamVector,
    /// Ranker or classifier parameters, when the mode has one.
    pub critic: Option<ParamVector>,
    pub policy_opt: Option<AdamState>,
    pub critic_opt: Option<AdamState>,
    /// `(iteration, normalized score)` of every evaluation so far.
    pub evals: Vec<(usize, f64)>,
}

/// The scored result of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub row: ReportRow,
    pub diagnostic: Option<AlignmentReport>,
}

enum Critic {
    None,
    Ranker(RankerArch),
    Classifier(ClassifierArch),
}

pub struct Trainer<'a> {
    config: TrainConfig,
    view: &'a TrainingView,
    env: &'a EnvSpec,
    evaluator: Evaluator,
    seed: u64,
    policy_arch: PolicyArch,
    critic: Critic,
    state: TrainState,
}

fn optimizer_state(opt: Optimizer, like: &ParamVector) -> Option<AdamState> {
    matches!(opt, Optimizer::Adam { .. }).then(|| AdamState::new(like))
}

fn apply(
    opt: Optimizer,
    lr: f64,
    params: &ParamVector,
    grad: &ParamVector,
    state: &Option<AdamState>,
) -> Result<(ParamVector, Option<AdamState>), TrainError> {
    Ok(match (opt.hyper(lr), state) {
        (Some(h), Some(s)) => {
            let (p, s) = adam_step(s, params, grad, &h)?;
            (p, Some(s))
        }
        _ => (sgd_step(params, grad, lr)?, None),
    })
}

fn finite(what: &'static str, iter: usize, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { iteration: iter, what })
    }
}

fn weight_stats(w: &[f64]) -> (f64, f64) {
    let n = w.len().max(1) as f64;
    (
        w.iter().sum::<f64>() / n,
        w.iter().filter(|&&x| x == 0.0).count() as f64 / n,
    )
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        view: &'a TrainingView,
        env: &'a EnvSpec,
        evaluator: Evaluator,
        seed: u64,
    ) -> Result<Self, TrainError> {
        config.validate().map_err(TrainError::Config)?;
        if view.n_expert == 0 {
            return Err(TrainError::Data("the expert set is empty".into()));
        }
        if view.obs_dim != env.obs_dim() || view.action_dim != env.action_dim() {
            return Err(TrainError::Data(format!(
                "dataset has obs/action widths {}/{} but the environment expects {}/{}",
                view.obs_dim,
                view.action_dim,
                env.obs_dim(),
                env.action_dim()
            )));
        }
        if config.mode.uses_classifier() && view.len() == view.n_expert {
            return Err(TrainError::Data("the supplementary set is empty".into()));
        }
        let policy_arch = PolicyArch::for_env(env, config.policy_hidden.clone());
        let policy = policy_arch.init(rng::derive_seed(seed, &[INIT, 0]));
        let critic_seed = rng::derive_seed(seed, &[INIT, 1]);
        let (critic, critic_params) = if config.mode.uses_ranker() {
            let arch = RankerArch::for_env(env, config.ranker.clone());
            let p = arch.init(critic_seed);
            (Critic::Ranker(arch), Some(p))
        } else if config.mode.uses_classifier() {
            let arch = ClassifierArch::for_env(env, config.classifier_hidden.clone(), config.ranker.clip_eps);
            let p = arch.init(critic_seed);
            (Critic::Classifier(arch), Some(p))
        } else {
            (Critic::None, None)
        };
        let state = TrainState {
            iteration: 0,
            policy_opt: optimizer_state(config.policy_optimizer, &policy),
            critic_opt: critic_params
                .as_ref()
                .and_then(|p| optimizer_state(config.ranker_optimizer, p)),
            policy,
            critic: critic_params,
            evals: Vec::new(),
        };
        Ok(Trainer {
            config,
            view,
            env,
            evaluator,
            seed,
            policy_arch,
            critic,
            state,
        })
    }

    /// Replaces the fresh state with a saved one after checking that its
    /// parameter layout matches this configuration.
    pub fn restore(&mut self, state: TrainState) -> Result<(), TrainError> {
        self.state.policy.check_structure(&state.policy)?;
        match (&self.state.critic, &state.critic) {
            (Some(a), Some(b)) => a.check_structure(b)?,
            (None, None) => {}
            _ => return Err(TrainError::Data("checkpoint critic does not match the mode".into())),
        }
        if state.policy_opt.is_some() != self.state.policy_opt.is_some()
            || state.critic_opt.is_some() != self.state.critic_opt.is_some()
        {
            return Err(TrainError::Data(
                "checkpoint optimizer state does not match the configuration".into(),
            ));
        }
        if state.iteration > self.config.iterations {
            return Err(TrainError::Data(format!(
                "checkpoint is at iteration {} beyond the configured {}",
                state.iteration, self.config.iterations
            )));
        }
        self.state = state;
        Ok(())
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn done(&self) -> bool {
        self.state.iteration >= self.config.iterations
    }

    pub fn policy(&self) -> PolicyModel {
        PolicyModel {
            arch: self.policy_arch.clone(),
            params: self.state.policy.clone(),
        }
    }

    pub fn ranker(&self) -> Option<RankerModel> {
        match (&self.critic, &self.state.critic) {
            (Critic::Ranker(arch), Some(p)) => Some(RankerModel {
                arch: arch.clone(),
                params: p.clone(),
            }),
            _ => None,
        }
    }

    pub fn classifier(&self) -> Option<ClassifierModel> {
        match (&self.critic, &self.state.critic) {
            (Critic::Classifier(arch), Some(p)) => Some(ClassifierModel {
                arch: arch.clone(),
                params: p.clone(),
            }),
            _ => None,
        }
    }

    /// Mean of the last `final_evals` evaluation scores.
    pub fn final_score(&self) -> Option<f64> {
        let k = self.config.eval.final_evals.min(self.state.evals.len());
        (k > 0).then(|| {
            self.state.evals[self.state.evals.len() - k..]
                .iter()
                .map(|e| e.1)
                .sum::<f64>()
                / k as f64
        })
    }

    fn is_eval_iteration(&self, it: usize) -> bool {
        (it + 1).is_multiple_of(self.config.eval_interval) || it + 1 == self.config.iterations
    }

    /// Runs one iteration. On error the state is left untouched.
    pub fn step(&mut self) -> Result<StepOutput, TrainError> {
        let it = self.state.iteration;
        let (mut next, mut out) = match &self.critic {
            Critic::None => self.step_bc(it)?,
            Critic::Ranker(arch) => self.step_ranker(it, arch)?,
            Critic::Classifier(arch) => self.step_classifier(it, arch)?,
        };
        if !next.policy.is_finite() || !next.critic.as_ref().is_none_or(ParamVector::is_finite) {
            return Err(TrainError::NonFinite {
                iteration: it,
                what: "parameters",
            });
        }
        next.iteration = it + 1;
        next.evals = std::mem::take(&mut self.state.evals);
        if self.is_eval_iteration(it) {
            let model = PolicyModel {
                arch: self.policy_arch.clone(),
                params: next.policy.clone(),
            };
            match self.evaluator.score(&model) {
                Ok(score) => {
                    next.evals.push((it + 1, score));
                    out.row.eval_score = Some(score);
                }
                Err(e) => {
                    self.state.evals = next.evals;
                    return Err(e.into());
                }
            }
        }
        self.state = next;
        Ok(out)
    }

    fn sample_batches(&self, it: usize) -> (Batch, Batch) {
        let it = it as u64;
        let expert = Batch::sample(
            self.view,
            0..self.view.n_expert,
            self.config.n_expert_batch,
            &mut rng::derive(self.seed, &[it, EXPERT_BATCH]),
        );
        let data = Batch::sample(
            self.view,
            0..self.view.len(),
            self.config.n_batch,
            &mut rng::derive(self.seed, &[it, DATA_BATCH]),
        );
        (expert, data)
    }

    fn policy_step(&self, grad: &ParamVector) -> Result<(ParamVector, Option<AdamState>), TrainError> {
        apply(
            self.config.policy_optimizer,
            self.config.policy_lr,
            &self.state.policy,
            grad,
            &self.state.policy_opt,
        )
    }

    fn expert_nll_at(&self, theta: &ParamVector, expert: &Batch) -> f64 {
        let tape = Tape::new();
        expert_nll(&self.policy_arch, &theta.bind_const(&tape), expert).item()
    }

    fn step_bc(&self, it: usize) -> Result<(TrainState, StepOutput), TrainError> {
        let (expert, data) = self.sample_batches(it);
        let tape = Tape::new();
        let theta = self.state.policy.bind(&tape);
        let s = tape.constant(data.states.clone());
        let a = tape.constant(data.actions.clone());
        let w = tape.constant(ilmar_autodiff::Tensor::full(&[data.len(), 1], 1.0));
        let loss = weighted_nll(&self.policy_arch, &theta, self.policy_arch.head_output(&theta, s), a, w);
        let l_actor = finite("actor loss", it, loss.item())?;
        let g = theta.with_same_names(tape.grad(loss, &theta.vars(), false)?).values();
        let (policy, policy_opt) = self.policy_step(&g)?;
        let l_meta = finite("meta loss", it, self.expert_nll_at(&policy, &expert))?;
        let row = ReportRow {
            iter: it,
            l_actor,
            l_vanilla: None,
            l_meta,
            l_c: None,
            w_mean: 1.0,
            w_zero_frac: 0.0,
            inner: None,
            g2sq: None,
            implied_k: None,
            eval_score: None,
        };
        let next = TrainState {
            iteration: it,
            policy,
            critic: None,
            policy_opt,
            critic_opt: None,
            evals: Vec::new(),
        };
        Ok((next, StepOutput { row, diagnostic: None }))
    }

    fn step_ranker(&self, it: usize, arch: &RankerArch) -> Result<(TrainState, StepOutput), TrainError> {
        let cfg = &self.config;
        let (alpha, beta) = (cfg.effective_alpha(), cfg.effective_beta());
        let psi_now = self.state.critic.as_ref().expect("ranker parameters");
        let (expert, data) = self.sample_batches(it);

        // actor loss and, through the traced policy step, the meta loss
        let tape = Tape::new();
        let theta = self.state.policy.bind(&tape);
        let psi = if alpha > 0.0 {
            psi_now.bind(&tape)
        } else {
            psi_now.bind_const(&tape)
        };
        let s = tape.constant(data.states.clone());
        let a = tape.constant(data.actions.clone());
        let head = self.policy_arch.head_output(&theta, s);
        let own = self
            .policy_arch
            .dist_from_head(&theta, &head.to_tensor())
            .ranker_actions(
                cfg.ranker_input,
                &mut rng::derive(self.seed, &[it as u64, RANKER_INPUT]),
            );
        let (_, w) = ranker_weights(arch, &psi, s, a, tape.constant(own));
        let (w_mean, w_zero_frac) = weight_stats(w.value().data());
        let loss = weighted_nll(&self.policy_arch, &theta, head, a, w);
        let l_actor = finite("actor loss", it, loss.item())?;
        let g = theta.with_same_names(tape.grad(loss, &theta.vars(), alpha > 0.0)?);
        let g_val = g.values();
        let (policy, policy_opt) = self.policy_step(&g_val)?;
        let (l_meta, meta_grad) = if alpha > 0.0 {
            let next = Lookahead::traced(&theta, &g, cfg.policy_lr);
            let lm = meta_loss(&self.policy_arch, &next, &expert, true)?;
            let l_meta = finite("meta loss", it, lm.item())?;
            let gpsi = psi.with_same_names(tape.grad(lm, &psi.vars(), false)?).values();
            (l_meta, Some(gpsi))
        } else {
            (finite("meta loss", it, self.expert_nll_at(&policy, &expert))?, None)
        };
        drop(tape);

        // vanilla loss on pairs drawn at the updated policy
        let (l_vanilla, pairs, van_grad) = if beta > 0.0 {
            let model = PolicyModel {
                arch: self.policy_arch.clone(),
                params: policy.clone(),
            };
            let pairs = sample_pairs(
                self.view,
                &model,
                self.env,
                cfg.n_batch,
                cfg.ranker_input,
                &mut rng::derive(self.seed, &[it as u64, PAIRS]),
            );
            let tape = Tape::new();
            let psi = psi_now.bind(&tape);
            let mut gp_rng = rng::derive(self.seed, &[it as u64, PENALTY]);
            let (nll, gp) = vanilla_loss(arch, &tape, &psi, &pairs, cfg.gp_coef, &mut gp_rng)?;
            let l_van = finite("vanilla loss", it, nll.item())?;
            let total = gp.map_or(nll, |gp| nll + gp);
            finite("gradient penalty", it, total.item())?;
            let g = psi.with_same_names(tape.grad(total, &psi.vars(), false)?).values();
            (Some(l_van), Some(pairs), Some(g))
        } else {
            (None, None, None)
        };

        let combined = match (&meta_grad, &van_grad) {
            (Some(m), Some(v)) => Some(m.zip_map(v, |x, y| alpha * x + beta * y)?),
            (Some(m), None) => Some(m.map(|x| alpha * x)),
            (None, Some(v)) => Some(v.map(|y| beta * y)),
            // α = β = 0: the ranker is frozen at its initialization
            (None, None) => None,
        };
        let (critic, critic_opt) = match combined {
            Some(g) => apply(cfg.ranker_optimizer, cfg.ranker_lr, psi_now, &g, &self.state.critic_opt)?,
            None => (psi_now.clone(), self.state.critic_opt.clone()),
        };

        let diagnostic = if cfg.diag_interval > 0 && it.is_multiple_of(cfg.diag_interval) {
            Some(self.diagnose(it, arch, &policy, &g_val, psi_now, &expert, pairs.as_ref(), alpha, beta)?)
        } else {
            None
        };
        let row = ReportRow {
            iter: it,
            l_actor,
            l_vanilla,
            l_meta,
            l_c: Some(alpha * l_meta + beta * l_vanilla.unwrap_or(0.0)),
            w_mean,
            w_zero_frac,
            inner: diagnostic.as_ref().map(|d| d.inner),
            g2sq: diagnostic.as_ref().map(|d| d.g2sq),
            implied_k: diagnostic.as_ref().and_then(|d| d.implied_k),
            eval_score: None,
        };
        let next = TrainState {
            iteration: it,
            policy,
            critic: Some(critic),
            policy_opt,
            critic_opt,
            evals: Vec::new(),
        };
        Ok((next, StepOutput { row, diagnostic }))
    }

    #[allow(clippy::too_many_arguments)]
    fn diagnose(
        &self,
        it: usize,
        arch: &RankerArch,
        policy_after: &ParamVector,
        actor_grad: &ParamVector,
        psi: &ParamVector,
        expert: &Batch,
        pairs: Option<&PairBatch>,
        alpha: f64,
        beta: f64,
    ) -> Result<AlignmentReport, TrainError> {
        Ok(alignment_diagnostic(
            it,
            &self.state.policy,
            policy_after,
            actor_grad,
            &self.policy_arch,
            arch,
            psi,
            expert,
            pairs,
            alpha,
            beta,
        )?)
    }

    fn step_classifier(&self, it: usize, arch: &ClassifierArch) -> Result<(TrainState, StepOutput), TrainError> {
        let cfg = &self.config;
        let alpha = cfg.effective_alpha();
        let chi_now = self.state.critic.as_ref().expect("classifier parameters");
        let (expert, data) = self.sample_batches(it);

        let tape = Tape::new();
        let theta = self.state.policy.bind(&tape);
        let chi = if alpha > 0.0 {
            chi_now.bind(&tape)
        } else {
            chi_now.bind_const(&tape)
        };
        let s = tape.constant(data.states.clone());
        let a = tape.constant(data.actions.clone());
        let w = arch.forward(&chi, s, a);
        let (w_mean, w_zero_frac) = weight_stats(w.value().data());
        let head = self.policy_arch.head_output(&theta, s);
        let loss = weighted_nll(&self.policy_arch, &theta, head, a, w);
        let l_actor = finite("actor loss", it, loss.item())?;
        let g = theta.with_same_names(tape.grad(loss, &theta.vars(), alpha > 0.0)?);
        let g_val = g.values();
        let (policy, policy_opt) = self.policy_step(&g_val)?;
        let (l_meta, meta_grad) = if alpha > 0.0 {
            let next = Lookahead::traced(&theta, &g, cfg.policy_lr);
            let lm = meta_loss(&self.policy_arch, &next, &expert, true)?;
            let l_meta = finite("meta loss", it, lm.item())?;
            let gchi = chi.with_same_names(tape.grad(lm, &chi.vars(), false)?).values();
            (l_meta, Some(gchi))
        } else {
            (finite("meta loss", it, self.expert_nll_at(&policy, &expert))?, None)
        };
        drop(tape);

        // expert (label 1) against supplementary (label 0)
        let negatives = Batch::sample(
            self.view,
            self.view.n_expert..self.view.len(),
            cfg.n_batch,
            &mut rng::derive(self.seed, &[it as u64, NEGATIVES]),
        );
        let tape = Tape::new();
        let chi = chi_now.bind(&tape);
        let pos = arch.forward(
            &chi,
            tape.constant(expert.states.clone()),
            tape.constant(expert.actions.clone()),
        );
        let neg = arch.forward(
            &chi,
            tape.constant(negatives.states.clone()),
            tape.constant(negatives.actions.clone()),
        );
        let bce = -(pos.ln().mean_all() + neg.affine(-1.0, 1.0).ln().mean_all());
        let l_bce = finite("classifier loss", it, bce.item())?;
        let bce_grad = chi.with_same_names(tape.grad(bce, &chi.vars(), false)?).values();
        let combined = match &meta_grad {
            Some(m) => bce_grad.zip_map(m, |b, m| b + alpha * m)?,
            None => bce_grad,
        };
        let (critic, critic_opt) = apply(
            cfg.ranker_optimizer,
            cfg.ranker_lr,
            chi_now,
            &combined,
            &self.state.critic_opt,
        )?;
        let row = ReportRow {
            iter: it,
            l_actor,
            l_vanilla: Some(l_bce),
            l_meta,
            l_c: Some(alpha * l_meta + l_bce),
            w_mean,
            w_zero_frac,
            inner: None,
            g2sq: None,
            implied_k: None,
            eval_score: None,
        };
        let next = TrainState {
            iteration: it,
            policy,
            critic: Some(critic),
            policy_opt,
            critic_opt,
            evals: Vec::new(),
        };
        Ok((next, StepOutput { row, diagnostic: None }))
    }
}

/// Trains to completion in memory and returns the report rows and
/// diagnostics.
pub fn train(
    config: TrainConfig,
    view: &TrainingView,
    env: &EnvSpec,
    evaluator: Evaluator,
    seed: u64,
) -> Result<(TrainState, Vec<ReportRow>, Vec<AlignmentReport>), TrainError> {
    let mut trainer = Trainer::new(config, view, env, evaluator, seed)?;
    let mut rows = Vec::with_capacity(trainer.config().iterations);
    let mut diags = Vec::new();
    while !trainer.done() {
        let out = trainer.step()?;
        rows.push(out.row);
        diags.extend(out.diagnostic);
    }
    Ok((trainer.state().clone(), rows, diags))
}
