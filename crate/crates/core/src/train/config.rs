use std::fmt;
use std::str::FromStr;

use ilmar_autodiff::AdamHyper;
use serde::{Deserialize, Serialize};

use crate::models::{EvalAction, RankerInput, RankerSizes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "bc")]
    Bc,
    #[serde(rename = "vanilla-only")]
    VanillaOnly,
    #[serde(rename = "meta-only")]
    MetaOnly,
    #[serde(rename = "ilmar")]
    Ilmar,
    #[serde(rename = "expert-dist-wbc")]
    ExpertDistWbc,
    #[serde(rename = "expert-dist-wbc+meta")]
    ExpertDistWbcMeta,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Bc,
        Mode::VanillaOnly,
        Mode::MetaOnly,
        Mode::Ilmar,
        Mode::ExpertDistWbc,
        Mode::ExpertDistWbcMeta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Bc => "bc",
            Mode::VanillaOnly => "vanilla-only",
            Mode::MetaOnly => "meta-only",
            Mode::Ilmar => "ilmar",
            Mode::ExpertDistWbc => "expert-dist-wbc",
            Mode::ExpertDistWbcMeta => "expert-dist-wbc+meta",
        }
    }

    pub fn uses_ranker(self) -> bool {
        matches!(self, Mode::VanillaOnly | Mode::MetaOnly | Mode::Ilmar)
    }

    pub fn uses_classifier(self) -> bool {
        matches!(self, Mode::ExpertDistWbc | Mode::ExpertDistWbcMeta)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Mode::ALL.iter().map(|m| m.as_str()).collect();
            format!("unknown mode `{s}` (expected one of {})", names.join(", "))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        let d = AdamHyper::default();
        Optimizer::Adam {
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
        }
    }

    pub(crate) fn hyper(self, lr: f64) -> Option<AdamHyper> {
        match self {
            Optimizer::Sgd => None,
            Optimizer::Adam { beta1, beta2, eps } => Some(AdamHyper { lr, beta1, beta2, eps }),
        }
    }
}

/// Hyperparameters of one training run. The seed is supplied separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Policy learning rate `μ`; also the step of the traced lookahead.
    pub policy_lr: f64,
    /// Ranker (or classifier) learning rate `φ`.
    pub ranker_lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub n_expert_batch: usize,
    pub n_batch: usize,
    pub iterations: usize,
    pub eval_interval: usize,
    /// Alignment diagnostic every this many iterations; 0 disables it.
    pub diag_interval: usize,
    pub gp_coef: f64,
    pub ranker_input: RankerInput,
    pub policy_optimizer: Optimizer,
    pub ranker_optimizer: Optimizer,
    pub policy_hidden: Vec<usize>,
    pub ranker: RankerSizes,
    pub classifier_hidden: Vec<usize>,
    pub eval: EvalSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub action: EvalAction,
    /// Rollouts per evaluation where no exact tabular return exists.
    pub episodes: usize,
    /// The run's score is the mean of this many final evaluations.
    pub final_evals: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            action: EvalAction::Sample,
            episodes: 10,
            final_evals: 5,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ilmar,
            policy_lr: 3e-4,
            ranker_lr: 3e-4,
            alpha: 1.0,
            beta: 1.0,
            n_expert_batch: 64,
            n_batch: 64,
            iterations: 50_000,
            eval_interval: 1_000,
            diag_interval: 100,
            gp_coef: 1.0,
            ranker_input: RankerInput::Expectation,
            policy_optimizer: Optimizer::Sgd,
            ranker_optimizer: Optimizer::adam(),
            policy_hidden: vec![64, 64],
            ranker: RankerSizes::default(),
            classifier_hidden: vec![64, 64],
            eval: EvalSettings::default(),
        }
    }
}

impl TrainConfig {
    /// Meta-loss coefficient after the mode's ablation is applied.
    pub fn effective_alpha(&self) -> f64 {
        match self.mode {
            Mode::Bc | Mode::VanillaOnly | Mode::ExpertDistWbc => 0.0,
            _ => self.alpha,
        }
    }

    /// Vanilla-loss coefficient after the mode's ablation is applied.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            Mode::VanillaOnly | Mode::Ilmar => self.beta,
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(format!("{name} must be positive and finite, got {v}"))
            }
        };
        positive("policy_lr", self.policy_lr)?;
        positive("ranker_lr", self.ranker_lr)?;
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gp_coef", self.gp_coef)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if self.n_expert_batch == 0 || self.n_batch == 0 {
            return Err("batch sizes must be at least 1".into());
        }
        if self.mode.uses_ranker() && self.effective_beta() > 0.0 && self.n_batch < 3 {
            return Err("n_batch must be at least 3 so every pair kind appears".into());
        }
        if self.eval_interval == 0 {
            return Err("eval_interval must be at least 1".into());
        }
        if self.eval.final_evals == 0 || self.eval.episodes == 0 {
            return Err("eval.final_evals and eval.episodes must be at least 1".into());
        }
        if !(0.0..0.5).contains(&self.ranker.clip_eps) {
            return Err(format!(
                "ranker.clip_eps must lie in [0, 0.5), got {}",
                self.ranker.clip_eps
            ));
        }
        Ok(())
    }
}
