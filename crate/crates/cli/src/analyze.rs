//! Standalone evaluation of finished runs and the weight-quality and
//! alignment analysis.

use std::path::{Path, PathBuf};

use ilmar_core::envs::{reference_returns, AdvantageOracle, EnvSpec};
use ilmar_core::eval::{
    evaluate_policy, supplementary_weights, weight_quality, CorrelationReport, EvalError, EvalResult, Evaluator,
    QualityVariant,
};
use ilmar_core::models::{load_params, PolicyArch, PolicyModel, RankerArch, RankerModel};
use ilmar_core::train::{summarize, DiagnosticSummary};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::run::{load_dataset, read_diagnostics, CRITIC_FILE, DIAGNOSTICS_FILE, POLICY_FILE, SUMMARY_FILE};
use crate::{write_json, CliError};

pub const EVAL_FILE: &str = "eval.json";
pub const CORRELATION_FILE: &str = "correlation.json";
pub const DIAGNOSTIC_SUMMARY_FILE: &str = "diagnostic_summary.json";

/// A finished run directory with the config it was trained from.
pub struct FinishedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub policy: PolicyModel,
}

impl FinishedRun {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        if !dir.join(SUMMARY_FILE).exists() {
            return Err(CliError::Usage(format!("{} is not a finished run", dir.display())));
        }
        let config = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let arch = PolicyArch::for_env(&config.env, config.train.policy_hidden.clone());
        let params = load_params(&dir.join(POLICY_FILE), Some(&arch.init(0)))?;
        Ok(FinishedRun {
            dir: dir.to_path_buf(),
            config,
            policy: PolicyModel { arch, params },
        })
    }

    pub fn ranker(&self) -> Result<Option<RankerModel>, CliError> {
        if !self.config.train.mode.uses_ranker() {
            return Ok(None);
        }
        let arch = RankerArch::for_env(&self.config.env, self.config.train.ranker.clone());
        let params = load_params(&self.dir.join(CRITIC_FILE), Some(&arch.init(0)))?;
        Ok(Some(RankerModel { arch, params }))
    }

    fn env(&self) -> &EnvSpec {
        &self.config.env
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rollouts: EvalResult,
    /// Normalized score of the exact expected return, on tabular tasks.
    pub exact_score: Option<f64>,
}

/// Rolls out the final policy with the run's `[eval]` settings.
pub fn evaluate(dir: &Path) -> Result<EvalReport, CliError> {
    let run = FinishedRun::open(dir)?;
    let e = &run.config.eval;
    let refs = reference_returns(run.env())?;
    let rollouts = evaluate_policy(&run.policy.actor(e.action), run.env(), e.episodes, e.seed, &refs)?;
    let exact_score = match run.env() {
        EnvSpec::Gridworld(_) => {
            Some(Evaluator::new(run.env(), refs, e.action, e.episodes, e.seed)?.score(&run.policy)?)
        }
        EnvSpec::PointMass(_) => None,
    };
    let report = EvalReport { rollouts, exact_score };
    write_json(&dir.join(EVAL_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    /// One report per variant; empty for modes without a ranker.
    pub correlations: Vec<CorrelationReport>,
    /// Variants that could not be computed, with the reason.
    pub skipped: Vec<(String, String)>,
    pub diagnostics: DiagnosticSummary,
}

/// Weight quality of a run's final ranker against the advantage of its
/// final policy, plus a summary of the alignment diagnostic.
pub fn analyze(dir: &Path) -> Result<Analysis, CliError> {
    let run = FinishedRun::open(dir)?;
    let cfg = &run.config;
    let mut correlations = Vec::new();
    let mut skipped = Vec::new();
    if let Some(ranker) = run.ranker()? {
        let ds = load_dataset(cfg)?;
        let weights = supplementary_weights(&ranker, &run.policy, &ds, cfg.train.ranker_input, cfg.analyze.seed)?;
        let actor = run.policy.actor(cfg.train.eval.action);
        let oracle = match run.env() {
            EnvSpec::Gridworld(_) => {
                AdvantageOracle::exact(run.env(), &run.policy.to_tabular(run.env(), cfg.train.eval.action)?)?
            }
            EnvSpec::PointMass(_) => {
                AdvantageOracle::monte_carlo(run.env(), &actor, cfg.analyze.mc_rollouts, cfg.analyze.seed)
            }
        };
        for variant in [QualityVariant::Advantage, QualityVariant::TrajectoryReturn] {
            match weight_quality(&weights, &ds, run.env(), &oracle, variant) {
                Ok(r) => correlations.push(r),
                Err(e @ (EvalError::AllWeightsZero | EvalError::Constant(_))) => {
                    skipped.push((variant.as_str().to_string(), e.to_string()))
                }
                Err(e) => return Err(e.into()),
            }
        }
    } else {
        skipped.push(("all".into(), format!("mode {} has no ranker", cfg.train.mode)));
    }
    write_json(&dir.join(CORRELATION_FILE), &correlations)?;
    let diagnostics = summarize(&read_diagnostics(&dir.join(DIAGNOSTICS_FILE))?);
    write_json(&dir.join(DIAGNOSTIC_SUMMARY_FILE), &diagnostics)?;
    Ok(Analysis {
        correlations,
        skipped,
        diagnostics,
    })
}
