use std::fs;
use std::path::{Path, PathBuf};

use ilmar_core::data::{MixtureSpec, Ratio};
use ilmar_core::envs::{EnvSpec, GridWorldSpec};
use ilmar_core::models::EvalAction;
use ilmar_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Everything a command needs. The resolved value is written next to every
/// artifact as `config.toml`; running again from that file reproduces the
/// artifact bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Name of the task directory in the run layout.
    pub task: String,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Dataset written by `gen-data`. Without it the mixture is rebuilt in
    /// memory from `env` and `mixture`.
    pub data: Option<PathBuf>,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub env: EnvSpec,
    pub mixture: MixtureConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub analyze: AnalyzeConfig,
}

/// The mixture as written in a config file: the ratio is a token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureConfig {
    pub n_expert_in_de: usize,
    pub n_expert_in_ds: usize,
    /// `T1`, `T2`, `T3` or a non-negative number.
    pub ratio: String,
    pub tier_fractions: Vec<f64>,
    pub seed: u64,
}

/// Settings of the standalone `evaluate` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub action: EvalAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    /// Rollouts per advantage estimate where no exact oracle exists.
    pub mc_rollouts: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: "grid-t3".into(),
            out: "runs".into(),
            seeds: vec![0],
            data: None,
            checkpoint_interval: 5_000,
            env: EnvSpec::Gridworld(GridWorldSpec::default()),
            mixture: MixtureConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl Default for MixtureConfig {
    fn default() -> Self {
        let d = MixtureSpec::default();
        MixtureConfig {
            n_expert_in_de: d.n_expert_in_de,
            n_expert_in_ds: d.n_expert_in_ds,
            ratio: "T3".into(),
            tier_fractions: d.tier_fractions,
            seed: d.seed,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            episodes: 10,
            seed: 0,
            action: EvalAction::Sample,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alpha: vec![0.0, 0.1, 0.3, 0.7, 1.0],
            beta: vec![0.0, 0.01, 0.05, 0.5, 1.0],
        }
    }
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            mc_rollouts: 64,
            seed: 0,
        }
    }
}

impl MixtureConfig {
    pub fn spec(&self) -> Result<MixtureSpec, CliError> {
        let ratio: Ratio = self
            .ratio
            .parse()
            .map_err(|e| CliError::Usage(format!("mixture.ratio: {e}")))?;
        Ok(MixtureSpec {
            n_expert_in_de: self.n_expert_in_de,
            n_expert_in_ds: self.n_expert_in_ds,
            suboptimal_ratio: ratio.0,
            tier_fractions: self.tier_fractions.clone(),
            seed: self.seed,
        })
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }

    /// Writes the config as `config.toml` inside `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        crate::write_file(&dir.join(CONFIG_FILE), self.to_toml().as_bytes())
    }

    /// Checks everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.task.is_empty() || self.task.contains(['/', '\\']) {
            return Err(CliError::Usage(format!(
                "task: `{}` is not a usable directory name",
                self.task
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("seeds: at least one seed is required".into()));
        }
        self.env.validate().map_err(|e| CliError::Usage(format!("env: {e}")))?;
        self.mixture.spec()?;
        self.train
            .validate()
            .map_err(|e| CliError::Usage(format!("train: {e}")))?;
        if self.eval.episodes == 0 {
            return Err(CliError::Usage("eval.episodes must be at least 1".into()));
        }
        Ok(())
    }

    /// Directory of one training run: `<out>/<mode>/<task>/<seed>`.
    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out
            .join(self.train.mode.as_str())
            .join(&self.task)
            .join(seed.to_string())
    }

    /// The config to echo into a single-seed run directory.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        RunConfig {
            seeds: vec![seed],
            ..self.clone()
        }
    }
}

pub const CONFIG_FILE: &str = "config.toml";
