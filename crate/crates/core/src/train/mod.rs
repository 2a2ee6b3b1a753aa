//! The training loop: weighted behavior cloning with a pairwise action
//! ranker, the bi-level meta objective, ablations and the classifier
//! baseline.

mod config;
mod diag;
mod losses;
mod report;
mod trainer;

pub use config::{EvalSettings, Mode, Optimizer, TrainConfig};
pub use diag::{
    alignment_diagnostic, composite_in_theta, policy_expectation, summarize, AlignmentReport, QuadraticTestbed,
    G2SQ_FLOOR,
};
pub use losses::{
    actor_loss, expert_nll, meta_loss, pair_counts, pair_nll, ranker_weights, sample_pairs, vanilla_loss, weighted_nll,
    Batch, Lookahead, PairBatch, PairKind,
};
pub use report::{read_report, DiagnosticSummary, ReportRow, ReportWriter, REPORT_COLUMNS};
pub use trainer::{train, StepOutput, TrainState, Trainer};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("non-finite {what} at iteration {iteration}")]
    NonFinite { iteration: usize, what: &'static str },
    #[error("meta-gradient requested through an untraced policy step")]
    Untraced,
    #[error(transparent)]
    Autodiff(#[from] ilmar_autodiff::AutodiffError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("report: {0}")]
    Report(String),
}
