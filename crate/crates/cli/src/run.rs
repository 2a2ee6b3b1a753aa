//! Dataset generation, training runs with checkpoints, and the α/β sweep.

use std::fs;
use std::path::{Path, PathBuf};

use ilmar_core::data::{build_mixture, dataset_stats, DatasetStats, DemoDataset, Provenance};
use ilmar_core::envs::{expert_policy, make_tier_policies, reference_returns};
use ilmar_core::eval::{emit_curves, Evaluator};
use ilmar_core::models::save_params;
use ilmar_core::train::{AlignmentReport, Mode, ReportWriter, TrainError, TrainState, Trainer};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, CONFIG_FILE};
use crate::{create_dir, io_error, read_json, write_file, write_json, CliError};

pub const DATA_FILE: &str = "demos.jsonl";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const REPORT_FILE: &str = "report.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const POLICY_FILE: &str = "policy.params.jsonl";
pub const CRITIC_FILE: &str = "critic.params.jsonl";
pub const HEATMAP_FILE: &str = "heatmap.csv";

/// Builds the demonstration mixture described by the config.
pub fn build_dataset(cfg: &RunConfig) -> Result<DemoDataset, CliError> {
    let spec = cfg.mixture.spec()?;
    let expert = expert_policy(&cfg.env)?;
    let tiers = make_tier_policies(&cfg.env, &spec.tier_fractions)?;
    Ok(build_mixture(&spec, &cfg.env, &expert, &tiers)?)
}

/// The configured dataset file, or the mixture rebuilt in memory.
pub fn load_dataset(cfg: &RunConfig) -> Result<DemoDataset, CliError> {
    let Some(path) = &cfg.data else {
        return build_dataset(cfg);
    };
    let (ds, env) = DemoDataset::load(path)?;
    if env.as_ref().is_some_and(|e| *e != cfg.env) {
        return Err(CliError::Usage(format!(
            "data: {} was generated for a different environment than [env]",
            path.display()
        )));
    }
    Ok(ds)
}

#[derive(Serialize)]
struct ProvenanceSummary<'a> {
    provenance: &'a Provenance,
    stats: DatasetStats,
}

pub fn data_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("data").join(&cfg.task)
}

/// Writes `demos.jsonl`, `provenance.json` and the config under
/// `<out>/data/<task>/`. Returns the dataset path.
pub fn gen_data(cfg: &RunConfig, force: bool) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let dir = data_dir(cfg);
    let path = dir.join(DATA_FILE);
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    let ds = build_dataset(cfg)?;
    create_dir(&dir)?;
    ds.save(Some(&cfg.env), &path)?;
    write_json(
        &dir.join(PROVENANCE_FILE),
        &ProvenanceSummary {
            provenance: &ds.provenance,
            stats: dataset_stats(&ds),
        },
    )?;
    RunConfig {
        data: Some(path.clone()),
        ..cfg.clone()
    }
    .echo(&dir)?;
    Ok(path)
}

/// Written when a run completes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub task: String,
    pub seed: u64,
    pub iterations: usize,
    pub final_score: Option<f64>,
    pub evals: Vec<(usize, f64)>,
}

/// Where one seed of a run stopped.
#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Complete(RunSummary),
    /// Abandoned on request at this iteration.
    Paused(usize),
}

struct DiagnosticsWriter {
    inner: csv::Writer<fs::File>,
    path: PathBuf,
}

impl DiagnosticsWriter {
    /// Starts `path` afresh, keeping earlier rows before `keep_before`.
    fn open(path: &Path, keep_before: Option<usize>) -> Result<Self, CliError> {
        let kept = match keep_before {
            Some(iter) => read_diagnostics(path)?.into_iter().filter(|d| d.iter < iter).collect(),
            None => Vec::new(),
        };
        let mut w = DiagnosticsWriter {
            inner: csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(path)
                .map_err(|e| io_error(path, e))?,
            path: path.to_path_buf(),
        };
        w.inner
            .write_record(DIAGNOSTIC_COLUMNS)
            .map_err(|e| io_error(path, e))?;
        for d in &kept {
            w.push(d)?;
        }
        Ok(w)
    }

    fn push(&mut self, d: &AlignmentReport) -> Result<(), CliError> {
        self.inner.serialize(d).map_err(|e| io_error(&self.path, e))
    }

    fn flush(&mut self) -> Result<(), CliError> {
        self.inner.flush().map_err(|e| io_error(&self.path, e))
    }
}

const DIAGNOSTIC_COLUMNS: [&str; 6] = ["iter", "inner", "g2sq", "implied_k", "loss_before", "loss_after"];

pub fn read_diagnostics(path: &Path) -> Result<Vec<AlignmentReport>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io_error(path, e))
}

fn save_checkpoint(dir: &Path, state: &TrainState) -> Result<(), CliError> {
    let text = serde_json::to_vec(state).expect("train states serialize");
    write_file(&dir.join(CHECKPOINT_FILE), &text)
}

fn train_error(dir: &Path, e: TrainError) -> CliError {
    match CliError::from(e) {
        CliError::Numerical(m) => CliError::Numerical(format!("{m}; the last good checkpoint is in {}", dir.display())),
        other => other,
    }
}

/// Trains one seed in `cfg.run_dir(seed)`, resuming from a checkpoint if
/// one exists. `stop_after` abandons the run at that iteration without a
/// final checkpoint, like a killed process.
pub fn train_seed(
    cfg: &RunConfig,
    ds: &DemoDataset,
    seed: u64,
    force: bool,
    stop_after: Option<usize>,
) -> Result<RunStatus, CliError> {
    let dir = cfg.run_dir(seed);
    if dir.join(SUMMARY_FILE).exists() && !force {
        return Err(CliError::Usage(format!(
            "{} holds a finished run; pass --force to redo it",
            dir.display()
        )));
    }
    if force && dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    }
    let checkpoint = dir.join(CHECKPOINT_FILE);
    let resolved = cfg.for_seed(seed);
    if checkpoint.exists() && RunConfig::load(&dir.join(CONFIG_FILE))? != resolved {
        return Err(CliError::Usage(format!(
            "{} holds a checkpoint from a different config; pass --force to start over",
            dir.display()
        )));
    }
    create_dir(&dir)?;
    resolved.echo(&dir)?;

    let view = ds.training_view();
    let refs = reference_returns(&cfg.env)?;
    let ev = Evaluator::new(&cfg.env, refs, cfg.train.eval.action, cfg.train.eval.episodes, seed)?;
    let mut trainer = Trainer::new(cfg.train.clone(), &view, &cfg.env, ev, seed)?;

    let (report_path, diag_path) = (dir.join(REPORT_FILE), dir.join(DIAGNOSTICS_FILE));
    let (mut report, mut diags) = if checkpoint.exists() {
        let state: TrainState = read_json(&checkpoint)?;
        let iter = state.iteration;
        trainer.restore(state)?;
        (
            ReportWriter::resume(&report_path, iter)?,
            DiagnosticsWriter::open(&diag_path, Some(iter))?,
        )
    } else {
        (
            ReportWriter::create(&report_path)?,
            DiagnosticsWriter::open(&diag_path, None)?,
        )
    };

    let every = cfg.checkpoint_interval;
    while !trainer.done() {
        let it = trainer.state().iteration;
        if stop_after == Some(it) {
            // rows past the last checkpoint reach the disk, as they would
            // before a crash
            report.flush()?;
            diags.flush()?;
            return Ok(RunStatus::Paused(it));
        }
        match trainer.step() {
            Ok(out) => {
                report.push(&out.row)?;
                if let Some(d) = &out.diagnostic {
                    diags.push(d)?;
                }
            }
            Err(e) => {
                report.flush()?;
                diags.flush()?;
                save_checkpoint(&dir, trainer.state())?;
                return Err(train_error(&dir, e));
            }
        }
        if every > 0 && trainer.state().iteration % every == 0 && !trainer.done() {
            report.flush()?;
            diags.flush()?;
            save_checkpoint(&dir, trainer.state())?;
        }
    }
    report.flush()?;
    diags.flush()?;
    save_checkpoint(&dir, trainer.state())?;
    save_params(&trainer.state().policy, &dir.join(POLICY_FILE))?;
    if let Some(critic) = &trainer.state().critic {
        save_params(critic, &dir.join(CRITIC_FILE))?;
    }
    let summary = RunSummary {
        mode: cfg.train.mode,
        task: cfg.task.clone(),
        seed,
        iterations: trainer.state().iteration,
        final_score: trainer.final_score(),
        evals: trainer.state().evals.clone(),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(RunStatus::Complete(summary))
}

/// Runs every seed in order and writes learning curves across them to
/// `<out>/<mode>/<task>/curves/`.
pub fn train(cfg: &RunConfig, force: bool) -> Result<Vec<RunSummary>, CliError> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    let mut done = Vec::new();
    for &seed in &cfg.seeds {
        match train_seed(cfg, &ds, seed, force, None)? {
            RunStatus::Complete(s) => done.push(s),
            RunStatus::Paused(_) => unreachable!("no stop requested"),
        }
    }
    let curves = cfg.out.join(cfg.train.mode.as_str()).join(&cfg.task).join("curves");
    create_dir(&curves)?;
    let runs: Vec<Vec<(usize, f64)>> = done.iter().map(|s| s.evals.clone()).collect();
    emit_curves(&runs, &curves)?;
    Ok(done)
}

/// One row of the sweep heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub mean_score: f64,
    pub std_score: f64,
    pub n_seeds: usize,
}

pub fn sweep_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("sweep").join(&cfg.task)
}

/// The grid minus `(0, 0)`, where the ranker would never move.
pub fn sweep_cells(alpha: &[f64], beta: &[f64]) -> Result<Vec<(f64, f64)>, CliError> {
    if alpha.is_empty() || beta.is_empty() {
        return Err(CliError::Usage(
            "sweep: the alpha and beta grids must both be non-empty".into(),
        ));
    }
    for (name, grid) in [("sweep.alpha", alpha), ("sweep.beta", beta)] {
        if let Some(v) = grid.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(CliError::Usage(format!("{name}: {v} is not a non-negative number")));
        }
    }
    let cells: Vec<(f64, f64)> = alpha
        .iter()
        .flat_map(|&a| beta.iter().map(move |&b| (a, b)))
        .filter(|&(a, b)| !(a == 0.0 && b == 0.0))
        .collect();
    if cells.is_empty() {
        return Err(CliError::Usage("sweep: (alpha, beta) = (0, 0) is the only cell".into()));
    }
    Ok(cells)
}

/// The config of one sweep cell. Its runs land under
/// `<out>/sweep/<task>/a<α>_b<β>/`.
pub fn cell_config(cfg: &RunConfig, alpha: f64, beta: f64) -> RunConfig {
    let mut cell = cfg.clone();
    cell.train.alpha = alpha;
    cell.train.beta = beta;
    cell.out = sweep_dir(cfg).join(format!("a{alpha}_b{beta}"));
    cell
}

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = if x.len() > 1 {
        x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains every cell of the α × β grid for every seed, cells in parallel,
/// and writes `heatmap.csv` of mean normalized scores.
pub fn sweep(cfg: &RunConfig, force: bool) -> Result<Vec<SweepCell>, CliError> {
    cfg.validate()?;
    if cfg.train.mode != Mode::Ilmar {
        return Err(CliError::Usage(format!(
            "sweep: train.mode must be ilmar, got {}",
            cfg.train.mode
        )));
    }
    let cells = sweep_cells(&cfg.sweep.alpha, &cfg.sweep.beta)?;
    let dir = sweep_dir(cfg);
    let heatmap = dir.join(HEATMAP_FILE);
    if heatmap.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            heatmap.display()
        )));
    }
    let ds = load_dataset(cfg)?;
    let results: Vec<SweepCell> = cells
        .par_iter()
        .map(|&(alpha, beta)| {
            let cell = cell_config(cfg, alpha, beta);
            let mut scores = Vec::with_capacity(cfg.seeds.len());
            for &seed in &cfg.seeds {
                // finished cells of an interrupted sweep are reused
                let done = cell.run_dir(seed).join(SUMMARY_FILE);
                let s: RunSummary = if done.exists() && !force {
                    read_json(&done)?
                } else {
                    let RunStatus::Complete(s) = train_seed(&cell, &ds, seed, force, None)? else {
                        unreachable!("no stop requested")
                    };
                    s
                };
                scores.push(s.final_score.unwrap_or(f64::NAN));
            }
            let (mean_score, std_score) = mean_std(&scores);
            Ok(SweepCell {
                alpha,
                beta,
                mean_score,
                std_score,
                n_seeds: scores.len(),
            })
        })
        .collect::<Result<_, CliError>>()?;
    create_dir(&dir)?;
    cfg.echo(&dir)?;
    let mut w = csv::Writer::from_path(&heatmap).map_err(|e| io_error(&heatmap, e))?;
    for c in &results {
        w.serialize(c).map_err(|e| io_error(&heatmap, e))?;
    }
    w.flush().map_err(|e| io_error(&heatmap, e))?;
    Ok(results)
}

pub fn read_heatmap(path: &Path) -> Result<Vec<SweepCell>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    r.deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| io_error(path, e))
}

/// Run directories named by the config's seed list.
pub fn run_dirs(cfg: &RunConfig) -> Vec<PathBuf> {
    cfg.seeds.iter().map(|&s| cfg.run_dir(s)).collect()
}
