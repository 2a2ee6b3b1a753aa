use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ilmar_cli::{analyze, run, CliError, RunConfig};
use ilmar_core::gradcheck;
use ilmar_core::train::Mode;

#[derive(Parser)]
#[command(
    name = "ilmar",
    version,
    about = "Imitation learning from mixed-quality demonstrations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML run config; built-in defaults otherwise.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output root, overriding `out` in the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed list, overriding `seeds` in the config.
    #[arg(long, value_name = "N[,N...]", value_delimiter = ',')]
    seed: Vec<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the demonstration mixture under `<out>/data/<task>/`.
    GenData(Common),
    /// Train one run per seed under `<out>/<mode>/<task>/<seed>/`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.mode`.
        #[arg(long)]
        mode: Option<Mode>,
    },
    /// Train every cell of the alpha x beta grid and write a heatmap.
    Sweep(Common),
    /// Roll out finished policies with the `[eval]` settings.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        /// Run directories; by default those named by the config and seeds.
        runs: Vec<PathBuf>,
    },
    /// Weight quality and alignment summary of finished runs.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<Mode>,
        runs: Vec<PathBuf>,
    },
    /// Check the meta-gradient and every training gradient numerically.
    Gradcheck(Common),
}

fn resolve(common: &Common, mode: Option<Mode>) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if !common.seed.is_empty() {
        cfg.seeds = common.seed.clone();
    }
    if let Some(mode) = mode {
        cfg.train.mode = mode;
    }
    Ok(cfg)
}

fn targets(common: &Common, mode: Option<Mode>, runs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    if runs.is_empty() {
        Ok(run::run_dirs(&resolve(common, mode)?))
    } else {
        Ok(runs.to_vec())
    }
}

fn score(s: Option<f64>) -> String {
    s.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(common) => {
            let mut cfg = resolve(&common, None)?;
            match common.seed.as_slice() {
                [] => {}
                [seed] => cfg.mixture.seed = *seed,
                _ => return Err(CliError::Usage("gen-data takes a single --seed".into())),
            }
            let path = run::gen_data(&cfg, common.force)?;
            println!("wrote {}", path.display());
        }
        Command::Train { common, mode } => {
            let cfg = resolve(&common, mode)?;
            for s in run::train(&cfg, common.force)? {
                println!(
                    "{} {} seed {}: final score {}",
                    s.mode,
                    s.task,
                    s.seed,
                    score(s.final_score)
                );
            }
        }
        Command::Sweep(common) => {
            let cfg = resolve(&common, None)?;
            println!("alpha,beta,mean_score,std_score,n_seeds");
            for c in run::sweep(&cfg, common.force)? {
                println!(
                    "{},{},{:.3},{:.3},{}",
                    c.alpha, c.beta, c.mean_score, c.std_score, c.n_seeds
                );
            }
        }
        Command::Evaluate { common, mode, runs } => {
            for dir in targets(&common, mode, &runs)? {
                let r = analyze::evaluate(&dir)?;
                println!(
                    "{}: mean return {:.3} (std {:.3}, {} episodes), score {:.2}, exact score {}",
                    dir.display(),
                    r.rollouts.mean_return,
                    r.rollouts.std_return,
                    r.rollouts.n_episodes,
                    r.rollouts.normalized_score,
                    score(r.exact_score)
                );
            }
        }
        Command::Analyze { common, mode, runs } => {
            for dir in targets(&common, mode, &runs)? {
                let a = analyze::analyze(&dir)?;
                println!("{}:", dir.display());
                for c in &a.correlations {
                    println!("  spearman vs {}: rho {:.4} over {} points", c.variant, c.rho, c.n);
                }
                for (variant, why) in &a.skipped {
                    println!("  {variant}: skipped ({why})");
                }
                let d = &a.diagnostics;
                println!(
                    "  alignment: {} steps, non-increasing fraction {}, implied K median {}",
                    d.steps,
                    d.non_increasing_frac
                        .map(|f| format!("{f:.3}"))
                        .unwrap_or_else(|| "-".into()),
                    d.implied_k_median
                        .map(|k| format!("{k:.4}"))
                        .unwrap_or_else(|| "-".into()),
                );
            }
        }
        Command::Gradcheck(common) => {
            let seed = common.seed.first().copied().unwrap_or(0);
            let report = gradcheck::run_suite(seed).map_err(|e| CliError::Numerical(e.to_string()))?;
            println!(
                "meta-gradient: traced vs formula (tol {:e}), each vs finite differences (tol {:e})",
                gradcheck::META_FORMULA_TOL,
                gradcheck::META_FD_TOL
            );
            for m in &report.meta {
                println!(
                    "  trial {:2} {:<10} {:3} params  {:.2e}  {:.2e}  {:.2e}  {}",
                    m.case,
                    m.env,
                    m.params,
                    m.traced_vs_formula,
                    m.traced_vs_fd,
                    m.formula_vs_fd,
                    if m.passed() { "ok" } else { "FAIL" }
                );
            }
            println!("first-order gradients (tol {:e})", gradcheck::FIRST_ORDER_TOL);
            for g in &report.first_order {
                println!(
                    "  {:<36} {:3} params  {:.2e}  {}",
                    g.name,
                    g.params,
                    g.max_rel_err,
                    if g.passed() { "ok" } else { "FAIL" }
                );
            }
            if report.mutation_survivors.is_empty() {
                println!("sign-flip mutation: caught by every check");
            } else {
                println!("sign-flip mutation survived: {}", report.mutation_survivors.join(", "));
            }
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
                let text = serde_json::to_string_pretty(&report).expect("reports serialize");
                let path = out.join("gradcheck.json");
                std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
            if !report.passed() {
                return Err(CliError::Numerical("gradient check failed".into()));
            }
            println!("gradcheck passed");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
