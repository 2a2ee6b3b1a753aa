//! Acceptance gate: one PASS/FAIL line per criterion and a closing summary.
//! The verdicts are the output; the exit status only reflects them under
//! `ILMAR_ACCEPTANCE_STRICT=1`, so a failing criterion does not stop cargo
//! from running the remaining test targets. Criteria 4-7 train at full scale and dominate the
//! runtime; `ILMAR_ACCEPTANCE_ITERATIONS` shrinks them for a quick smoke run
//! of the harness itself, and such runs are labelled as reduced.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ilmar_cli::analyze::{analyze, evaluate};
use ilmar_cli::config::CONFIG_FILE;
use ilmar_cli::run::{self, RunSummary};
use ilmar_cli::RunConfig;
use ilmar_core::envs::tabular::{policy_evaluation, BELLMAN_TOL};
use ilmar_core::envs::*;
use ilmar_core::gradcheck::{self, MetaCase};
use ilmar_core::rng;
use ilmar_core::train::{Mode, QuadraticTestbed};
use rand::Rng as _;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn within(elapsed: Duration, limit_s: u64) -> (bool, String) {
    (
        elapsed.as_secs_f64() < limit_s as f64,
        format!("{:.1} s of {limit_s} s", elapsed.as_secs_f64()),
    )
}

fn meta_gradient() -> Verdict {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    let mut all = true;
    for i in 0..gradcheck::META_CASES {
        let case = MetaCase::tiny(i, 0);
        let m = gradcheck::check_meta(i, &case).expect("meta case");
        all &= m.passed() && case.batch.states.cols() == 2;
        worst.0 = worst.0.max(m.traced_vs_formula);
        worst.1 = worst.1.max(m.traced_vs_fd).max(m.formula_vs_fd);
    }
    let (fast, time) = within(start.elapsed(), 10);
    verdict(
        all && fast,
        format!(
            "10 tiny nets, traced vs formula {:.1e} (<= 1e-6), worst vs finite differences {:.1e} (<= 1e-4), {time}",
            worst.0, worst.1
        ),
    )
}

fn first_order() -> Verdict {
    let start = Instant::now();
    let checks = gradcheck::first_order_suite(0, false).expect("first-order suite");
    let worst = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let small = checks.iter().all(|c| c.params <= 200);
    let (fast, time) = within(start.elapsed(), 30);
    verdict(
        checks.iter().all(|c| c.passed()) && small && fast,
        format!(
            "{} loss gradients, worst relative error {worst:.1e} (<= 1e-6), {time}",
            checks.len()
        ),
    )
}

fn tabular(policy: &ScriptedPolicy, env: &EnvSpec) -> TabularPolicy {
    match policy {
        ScriptedPolicy::Tabular(t) => t.clone(),
        ScriptedPolicy::Random => TabularPolicy::uniform(env.obs_dim(), N_MOVES),
        other => panic!("not tabular: {other:?}"),
    }
}

fn oracles() -> Verdict {
    let start = Instant::now();
    let (mut residual, mut mean_adv) = (0.0f64, 0.0f64);
    for slip in [0.0, 0.2] {
        let env = EnvSpec::Gridworld(GridWorldSpec {
            slip_prob: slip,
            ..Default::default()
        });
        let mdp = env.grid().unwrap().to_tabular().unwrap();
        let mut zoo = vec![
            tabular(&ScriptedPolicy::Random, &env),
            tabular(&expert_policy(&env).unwrap(), &env),
        ];
        zoo.extend(
            make_tier_policies(&env, &[0.8, 0.4])
                .unwrap()
                .iter()
                .map(|t| tabular(&t.policy, &env)),
        );
        for pi in &zoo {
            let t = policy_evaluation(&mdp, pi).unwrap();
            for s in 0..mdp.n_states() {
                let r = if mdp.is_terminal(s) {
                    t.v[s].abs()
                } else {
                    let backup: f64 = (0..mdp.n_actions())
                        .map(|a| {
                            let next: f64 = mdp.transitions(s, a).iter().map(|&(s2, p)| p * t.v[s2]).sum();
                            pi.prob(s, a) * (mdp.reward(s, a) + mdp.gamma() * next)
                        })
                        .sum();
                    (backup - t.v[s]).abs()
                };
                residual = residual.max(r);
                let avg: f64 = (0..N_MOVES).map(|a| pi.prob(s, a) * t.advantage(s, a)).sum();
                mean_adv = mean_adv.max(avg.abs());
            }
        }
    }

    let env = EnvSpec::Gridworld(GridWorldSpec {
        slip_prob: 0.1,
        ..Default::default()
    });
    let g = env.grid().unwrap().clone();
    let tier = make_tier_policies(&env, &[0.6]).unwrap().remove(0).policy;
    let exact = AdvantageOracle::exact(&env, &tabular(&tier, &env)).unwrap();
    let mc = AdvantageOracle::monte_carlo(&env, &tier, DEFAULT_MC_ROLLOUTS, 99);
    let mut r = rng::derive(5, &[]);
    let total = 500;
    let mut agree = 0;
    for _ in 0..total {
        let cell = loop {
            let c = r.random_range(0..g.n_cells());
            if c != g.goal_cell() {
                break c;
            }
        };
        let state = EnvState::Grid {
            cell,
            t: 0,
            done: false,
        };
        let action = Action::Discrete(r.random_range(0..N_MOVES));
        let e = exact.advantage(&state, &action).unwrap().value;
        let m = mc.advantage(&state, &action).unwrap();
        if (e - m.value).abs() <= 3.0 * m.std_err + 1e-9 {
            agree += 1;
        }
    }
    let (fast, time) = within(start.elapsed(), 60);
    verdict(
        residual <= BELLMAN_TOL && mean_adv <= 1e-9 && agree * 100 >= total * 99 && fast,
        format!(
            "Bellman residual {residual:.1e} (<= 1e-10), |E_pi A| {mean_adv:.1e} (<= 1e-9), Monte Carlo within 3 SE on {agree}/{total} (>= 99%), {time}"
        ),
    )
}

fn acceptance_config(out: &Path) -> (RunConfig, Option<usize>) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/grid-t3.toml");
    let mut cfg = RunConfig::load(&path).expect("acceptance config");
    cfg.out = out.to_path_buf();
    let reduced = std::env::var("ILMAR_ACCEPTANCE_ITERATIONS")
        .ok()
        .map(|v| v.parse::<usize>().expect("ILMAR_ACCEPTANCE_ITERATIONS is a number"));
    if let Some(n) = reduced {
        cfg.train.iterations = n;
        cfg.train.eval_interval = cfg.train.eval_interval.min(n);
    }
    (cfg, reduced)
}

struct Runs {
    by_mode: Vec<(Mode, Vec<RunSummary>)>,
    elapsed: Duration,
    cfg: RunConfig,
}

impl Runs {
    fn train(cfg: &RunConfig, modes: &[Mode]) -> Runs {
        let start = Instant::now();
        let by_mode = modes
            .iter()
            .map(|&mode| {
                let mut c = cfg.clone();
                c.train.mode = mode;
                (mode, run::train(&c, true).expect("training run"))
            })
            .collect();
        Runs {
            by_mode,
            elapsed: start.elapsed(),
            cfg: cfg.clone(),
        }
    }

    fn scores(&self, mode: Mode) -> Vec<f64> {
        let runs = &self.by_mode.iter().find(|(m, _)| *m == mode).expect("mode trained").1;
        runs.iter().map(|s| s.final_score.expect("evaluated")).collect()
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

fn fmt_scores(x: &[f64]) -> String {
    x.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("/")
}

fn table_ordering(runs: &Runs) -> Verdict {
    let (ilmar, bc, vanilla) = (
        runs.scores(Mode::Ilmar),
        runs.scores(Mode::Bc),
        runs.scores(Mode::VanillaOnly),
    );
    let (fast, time) = within(runs.elapsed, 30 * 60);
    verdict(
        mean(&ilmar) >= mean(&bc) + 10.0 && mean(&ilmar) >= mean(&vanilla) && fast,
        format!(
            "ILMAR {:.2} [{}] vs BC {:.2} [{}] + 10 and vanilla-only {:.2} [{}], 4 modes x {} seeds in {time}",
            mean(&ilmar),
            fmt_scores(&ilmar),
            mean(&bc),
            fmt_scores(&bc),
            mean(&vanilla),
            fmt_scores(&vanilla),
            ilmar.len()
        ),
    )
}

fn ablation_ordering(runs: &Runs) -> Verdict {
    let (ilmar, bc, vanilla, meta) = (
        runs.scores(Mode::Ilmar),
        runs.scores(Mode::Bc),
        runs.scores(Mode::VanillaOnly),
        runs.scores(Mode::MetaOnly),
    );
    verdict(
        mean(&vanilla) >= mean(&bc) && std(&meta) >= 2.0 * std(&ilmar),
        format!(
            "vanilla-only {:.2} >= BC {:.2}; std meta-only {:.3} [{}] vs 2 x std ILMAR {:.3}",
            mean(&vanilla),
            mean(&bc),
            std(&meta),
            fmt_scores(&meta),
            2.0 * std(&ilmar)
        ),
    )
}

fn weight_quality(runs: &Runs) -> Verdict {
    let start = Instant::now();
    let mut mode_cfg = runs.cfg.clone();
    mode_cfg.train.mode = Mode::Ilmar;
    let (mut adv, mut ret) = (Vec::new(), Vec::new());
    for dir in run::run_dirs(&mode_cfg) {
        let a = analyze(&dir).expect("analysis");
        let rho = |variant: &str| a.correlations.iter().find(|c| c.variant == variant).map(|c| c.rho);
        adv.push(rho("advantage").unwrap_or(f64::NAN));
        ret.push(rho("trajectory-return").unwrap_or(f64::NAN));
    }
    let (fast, time) = within(start.elapsed(), 5 * 60);
    verdict(
        mean(&adv) >= 0.6 && fast,
        format!(
            "Spearman vs oracle advantage {:.3} [{}] (>= 0.6); vs trajectory return {:.3} [{}]; {time}",
            mean(&adv),
            fmt_scores(&adv),
            mean(&ret),
            fmt_scores(&ret)
        ),
    )
}

fn portability(cfg: &RunConfig) -> Verdict {
    let runs = Runs::train(cfg, &[Mode::ExpertDistWbc, Mode::ExpertDistWbcMeta]);
    let (wbc, meta) = (runs.scores(Mode::ExpertDistWbc), runs.scores(Mode::ExpertDistWbcMeta));
    let (fast, time) = within(runs.elapsed, 20 * 60);
    verdict(
        mean(&meta) >= mean(&wbc) && fast,
        format!(
            "expert-dist-wbc+meta {:.2} [{}] vs expert-dist-wbc {:.2} [{}], {time}",
            mean(&meta),
            fmt_scores(&meta),
            mean(&wbc),
            fmt_scores(&wbc)
        ),
    )
}

fn quadratic() -> Verdict {
    let start = Instant::now();
    let bed = QuadraticTestbed {
        curvature: vec![0.5, 2.0, 4.0],
        start: vec![1.0, -2.0, 0.5],
    };
    let l = bed.lipschitz();
    let k = bed.run(1e-6 / l, 1).unwrap()[0].implied_k.expect("defined");
    let mut worst = f64::NEG_INFINITY;
    for f in [0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 1.0] {
        for r in bed.run(f * 2.0 * k / l, 50).unwrap() {
            worst = worst.max(r.change());
        }
    }
    let violated = bed.run(4.0 / l, 5).unwrap().iter().any(|r| r.change() > 0.0);
    let (fast, time) = within(start.elapsed(), 5);
    verdict(
        worst <= 0.0 && violated && fast,
        format!(
            "implied K {k:.4}; largest change for mu <= 2K/L {worst:.2e} (<= 0); violation at 4/L: {violated}; {time}"
        ),
    )
}

fn files_in(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let bytes = fs::read(&p).unwrap();
                // output locations legitimately differ between the two trees
                let bytes = if p.file_name().is_some_and(|n| n == CONFIG_FILE) {
                    String::from_utf8(bytes)
                        .unwrap()
                        .lines()
                        .filter(|l| !l.starts_with("out = ") && !l.starts_with("data = "))
                        .collect::<Vec<_>>()
                        .join("\n")
                        .into_bytes()
                } else {
                    bytes
                };
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

fn small(out: &Path, iterations: usize) -> RunConfig {
    let (mut cfg, _) = acceptance_config(out);
    cfg.seeds = vec![0];
    cfg.train.iterations = iterations;
    cfg.train.eval_interval = 250;
    cfg.checkpoint_interval = 300;
    cfg
}

fn reward_blindness(root: &Path) -> Verdict {
    let start = Instant::now();
    let mut identical = 0;
    for mode in Mode::ALL {
        let dirs = [root.join("clean"), root.join("poisoned")];
        let mut trees = Vec::new();
        for (i, dir) in dirs.iter().enumerate() {
            let mut cfg = small(dir, 1000);
            cfg.train.mode = mode;
            let mut ds = run::build_dataset(&cfg).unwrap();
            if i == 1 {
                for t in ds.expert.iter_mut().chain(ds.supplementary.iter_mut()) {
                    t.transitions.iter_mut().for_each(|tr| tr.reward = f64::NAN);
                }
            }
            run::train_seed(&cfg, &ds, 0, true, None).unwrap();
            trees.push(files_in(&cfg.run_dir(0)));
        }
        identical += usize::from(trees[0] == trees[1]);
    }
    let (fast, time) = within(start.elapsed(), 120);
    verdict(
        identical == Mode::ALL.len() && fast,
        format!(
            "NaN rewards leave every output file identical in {identical}/{} modes, {time}",
            Mode::ALL.len()
        ),
    )
}

/// Runs a command, reruns it from the config it echoed, and compares.
fn determinism(root: &Path) -> Verdict {
    let mut agree = Vec::new();
    let rerun_out = |name: &str| root.join("rerun").join(name);

    let first = small(&root.join("first"), 600);
    let data = run::gen_data(&first, false).unwrap();
    let mut echoed = RunConfig::load(&data.with_file_name(CONFIG_FILE)).unwrap();
    echoed.out = rerun_out("gen");
    run::gen_data(&echoed, false).unwrap();
    agree.push((
        "gen-data",
        files_in(&run::data_dir(&first)) == files_in(&run::data_dir(&echoed)),
    ));

    for (name, mode, env) in [
        ("train", Mode::Ilmar, None),
        ("train wbc+meta", Mode::ExpertDistWbcMeta, None),
        (
            "train point-mass",
            Mode::Ilmar,
            Some(EnvSpec::PointMass(LinPointMassSpec::default())),
        ),
    ] {
        let mut cfg = first.clone();
        cfg.train.mode = mode;
        if let Some(env) = env {
            cfg.env = env;
            cfg.task = "point-mass".into();
            cfg.mixture.tier_fractions = vec![0.5];
            cfg.mixture.n_expert_in_ds = 4;
        }
        run::train(&cfg, false).unwrap();
        let dir = cfg.run_dir(0);
        evaluate(&dir).unwrap();
        analyze(&dir).unwrap();
        let mut echoed = RunConfig::load(&dir.join(CONFIG_FILE)).unwrap();
        echoed.out = rerun_out(name);
        run::train(&echoed, false).unwrap();
        evaluate(&echoed.run_dir(0)).unwrap();
        analyze(&echoed.run_dir(0)).unwrap();
        agree.push((name, files_in(&dir) == files_in(&echoed.run_dir(0))));
    }

    let mut sweep = small(&root.join("sweep"), 200);
    sweep.sweep.alpha = vec![0.0, 1.0];
    sweep.sweep.beta = vec![0.0, 0.5];
    run::sweep(&sweep, false).unwrap();
    let mut echoed = RunConfig::load(&run::sweep_dir(&sweep).join(CONFIG_FILE)).unwrap();
    echoed.out = rerun_out("sweep");
    run::sweep(&echoed, false).unwrap();
    agree.push((
        "sweep",
        files_in(&run::sweep_dir(&sweep)) == files_in(&run::sweep_dir(&echoed)),
    ));

    let failed: Vec<&str> = agree.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        failed.is_empty(),
        if failed.is_empty() {
            format!(
                "{} commands rerun from their echoed configs reproduce every file",
                agree.len()
            )
        } else {
            format!("outputs differ after rerunning: {}", failed.join(", "))
        },
    )
}

fn report(id: usize, title: &str, v: &Verdict, reduced: bool) -> bool {
    let tag = if v.pass { "PASS" } else { "FAIL" };
    let scale = if reduced { " [reduced scale]" } else { "" };
    println!("{tag} {id:>2} {title}: {}{scale}", v.detail);
    std::io::stdout().flush().ok();
    v.pass
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("scratch directory");
    let (cfg, reduced) = acceptance_config(&root.path().join("runs"));
    let small_scale = reduced.is_some();
    let mut verdicts = Vec::new();
    verdicts.push(report(1, "meta-gradient agreement", &meta_gradient(), false));
    verdicts.push(report(2, "first-order gradients", &first_order(), false));
    verdicts.push(report(3, "oracle suite", &oracles(), false));
    let runs = Runs::train(&cfg, &[Mode::Ilmar, Mode::Bc, Mode::VanillaOnly, Mode::MetaOnly]);
    verdicts.push(report(
        4,
        "ordering against BC and vanilla-only",
        &table_ordering(&runs),
        small_scale,
    ));
    verdicts.push(report(5, "ablation ordering", &ablation_ordering(&runs), small_scale));
    verdicts.push(report(6, "weight quality", &weight_quality(&runs), small_scale));
    verdicts.push(report(7, "meta-goal portability", &portability(&cfg), small_scale));
    verdicts.push(report(8, "quadratic descent testbed", &quadratic(), false));
    verdicts.push(report(
        9,
        "reward blindness",
        &reward_blindness(&root.path().join("blind")),
        false,
    ));
    verdicts.push(report(
        10,
        "rerun determinism",
        &determinism(&root.path().join("determinism")),
        false,
    ));
    println!(
        "{passed}/10 acceptance criteria passed",
        passed = verdicts.iter().filter(|&&p| p).count()
    );
    let strict = std::env::var("ILMAR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict && verdicts.iter().any(|p| !p) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
