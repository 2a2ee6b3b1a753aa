use std::fs;
use std::path::Path;
use std::process::Command;

use ilmar_cli::analyze::{analyze, evaluate, CORRELATION_FILE, DIAGNOSTIC_SUMMARY_FILE, EVAL_FILE};
use ilmar_cli::config::CONFIG_FILE;
use ilmar_cli::run::*;
use ilmar_cli::{CliError, RunConfig};
use ilmar_core::envs::{EnvSpec, LinPointMassSpec};
use ilmar_core::models::RankerSizes;
use ilmar_core::train::Mode;

fn tiny(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        task: "tiny".into(),
        out: out.to_path_buf(),
        seeds: vec![0],
        checkpoint_interval: 40,
        ..Default::default()
    };
    let t = &mut cfg.train;
    t.iterations = 120;
    t.eval_interval = 40;
    t.diag_interval = 10;
    t.policy_lr = 0.05;
    t.n_batch = 16;
    t.n_expert_batch = 16;
    t.policy_hidden = vec![16];
    t.classifier_hidden = vec![8];
    t.ranker = RankerSizes {
        state_hidden: vec![8],
        action_hidden: vec![],
        head_hidden: vec![8],
        ..Default::default()
    };
    cfg
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| {
            (
                p.strip_prefix(dir).unwrap().display().to_string(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

/// Drops the lines naming output locations so two trees can be compared
/// byte for byte.
fn without_locations(files: Vec<(String, Vec<u8>)>) -> Vec<(String, Vec<u8>)> {
    files
        .into_iter()
        .map(|(name, bytes)| {
            if name.ends_with(CONFIG_FILE) {
                let text = String::from_utf8(bytes).unwrap();
                let kept: Vec<&str> = text
                    .lines()
                    .filter(|l| !l.starts_with("out = ") && !l.starts_with("data = "))
                    .collect();
                (name, kept.join("\n").into_bytes())
            } else {
                (name, bytes)
            }
        })
        .collect()
}

#[test]
fn config_roundtrips_through_toml() {
    let mut cfg = tiny(Path::new("somewhere"));
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    cfg.env = EnvSpec::PointMass(LinPointMassSpec::default());
    cfg.data = Some("d/demos.jsonl".into());
    cfg.train.policy_lr = 0.1 + 0.2;
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn partial_configs_fill_in_defaults_and_reject_typos() {
    let cfg = RunConfig::from_toml("task = \"x\"\n[train]\niterations = 7\n").unwrap();
    assert_eq!((cfg.task.as_str(), cfg.train.iterations), ("x", 7));
    assert_eq!(cfg.train.alpha, RunConfig::default().train.alpha);
    for bad in [
        "[train]\niteratons = 7\n",
        "[env]\nkind = \"maze\"\n",
        "seeds = \"0\"\n",
    ] {
        assert!(matches!(RunConfig::from_toml(bad), Err(CliError::Usage(_))), "{bad}");
    }
}

#[test]
fn invalid_ratio_is_a_usage_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.mixture.ratio = "T9".into();
    let err = gen_data(&cfg, false).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("mixture.ratio"), "{err}");
    for (ratio, n) in [("T1", 10), ("t2", 40), ("T3", 160), ("0.5", 20)] {
        cfg.mixture.ratio = ratio.into();
        assert_eq!(cfg.mixture.spec().unwrap().n_suboptimal(), n);
    }
}

#[test]
fn gen_data_is_byte_identical_and_refuses_to_overwrite() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let path = gen_data(&tiny(a.path()), false).unwrap();
    gen_data(&tiny(b.path()), false).unwrap();
    assert_eq!(
        without_locations(files_in(a.path())),
        without_locations(files_in(b.path()))
    );
    assert!(path.parent().unwrap().join(PROVENANCE_FILE).exists());

    let err = gen_data(&tiny(a.path()), false).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)), "{err}");
    gen_data(&tiny(a.path()), true).unwrap();

    let echoed = RunConfig::load(&path.parent().unwrap().join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed.data.as_deref(), Some(path.as_path()));
    assert_eq!(load_dataset(&echoed).unwrap(), build_dataset(&tiny(a.path())).unwrap());
}

#[test]
fn every_mode_trains_into_its_own_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.seeds = vec![3, 4];
    for mode in Mode::ALL {
        cfg.train.mode = mode;
        let runs = train(&cfg, false).unwrap();
        assert_eq!(runs.len(), 2);
        for (s, seed) in runs.iter().zip([3, 4]) {
            let run = dir.path().join(mode.as_str()).join("tiny").join(seed.to_string());
            assert_eq!(cfg.run_dir(seed), run);
            for f in [
                CONFIG_FILE,
                REPORT_FILE,
                DIAGNOSTICS_FILE,
                CHECKPOINT_FILE,
                SUMMARY_FILE,
                POLICY_FILE,
            ] {
                assert!(run.join(f).exists(), "{mode} {f}");
            }
            assert_eq!(run.join(CRITIC_FILE).exists(), mode != Mode::Bc);
            assert_eq!((s.mode, s.seed, s.iterations), (mode, seed, 120));
            assert!(s.final_score.is_some());
        }
        assert_ne!(runs[0].evals, runs[1].evals, "{mode}: seeds share a run");
        assert!(dir.path().join(mode.as_str()).join("tiny/curves/curves.csv").exists());
    }
    let err = train(&cfg, false).unwrap_err();
    assert!(matches!(err, CliError::Usage(_)));
    train(&cfg, true).unwrap();
}

#[test]
fn interrupted_runs_resume_to_identical_outputs() {
    for mode in [Mode::Ilmar, Mode::ExpertDistWbcMeta] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let mut cfg_a = tiny(a.path());
        cfg_a.train.mode = mode;
        let ds = build_dataset(&cfg_a).unwrap();
        let whole = train_seed(&cfg_a, &ds, 0, false, None).unwrap();

        let cfg_b = RunConfig {
            out: b.path().to_path_buf(),
            ..cfg_a.clone()
        };
        // stop between checkpoints so the tail of the report is rewritten
        assert_eq!(
            train_seed(&cfg_b, &ds, 0, false, Some(57)).unwrap(),
            RunStatus::Paused(57)
        );
        assert!(!cfg_b.run_dir(0).join(SUMMARY_FILE).exists());
        let resumed = train_seed(&cfg_b, &ds, 0, false, None).unwrap();
        assert_eq!(whole, resumed);
        assert_eq!(
            without_locations(files_in(a.path())),
            without_locations(files_in(b.path())),
            "{mode}"
        );
    }
}

#[test]
fn resuming_under_a_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    let ds = build_dataset(&cfg).unwrap();
    train_seed(&cfg, &ds, 0, false, Some(50)).unwrap();
    cfg.train.ranker_lr *= 2.0;
    assert!(matches!(train_seed(&cfg, &ds, 0, false, None), Err(CliError::Usage(_))));
    assert!(matches!(
        train_seed(&cfg, &ds, 0, true, None),
        Ok(RunStatus::Complete(_))
    ));
}

#[test]
fn non_finite_training_aborts_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut ds = build_dataset(&cfg).unwrap();
    for t in &mut ds.supplementary {
        for tr in &mut t.transitions {
            tr.state[0] = f64::NAN;
        }
    }
    let err = train_seed(&cfg, &ds, 0, false, None).unwrap_err();
    assert!(matches!(err, CliError::Numerical(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    let run = cfg.run_dir(0);
    assert!(run.join(CHECKPOINT_FILE).exists());
    assert!(!run.join(SUMMARY_FILE).exists());
}

#[test]
fn sweep_grid_rules() {
    let paper_alpha = [0.0, 0.1, 0.3, 0.7, 1.0];
    let paper_beta = [0.0, 0.01, 0.05, 0.5, 1.0];
    let cells = sweep_cells(&paper_alpha, &paper_beta).unwrap();
    assert_eq!(cells.len(), 24);
    assert!(!cells.contains(&(0.0, 0.0)));
    assert_eq!(sweep_cells(&[0.5, 1.0], &[0.5]).unwrap().len(), 2);
    for (a, b) in [
        (&[][..], &[1.0][..]),
        (&[1.0][..], &[][..]),
        (&[0.0][..], &[0.0][..]),
        (&[-1.0][..], &[1.0][..]),
    ] {
        assert!(matches!(sweep_cells(a, b), Err(CliError::Usage(_))), "{a:?} x {b:?}");
    }
}

#[test]
fn sweep_writes_one_row_per_cell_and_a_single_cell_equals_train() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.iterations = 40;
    cfg.sweep.alpha = vec![0.0, 1.0];
    cfg.sweep.beta = vec![0.0, 0.5];
    let cells = sweep(&cfg, false).unwrap();
    let heatmap = sweep_dir(&cfg).join(HEATMAP_FILE);
    assert_eq!(read_heatmap(&heatmap).unwrap(), cells);
    assert_eq!(cells.len(), 3);
    assert!(matches!(sweep(&cfg, false), Err(CliError::Usage(_))));

    cfg.sweep.alpha = vec![0.7];
    cfg.sweep.beta = vec![0.05];
    cfg.seeds = vec![2];
    cfg.out = dir.path().join("single");
    let cell = sweep(&cfg, false).unwrap();
    cfg.train.alpha = 0.7;
    cfg.train.beta = 0.05;
    cfg.out = dir.path().join("train");
    let run = train(&cfg, false).unwrap();
    assert_eq!(cell.len(), 1);
    assert_eq!(cell[0].mean_score, run[0].final_score.unwrap());
    assert_eq!(cell[0].std_score, 0.0);

    cfg.train.mode = Mode::Bc;
    assert!(matches!(sweep(&cfg, false), Err(CliError::Usage(_))));
}

#[test]
fn rerunning_from_an_echoed_config_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    train(&tiny(&dir.path().join("first")), false).unwrap();
    let run = tiny(&dir.path().join("first")).run_dir(0);
    let mut echoed = RunConfig::load(&run.join(CONFIG_FILE)).unwrap();
    echoed.out = dir.path().join("second");
    train(&echoed, false).unwrap();
    assert_eq!(
        without_locations(files_in(&run)),
        without_locations(files_in(&echoed.run_dir(0)))
    );
}

#[test]
fn evaluate_and_analyze_write_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    train(&cfg, false).unwrap();
    let run = cfg.run_dir(0);

    let e = evaluate(&run).unwrap();
    assert_eq!(e.rollouts.n_episodes, cfg.eval.episodes);
    assert!(e.exact_score.is_some());
    let first = fs::read(run.join(EVAL_FILE)).unwrap();
    evaluate(&run).unwrap();
    assert_eq!(fs::read(run.join(EVAL_FILE)).unwrap(), first);

    let a = analyze(&run).unwrap();
    let variants: Vec<&str> = a.correlations.iter().map(|c| c.variant.as_str()).collect();
    assert_eq!(variants, ["advantage", "trajectory-return"]);
    assert!(a.correlations.iter().all(|c| (-1.0..=1.0).contains(&c.rho)));
    assert_eq!(a.diagnostics.steps, 12);
    assert!(run.join(CORRELATION_FILE).exists() && run.join(DIAGNOSTIC_SUMMARY_FILE).exists());

    assert!(matches!(evaluate(dir.path()), Err(CliError::Usage(_))));
}

fn ilmar() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ilmar"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ilmar().args(["gradcheck"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.trim_start().starts_with("trial")).count(), 10);
    assert!(text.contains("sign-flip mutation: caught"));

    assert_eq!(ilmar().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(
        ilmar().args(["train", "--seed", "x"]).output().unwrap().status.code(),
        Some(1)
    );
    let missing = ilmar()
        .args(["train", "--config"])
        .arg(dir.path().join("nope.toml"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let cfg_path = dir.path().join("c.toml");
    fs::write(&cfg_path, tiny(dir.path()).to_toml()).unwrap();
    let gen = |extra: &[&str]| {
        ilmar()
            .args(["gen-data", "--config"])
            .arg(&cfg_path)
            .args(extra)
            .output()
            .unwrap()
            .status
            .code()
    };
    assert_eq!(gen(&[]), Some(0));
    assert_eq!(gen(&[]), Some(1));
    assert_eq!(gen(&["--force", "--seed", "5"]), Some(0));
    assert_eq!(gen(&["--force", "--seed", "5,6"]), Some(1));

    let train = ilmar()
        .args(["train", "--mode", "bc", "--seed", "1,2", "--config"])
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(train.status.code(), Some(0));
    assert!(dir.path().join("bc/tiny/1").is_dir() && dir.path().join("bc/tiny/2").is_dir());
}
