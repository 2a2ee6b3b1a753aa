use std::fs;

use ilmar_autodiff::{finite_diff_grad, grad, loss_fn, max_relative_error, ParamVector, Tape, Tensor};
use ilmar_core::envs::{EnvSpec, GridWorldSpec, LinPointMassSpec};
use ilmar_core::models::*;
use ilmar_core::rng;
use rand::Rng as _;

fn grid() -> EnvSpec {
    EnvSpec::Gridworld(GridWorldSpec {
        width: 3,
        height: 3,
        goal: (2, 2),
        ..Default::default()
    })
}

fn point_mass() -> EnvSpec {
    EnvSpec::PointMass(LinPointMassSpec::default())
}

fn uniform(rows: usize, cols: usize, scale: f64, seed: u64) -> Tensor {
    let mut r = rng::derive(seed, &[]);
    let data = (0..rows * cols).map(|_| r.random_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn one_hot_rows(rows: usize, k: usize, seed: u64) -> Tensor {
    let mut r = rng::derive(seed, &[]);
    let mut t = Tensor::zeros(&[rows, k]);
    for i in 0..rows {
        let a = r.random_range(0..k);
        t.data_mut()[i * k + a] = 1.0;
    }
    t
}

fn small_ranker(env: &EnvSpec) -> RankerArch {
    RankerArch::for_env(
        env,
        RankerSizes {
            state_hidden: vec![6],
            action_hidden: vec![4],
            head_hidden: vec![5],
            ..Default::default()
        },
    )
}

// Smooth region of the clamp: finite differences across the clip boundary
// are meaningless, so the checks need outputs well inside it.
fn inside_clip(arch: &RankerArch, p: &ParamVector, s: &Tensor, a1: &Tensor, a2: &Tensor) -> bool {
    let m = RankerModel {
        arch: arch.clone(),
        params: p.clone(),
    };
    let eps = arch.sizes.clip_eps;
    m.forward(s, a1, a2)
        .iter()
        .all(|c| *c > 2.0 * eps && *c < 1.0 - 2.0 * eps)
}

#[test]
fn policy_nll_gradients_match_finite_differences() {
    for env in [grid(), point_mass()] {
        let arch = PolicyArch::for_env(&env, vec![8, 8]);
        let p = arch.init(3);
        assert!(p.total_len() <= 500);
        let s = uniform(7, env.obs_dim(), 1.0, 1);
        let a = if env.is_discrete() {
            one_hot_rows(7, env.action_dim(), 2)
        } else {
            uniform(7, env.action_dim(), 1.0, 2)
        };
        let f = loss_fn(|t, p| {
            arch.log_prob(p, t.constant(s.clone()), t.constant(a.clone()))
                .mean_all()
                .scale(-1.0)
        });
        let err = max_relative_error(&grad(f, &p).unwrap(), &finite_diff_grad(f, &p, 1e-5).unwrap(), 1e-6);
        assert!(err <= 1e-5, "{}: {err:e}", env.name());
    }
}

#[test]
fn ranker_gradients_match_finite_differences() {
    for env in [grid(), point_mass()] {
        let arch = small_ranker(&env);
        let p = arch.init(4);
        assert!(p.total_len() <= 500, "{}", p.total_len());
        let s = uniform(6, env.obs_dim(), 1.0, 5);
        let a1 = uniform(6, env.action_dim(), 1.0, 6);
        let a2 = uniform(6, env.action_dim(), 1.0, 7);
        assert!(inside_clip(&arch, &p, &s, &a1, &a2));
        let f = loss_fn(|t, p| {
            let (c12, c21) =
                arch.forward_both(p, t.constant(s.clone()), t.constant(a1.clone()), t.constant(a2.clone()));
            (c12.ln() + c21.scale(-1.0).affine(1.0, 1.0).ln()).mean_all()
        });
        let err = max_relative_error(&grad(f, &p).unwrap(), &finite_diff_grad(f, &p, 1e-5).unwrap(), 1e-6);
        assert!(err <= 1e-5, "{}: {err:e}", env.name());
    }
}

#[test]
fn classifier_gradients_match_finite_differences() {
    let env = grid();
    let arch = ClassifierArch::for_env(&env, vec![8], DEFAULT_CLIP);
    let p = arch.init(8);
    let s = uniform(6, env.obs_dim(), 1.0, 9);
    let a = one_hot_rows(6, env.action_dim(), 10);
    let f = loss_fn(|t, p| {
        arch.forward(p, t.constant(s.clone()), t.constant(a.clone()))
            .ln()
            .mean_all()
    });
    let err = max_relative_error(&grad(f, &p).unwrap(), &finite_diff_grad(f, &p, 1e-5).unwrap(), 1e-6);
    assert!(err <= 1e-5, "{err:e}");
}

/// Recomputes the interpolation from the same stream and differentiates the
/// ranker output numerically in both action inputs.
fn penalty_by_finite_differences(
    arch: &RankerArch,
    p: &ParamVector,
    s: &Tensor,
    a1: &Tensor,
    a2: &Tensor,
    seed: u64,
) -> f64 {
    let m = RankerModel {
        arch: arch.clone(),
        params: p.clone(),
    };
    let mut r = rng::derive(seed, &[]);
    let (n, k) = (a1.rows(), a1.cols());
    let h = 1e-5;
    let mut total = 0.0;
    for row in 0..n {
        let u: f64 = r.random();
        let s_r = Tensor::row(s.row_slice(row).to_vec());
        let hat: Vec<f64> = (0..k)
            .map(|c| u * a1.get(row, c) + (1.0 - u) * a2.get(row, c))
            .collect();
        let check: Vec<f64> = (0..k)
            .map(|c| u * a2.get(row, c) + (1.0 - u) * a1.get(row, c))
            .collect();
        let c_at = |x: &[f64], y: &[f64]| m.forward(&s_r, &Tensor::row(x.to_vec()), &Tensor::row(y.to_vec()))[0];
        let mut sq = 0.0;
        for c in 0..k {
            for which in 0..2 {
                let (mut xp, mut yp) = (hat.clone(), check.clone());
                let (mut xm, mut ym) = (hat.clone(), check.clone());
                if which == 0 {
                    xp[c] += h;
                    xm[c] -= h;
                } else {
                    yp[c] += h;
                    ym[c] -= h;
                }
                let d = (c_at(&xp, &yp) - c_at(&xm, &ym)) / (2.0 * h);
                sq += d * d;
            }
        }
        total += (sq.sqrt() - 1.0).powi(2);
    }
    total / n as f64
}

#[test]
fn gradient_penalty_matches_finite_differences() {
    for env in [grid(), point_mass()] {
        let arch = small_ranker(&env);
        let p = arch.init(11);
        let s = uniform(5, env.obs_dim(), 1.0, 12);
        let a1 = uniform(5, env.action_dim(), 1.0, 13);
        let a2 = uniform(5, env.action_dim(), 1.0, 14);
        let tape = Tape::new();
        let pv = p.bind_const(&tape);
        let gp = arch
            .gradient_penalty(&tape, &pv, &s, &a1, &a2, &mut rng::derive(99, &[]))
            .unwrap()
            .item();
        let fd = penalty_by_finite_differences(&arch, &p, &s, &a1, &a2, 99);
        assert!(
            (gp - fd).abs() <= 1e-3 * fd.abs().max(1.0),
            "{}: {gp} vs {fd}",
            env.name()
        );
    }
}

#[test]
fn gradient_penalty_is_differentiable_in_the_ranker() {
    let env = point_mass();
    let arch = small_ranker(&env);
    let p = arch.init(15);
    let s = uniform(4, env.obs_dim(), 1.0, 16);
    let a1 = uniform(4, env.action_dim(), 1.0, 17);
    let a2 = uniform(4, env.action_dim(), 1.0, 18);
    let f = loss_fn(|t, p| {
        arch.gradient_penalty(t, p, &s, &a1, &a2, &mut rng::derive(3, &[]))
            .unwrap()
    });
    let err = max_relative_error(&grad(f, &p).unwrap(), &finite_diff_grad(f, &p, 1e-5).unwrap(), 1e-6);
    assert!(err <= 1e-4, "{err:e}");
}

#[test]
fn constant_ranker_has_unit_penalty() {
    let env = grid();
    let arch = RankerArch::for_env(
        &env,
        RankerSizes {
            zero_head: true,
            ..Default::default()
        },
    );
    let p = arch.init(0);
    let s = uniform(8, env.obs_dim(), 1.0, 1);
    let a1 = one_hot_rows(8, env.action_dim(), 2);
    let a2 = one_hot_rows(8, env.action_dim(), 3);
    let m = RankerModel {
        arch: arch.clone(),
        params: p.clone(),
    };
    assert!(m.forward(&s, &a1, &a2).iter().all(|c| *c == 0.5));
    let tape = Tape::new();
    let gp = arch
        .gradient_penalty(&tape, &p.bind_const(&tape), &s, &a1, &a2, &mut rng::derive(0, &[]))
        .unwrap()
        .item();
    assert_eq!(gp, 1.0);
}

#[test]
fn ranker_output_stays_clipped_for_huge_inputs() {
    let env = point_mass();
    let m = RankerModel::new(RankerArch::for_env(&env, RankerSizes::default()), 2);
    let eps = m.arch.sizes.clip_eps;
    for scale in [1.0, 1e3, 1e6] {
        let s = uniform(16, env.obs_dim(), scale, 1);
        let a1 = uniform(16, env.action_dim(), scale, 2);
        let a2 = uniform(16, env.action_dim(), scale, 3);
        for c in m.forward(&s, &a1, &a2) {
            assert!(c.is_finite() && c >= eps && c <= 1.0 - eps, "scale {scale}: {c}");
        }
    }
}

#[test]
fn swapping_the_actions_swaps_the_outputs() {
    let env = grid();
    let arch = RankerArch::for_env(&env, RankerSizes::default());
    let p = arch.init(6);
    let s = uniform(5, env.obs_dim(), 1.0, 1);
    let a1 = one_hot_rows(5, env.action_dim(), 2);
    let a2 = one_hot_rows(5, env.action_dim(), 3);
    let tape = Tape::new();
    let pv = p.bind_const(&tape);
    let (sv, v1, v2) = (tape.constant(s), tape.constant(a1), tape.constant(a2));
    let (c12, c21) = arch.forward_both(&pv, sv, v1, v2);
    assert_eq!(c12.to_tensor(), arch.forward(&pv, sv, v1, v2).to_tensor());
    assert_eq!(c21.to_tensor(), arch.forward(&pv, sv, v2, v1).to_tensor());
}

#[test]
fn weight_is_zero_at_and_below_one_half() {
    assert_eq!(WeightValue::from_c(0.5).w, 0.0);
    assert_eq!(WeightValue::from_c(0.3).w, 0.0);
    assert_eq!(WeightValue::from_c(0.5 + 1e-12).w, 0.5 + 1e-12);
    assert_eq!(WeightValue::from_c(0.9).w, 0.9);
    let mask = weight_mask(&Tensor::row(vec![0.2, 0.5, 0.51, 0.999]));
    assert_eq!(mask.data(), &[0.0, 0.0, 1.0, 1.0]);
}

#[test]
fn categorical_probabilities_sum_to_one() {
    let env = grid();
    let m = PolicyModel::new(PolicyArch::for_env(&env, vec![16]), 1);
    let obs = uniform(9, env.obs_dim(), 3.0, 4);
    let ActionDist::Categorical { probs } = m.distribution(&obs) else {
        panic!("grid policies are categorical");
    };
    for r in 0..probs.rows() {
        assert!((probs.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let pi = m.to_tabular(&env, EvalAction::Greedy).unwrap();
    assert!((0..9).all(|c| pi.row(c).iter().filter(|p| **p == 1.0).count() == 1));
}

#[test]
fn gaussian_log_prob_matches_closed_form() {
    let env = point_mass();
    let mut m = PolicyModel::new(PolicyArch::for_env(&env, vec![4]), 1);
    m.params.get_mut("pi.log_std").unwrap().data_mut()[0] = -0.3;
    let obs = uniform(3, env.obs_dim(), 1.0, 2);
    let act = uniform(3, env.action_dim(), 1.0, 3);
    let ActionDist::Gaussian { mean, std } = m.distribution(&obs) else {
        panic!("point-mass policies are Gaussian");
    };
    let lp = m.log_prob(&obs, &act);
    for r in 0..3 {
        let expected: f64 = (0..env.action_dim())
            .map(|j| {
                let z = (act.get(r, j) - mean.get(r, j)) / std[j];
                -0.5 * z * z - std[j].ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            })
            .sum();
        assert!((lp[r] - expected).abs() < 1e-12);
    }
}

#[test]
fn checkpoints_roundtrip_and_reject_other_shapes() {
    let env = grid();
    let arch = RankerArch::for_env(&env, RankerSizes::default());
    let p = arch.init(21);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ranker.jsonl");
    save_params(&p, &path).unwrap();
    assert_eq!(load_params(&path, Some(&p)).unwrap(), p);
    assert_eq!(load_params(&path, None).unwrap(), p);

    let other = RankerArch::for_env(
        &env,
        RankerSizes {
            head_hidden: vec![8],
            ..Default::default()
        },
    )
    .init(21);
    assert!(matches!(load_params(&path, Some(&other)), Err(ModelError::Mismatch(_))));
    let policy = PolicyArch::for_env(&env, vec![4]).init(0);
    assert!(matches!(
        load_params(&path, Some(&policy)),
        Err(ModelError::Mismatch(_))
    ));

    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen("\"shape\":[", "\"shape\":[7,", 1)).unwrap();
    assert!(matches!(
        load_params(&path, None),
        Err(ModelError::Parse { line: 1, .. })
    ));
}

#[test]
fn same_seed_same_initialization() {
    let env = point_mass();
    let arch = RankerArch::for_env(&env, RankerSizes::default());
    assert_eq!(arch.init(5), arch.init(5));
    assert_ne!(arch.init(5), arch.init(6));
}
