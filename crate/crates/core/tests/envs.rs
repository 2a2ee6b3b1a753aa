use std::time::Instant;

use ilmar_core::envs::tabular::{finite_horizon_return, policy_evaluation, value_iteration, BELLMAN_TOL};
use ilmar_core::envs::*;
use ilmar_core::rng;
use rand::Rng as _;

fn grid(slip: f64) -> EnvSpec {
    EnvSpec::Gridworld(GridWorldSpec {
        slip_prob: slip,
        ..Default::default()
    })
}

fn tabular(policy: &ScriptedPolicy, env: &EnvSpec) -> TabularPolicy {
    match policy {
        ScriptedPolicy::Tabular(t) => t.clone(),
        ScriptedPolicy::Random => TabularPolicy::uniform(env.obs_dim(), N_MOVES),
        other => panic!("not tabular: {other:?}"),
    }
}

fn bellman_residual(mdp: &TabularMdp, pi: &TabularPolicy, v: &[f64]) -> f64 {
    (0..mdp.n_states())
        .map(|s| {
            if mdp.is_terminal(s) {
                return v[s].abs();
            }
            let backup: f64 = (0..mdp.n_actions())
                .map(|a| {
                    let next: f64 = mdp.transitions(s, a).iter().map(|&(s2, p)| p * v[s2]).sum();
                    pi.prob(s, a) * (mdp.reward(s, a) + mdp.gamma() * next)
                })
                .sum();
            (backup - v[s]).abs()
        })
        .fold(0.0, f64::max)
}

fn policy_zoo(env: &EnvSpec) -> Vec<TabularPolicy> {
    let mut out = vec![
        tabular(&ScriptedPolicy::Random, env),
        tabular(&expert_policy(env).unwrap(), env),
    ];
    for t in make_tier_policies(env, &[0.8, 0.4]).unwrap() {
        out.push(tabular(&t.policy, env));
    }
    out
}

#[test]
fn policy_evaluation_meets_bellman_tolerance() {
    for slip in [0.0, 0.2] {
        let env = grid(slip);
        let mdp = env.grid().unwrap().to_tabular().unwrap();
        for pi in policy_zoo(&env) {
            let t = policy_evaluation(&mdp, &pi).unwrap();
            // recomputed independently from the tables, not read off the solver
            let r = bellman_residual(&mdp, &pi, &t.v);
            assert!(r <= BELLMAN_TOL, "slip {slip}: residual {r:e}");
        }
    }
}

#[test]
fn advantages_average_to_zero_under_the_policy() {
    let env = grid(0.1);
    let mdp = env.grid().unwrap().to_tabular().unwrap();
    for pi in policy_zoo(&env) {
        let t = policy_evaluation(&mdp, &pi).unwrap();
        for s in 0..mdp.n_states() {
            let avg: f64 = (0..N_MOVES).map(|a| pi.prob(s, a) * t.advantage(s, a)).sum();
            assert!(avg.abs() <= 1e-9, "state {s}: {avg:e}");
        }
    }
}

/// Shortest-path distances by breadth-first search, an oracle for the
/// optimal values of a deterministic gridworld.
fn bfs_distances(g: &GridWorldSpec) -> Vec<usize> {
    let n = g.n_cells();
    let mut dist = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::new();
    dist[g.goal_cell()] = 0;
    queue.push_back(g.goal_cell());
    while let Some(c) = queue.pop_front() {
        for s in 0..n {
            if dist[s] == usize::MAX && (0..N_MOVES).any(|a| g.target(s, a) == c) {
                dist[s] = dist[c] + 1;
                queue.push_back(s);
            }
        }
    }
    dist
}

#[test]
fn value_iteration_matches_shortest_paths() {
    let g = GridWorldSpec {
        width: 5,
        height: 4,
        goal: (3, 1),
        ..Default::default()
    };
    let t = value_iteration(&g.to_tabular().unwrap()).unwrap();
    for (s, d) in bfs_distances(&g).into_iter().enumerate() {
        let expected: f64 = (0..d).map(|k| -g.gamma.powi(k as i32)).sum();
        assert!((t.v[s] - expected).abs() < 1e-9, "cell {s}: {} vs {expected}", t.v[s]);
        assert_eq!(d, g.manhattan_to_goal(s));
    }
}

/// Expected truncated return by enumerating every action sequence.
fn brute_force_return(g: &GridWorldSpec, pi: &TabularPolicy, cell: usize, steps_left: usize) -> f64 {
    if steps_left == 0 || cell == g.goal_cell() {
        return 0.0;
    }
    (0..N_MOVES)
        .map(|a| {
            g.outcomes(cell, a)
                .into_iter()
                .map(|(next, p)| {
                    let r = g.step_reward + if next == g.goal_cell() { g.goal_reward } else { 0.0 };
                    p * (r + brute_force_return(g, pi, next, steps_left - 1))
                })
                .sum::<f64>()
                * pi.prob(cell, a)
        })
        .sum()
}

#[test]
fn finite_horizon_return_matches_enumeration() {
    let g = GridWorldSpec {
        width: 3,
        height: 3,
        goal: (2, 2),
        goal_reward: 5.0,
        slip_prob: 0.25,
        horizon: 6,
        ..Default::default()
    };
    let env = EnvSpec::Gridworld(g.clone());
    let mdp = g.to_tabular().unwrap();
    for pi in policy_zoo(&env) {
        for h in 1..=g.horizon {
            let exact = finite_horizon_return(&mdp, &pi, g.start_cell(), h).unwrap();
            let brute = brute_force_return(&g, &pi, g.start_cell(), h);
            assert!((exact - brute).abs() < 1e-12, "h {h}: {exact} vs {brute}");
        }
    }
}

#[test]
fn optimal_policy_return_is_minus_manhattan_distance() {
    let env = grid(0.0);
    let g = env.grid().unwrap();
    let refs = reference_returns(&env).unwrap();
    assert_eq!(refs.expert, -(g.manhattan_to_goal(g.start_cell()) as f64));
    let expert = expert_policy(&env).unwrap();
    for seed in 0..20 {
        let steps = rollout(&env, &expert, &mut rng::derive(seed, &[])).unwrap();
        assert_eq!(steps.len(), 12);
        assert!(steps.last().unwrap().done);
    }
    assert!(refs.random < refs.expert);
}

#[test]
fn monte_carlo_advantage_agrees_with_exact_tables() {
    let start = Instant::now();
    let env = grid(0.1);
    let g = env.grid().unwrap().clone();
    let tier = make_tier_policies(&env, &[0.6]).unwrap().remove(0).policy;
    let pi = tabular(&tier, &env);
    let exact = AdvantageOracle::exact(&env, &pi).unwrap();
    let mc = AdvantageOracle::monte_carlo(&env, &tier, DEFAULT_MC_ROLLOUTS, 99);
    let mut r = rng::derive(5, &[]);
    let mut agree = 0;
    let total = 500;
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
        // the floor covers pairs whose paired estimate has no spread
        if (e - m.value).abs() <= 3.0 * m.std_err + 1e-9 {
            agree += 1;
        }
    }
    assert!(
        agree as f64 >= 0.99 * total as f64,
        "{agree}/{total} within 3 standard errors"
    );
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn stepping_a_finished_episode_is_an_error() {
    let env = grid(0.0);
    let mut r = rng::derive(0, &[]);
    let done = EnvState::Grid {
        cell: 3,
        t: 5,
        done: true,
    };
    assert_eq!(
        env.step(&done, &Action::Discrete(0), &mut r),
        Err(EnvError::EpisodeOver)
    );
    let live = env.reset(&mut r);
    assert!(matches!(
        env.step(&live, &Action::Discrete(7), &mut r),
        Err(EnvError::InvalidAction(_))
    ));
    assert!(matches!(
        env.step(&live, &Action::Continuous(vec![0.0]), &mut r),
        Err(EnvError::InvalidAction(_))
    ));
}

#[test]
fn horizon_ends_grid_episodes() {
    let env = EnvSpec::Gridworld(GridWorldSpec {
        horizon: 5,
        ..Default::default()
    });
    let steps = rollout(&env, &ScriptedPolicy::Random, &mut rng::derive(1, &[])).unwrap();
    assert!(steps.len() <= 5);
    assert!(steps.last().unwrap().done);
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        GridWorldSpec {
            width: 0,
            ..Default::default()
        },
        GridWorldSpec {
            goal: (9, 0),
            ..Default::default()
        },
        GridWorldSpec {
            gamma: 1.5,
            ..Default::default()
        },
        GridWorldSpec {
            slip_prob: -0.1,
            ..Default::default()
        },
    ];
    for g in bad {
        assert!(matches!(
            EnvSpec::Gridworld(g).validate(),
            Err(EnvError::InvalidSpec(_))
        ));
    }
    let asym = LinPointMassSpec {
        qc: vec![vec![1.0, 0.5], vec![0.0, 1.0]],
        ..Default::default()
    };
    assert!(EnvSpec::PointMass(asym).validate().is_err());
}

/// Scalar discounted Riccati fixed point by bisection on `P`.
fn scalar_riccati(a: f64, b: f64, q: f64, r: f64, g: f64) -> f64 {
    let f = |p: f64| q + g * a * a * p - (g * a * b * p).powi(2) / (r + g * b * b * p) - p;
    let (mut lo, mut hi) = (q, 1e6);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let p = 0.5 * (lo + hi);
    g * b * p * a / (r + g * b * b * p)
}

#[test]
fn lqr_gain_matches_scalar_closed_form() {
    let spec = LinPointMassSpec {
        n: 1,
        m: 1,
        a: vec![vec![1.05]],
        b: vec![vec![0.2]],
        qc: vec![vec![2.0]],
        rc: vec![vec![0.3]],
        ..Default::default()
    };
    let k = spec.lqr_gain().unwrap()[0][0];
    let expected = scalar_riccati(1.05, 0.2, 2.0, 0.3, spec.gamma);
    assert!((k - expected).abs() < 1e-9 * expected.abs(), "{k} vs {expected}");
    assert!(spec.closed_loop_radius(&[vec![k]]).unwrap() < 1.0);
}

/// Discounted cost of a linear gain from a fixed start, by rollout with no
/// noise. A lower cost than every perturbed gain verifies optimality.
fn discounted_cost(spec: &LinPointMassSpec, gain: &[Vec<f64>], x0: &[f64]) -> f64 {
    let mut x = x0.to_vec();
    let mut total = 0.0;
    let mut d = 1.0;
    for _ in 0..3000 {
        let u: Vec<f64> = gain
            .iter()
            .map(|row| -row.iter().zip(&x).map(|(k, v)| k * v).sum::<f64>())
            .collect();
        let (next, r) = spec.transition(&x, &u);
        total -= d * r;
        d *= spec.gamma;
        x = next;
    }
    total
}

#[test]
fn lqr_gain_beats_perturbed_gains() {
    let spec = LinPointMassSpec::default();
    let k = spec.lqr_gain().unwrap();
    let x0 = [0.7, -1.3];
    let best = discounted_cost(&spec, &k, &x0);
    for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        for delta in [-0.05, 0.05] {
            let mut kp = k.clone();
            kp[i][j] += delta;
            assert!(discounted_cost(&spec, &kp, &x0) > best);
        }
    }
}

#[test]
fn tier_policies_are_calibrated_and_ordered() {
    for env in [grid(0.0), EnvSpec::PointMass(LinPointMassSpec::default())] {
        let fractions = [0.8, 0.6, 0.4, 0.2];
        let tiers = make_tier_policies(&env, &fractions).unwrap();
        let refs = reference_returns(&env).unwrap();
        for (t, f) in tiers.iter().zip(fractions) {
            assert!(
                (t.achieved - 100.0 * f).abs() <= 0.5,
                "{}: {} vs {}",
                env.name(),
                t.achieved,
                100.0 * f
            );
            let ret = expected_return(&env, &t.policy).unwrap();
            assert!((refs.score(ret) - t.achieved).abs() < 1e-9);
        }
        assert!(tiers.windows(2).all(|w| w[0].corruption < w[1].corruption));
    }
}

#[test]
fn tier_fractions_outside_the_unit_interval_are_rejected() {
    for f in [0.0, 1.0, 1.5, -0.2, f64::NAN] {
        assert!(matches!(
            make_tier_policies(&grid(0.0), &[f]),
            Err(EnvError::InvalidSpec(_))
        ));
    }
}

#[test]
fn same_seed_same_rollout() {
    let env = EnvSpec::PointMass(LinPointMassSpec::default());
    let pol = ScriptedPolicy::Random;
    let a = rollout(&env, &pol, &mut rng::derive(3, &[])).unwrap();
    let b = rollout(&env, &pol, &mut rng::derive(3, &[])).unwrap();
    assert_eq!(a, b);
    let c = rollout(&env, &pol, &mut rng::derive(4, &[])).unwrap();
    assert_ne!(a, c);
}

#[test]
fn point_mass_actions_are_clipped() {
    let p = LinPointMassSpec::default();
    let env = EnvSpec::PointMass(p.clone());
    assert_eq!(
        env.encode_action(&Action::Continuous(vec![100.0, -100.0])),
        vec![p.action_bound, -p.action_bound]
    );
}
