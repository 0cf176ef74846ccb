mod common;

use common::occupancy_power_series;
use qstitch_core::envs::{enumerate_mdp, LayoutId, MazeSpec, TabularPolicy, RIGHT, UP};
use qstitch_core::oracle::{analytic_occupancy, build_matrices, policy_eval_q_all, reachability, theorem1_gap};

const LAYOUTS: [LayoutId; 5] = [
    LayoutId::ExampleMdp,
    LayoutId::Gridworld5,
    LayoutId::Umaze,
    LayoutId::Medium,
    LayoutId::Large,
];

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn occupancy_matches_the_power_series() {
    for layout in LAYOUTS {
        let spec = MazeSpec::builtin(layout).unwrap();
        let mdp = enumerate_mdp(&spec);
        for k in 0..3 {
            let pi = TabularPolicy::dirichlet(mdp.n_states, mdp.n_actions, 100 + k);
            let m = build_matrices(&mdp, &pi).unwrap();
            for gamma in [0.9, 0.95] {
                let occ = analytic_occupancy(&m, gamma).unwrap();
                let series = occupancy_power_series(&m.t0, &m.t, m.n_states, m.n_actions, gamma, 200);
                // Entries differ by at most the truncated tail mass γ^201.
                let gap = max_abs_diff(&occ.p, &series);
                assert!(gap <= gamma.powi(201) + 1e-12, "{layout} γ={gamma}: {gap:e}");
                let long = occupancy_power_series(&m.t0, &m.t, m.n_states, m.n_actions, gamma, 400);
                let gap = max_abs_diff(&occ.p, &long);
                assert!(gap < 1e-6, "{layout} γ={gamma}: {gap:e}");
            }
            let occ = analytic_occupancy(&m, 0.9).unwrap();
            let series = occupancy_power_series(&m.t0, &m.t, m.n_states, m.n_actions, 0.9, 200);
            assert!(max_abs_diff(&occ.p, &series) < 1e-6);
        }
    }
}

#[test]
fn rows_are_distributions_and_q_is_a_probability() {
    for layout in LAYOUTS {
        let spec = MazeSpec::builtin(layout).unwrap();
        let mdp = enumerate_mdp(&spec);
        let pi = TabularPolicy::dirichlet(mdp.n_states, mdp.n_actions, 7);
        let occ = analytic_occupancy(&build_matrices(&mdp, &pi).unwrap(), 0.95).unwrap();
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                let row = occ.row(s, a);
                assert!(row.iter().all(|p| *p >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
        let q = policy_eval_q_all(&mdp, &pi, 0.95).unwrap();
        assert!(q.q.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(theorem1_gap(&q, &occ).unwrap() < 1e-8);
    }
}

#[test]
fn example_reachability_is_one_half() {
    let spec = MazeSpec::builtin(LayoutId::ExampleMdp).unwrap();
    let mdp = enumerate_mdp(&spec);
    let idx = |c: char| spec.state_index(spec.label(c).unwrap()).unwrap();
    let r = reachability(&mdp, &TabularPolicy::uniform(mdp.n_states, 2), idx('G')).unwrap();
    assert_eq!(r[idx('0') * 2 + UP], 0.5);
    assert_eq!(r[idx('0') * 2 + RIGHT], 0.0);
}
