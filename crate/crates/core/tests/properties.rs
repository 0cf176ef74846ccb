use proptest::prelude::*;

use qstitch_core::datagen::{
    collect, default_regions, relabel_dataset, stitching_pairs, CollectConfig, Dataset, RelabelStrategy,
};
use qstitch_core::envs::{cell_of_goal, goal_of_observation, LayoutId, MazeEnv, MazeSpec};
use qstitch_core::eval::{bootstrap_ci, fingerprint, probability_of_improvement, EvalMode};
use qstitch_core::nn::{Graph, Tensor};

fn layout() -> impl Strategy<Value = LayoutId> {
    prop::sample::select(vec![
        LayoutId::ExampleMdp,
        LayoutId::Gridworld5,
        LayoutId::Umaze,
        LayoutId::Medium,
        LayoutId::Large,
    ])
}

fn rollout(env: &MazeEnv, seed: u64, start: usize, goal: usize, actions: &[usize]) -> Vec<Vec<f64>> {
    let free = env.spec.free_cells();
    let (s, g) = (free[start % free.len()], free[goal % free.len()]);
    let (mut st, obs, _) = env.reset(seed, Some(s), Some(g)).unwrap();
    let mut out = vec![obs];
    for &a in actions {
        if st.done {
            break;
        }
        out.push(env.step(&mut st, a % env.num_actions()).unwrap().observation);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn environments_are_deterministic(
        id in layout(),
        seed in any::<u64>(),
        start in 0usize..100,
        goal in 0usize..100,
        actions in prop::collection::vec(0usize..4, 0..40),
    ) {
        let env = MazeEnv::builtin(id).unwrap();
        prop_assert_eq!(rollout(&env, seed, start, goal, &actions), rollout(&env, seed, start, goal, &actions));
    }

    #[test]
    fn noisy_observations_identify_their_cell(
        seed in any::<u64>(),
        start in 0usize..100,
        actions in prop::collection::vec(0usize..4, 0..30),
    ) {
        let env = MazeEnv::builtin(LayoutId::Gridworld5).unwrap();
        let free = env.spec.free_cells();
        let (mut st, obs, _) = env.reset(seed, Some(free[start % free.len()]), None).unwrap();
        prop_assert_eq!(cell_of_goal(&goal_of_observation(&obs)), Some(st.cell));
        for a in actions {
            if st.done {
                break;
            }
            let out = env.step(&mut st, a).unwrap();
            prop_assert_eq!(cell_of_goal(&goal_of_observation(&out.observation)), Some(st.cell));
        }
    }

    #[test]
    fn attention_is_causal(
        data in prop::collection::vec(-2.0f64..2.0, 3 * 16),
        t in 0usize..3,
        bump in prop::collection::vec(-5.0f64..5.0, 3 * 16),
    ) {
        // One sequence of 4 positions, dim 4, 2 heads; positions > t are perturbed.
        let run = |q: &[f64], k: &[f64], v: &[f64]| {
            let mut g = Graph::new();
            let qv = g.input(&Tensor::new(vec![4, 4], q.to_vec()).unwrap());
            let kv = g.input(&Tensor::new(vec![4, 4], k.to_vec()).unwrap());
            let vv = g.input(&Tensor::new(vec![4, 4], v.to_vec()).unwrap());
            let out = g.causal_attention(qv, kv, vv, 1, 4, 2).unwrap();
            g.value(out).to_vec()
        };
        let (q, k, v) = (&data[..16], &data[16..32], &data[32..]);
        let base = run(q, k, v);
        let shift = |x: &[f64], b: &[f64]| -> Vec<f64> {
            x.iter().zip(b).enumerate().map(|(i, (a, d))| if i / 4 > t { a + d } else { *a }).collect()
        };
        let moved = run(&shift(q, &bump[..16]), &shift(k, &bump[16..32]), &shift(v, &bump[32..]));
        prop_assert_eq!(&base[..(t + 1) * 4], &moved[..(t + 1) * 4]);
    }

    #[test]
    fn improvement_of_a_set_over_itself_is_one_half(
        scores in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..6), 1..5),
        seed in any::<u64>(),
    ) {
        let p = probability_of_improvement(&scores, &scores, 50, 0.95, seed).unwrap();
        prop_assert_eq!(p.probability, 0.5);
    }

    #[test]
    fn success_intervals_are_ordered_and_bounded(
        rates in prop::collection::vec(0.0f64..=1.0, 1..20),
        seed in any::<u64>(),
    ) {
        let ci = bootstrap_ci(&rates, 200, 0.95, seed).unwrap();
        prop_assert!(0.0 <= ci.lower && ci.lower <= ci.upper && ci.upper <= 1.0);
    }

    #[test]
    fn fingerprints_separate_every_component(
        d in "[0-9a-f]{16}",
        c in "[0-9a-f]{16}",
        seed in 0u64..1000,
        episodes in 1usize..100,
    ) {
        let base = fingerprint(&d, &c, EvalMode::Stitching, &[seed], episodes);
        prop_assert_ne!(&base, &fingerprint(&format!("{d}0"), &c, EvalMode::Stitching, &[seed], episodes));
        prop_assert_ne!(&base, &fingerprint(&d, &format!("{c}0"), EvalMode::Stitching, &[seed], episodes));
        prop_assert_ne!(&base, &fingerprint(&d, &c, EvalMode::InDistribution, &[seed], episodes));
        prop_assert_ne!(&base, &fingerprint(&d, &c, EvalMode::Stitching, &[seed + 1], episodes));
        prop_assert_ne!(&base, &fingerprint(&d, &c, EvalMode::Stitching, &[seed], episodes + 1));
    }
}

fn region_dataset(id: LayoutId, seed: u64) -> Dataset {
    let spec = MazeSpec::builtin(id).unwrap();
    let regions = default_regions(&spec, 2).unwrap();
    collect(&spec, &regions, &CollectConfig::new(400, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn datasets_round_trip(id in prop::sample::select(vec![LayoutId::Gridworld5, LayoutId::Umaze, LayoutId::Medium]), seed in any::<u64>()) {
        let ds = region_dataset(id, seed);
        let back = Dataset::read_from(&ds.to_bytes().unwrap()[..]).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(back.hash().unwrap(), ds.hash().unwrap());
    }

    #[test]
    fn relabeled_goals_come_from_later_in_the_same_trajectory(seed in any::<u64>(), uniform in any::<bool>()) {
        let ds = region_dataset(LayoutId::Umaze, seed);
        let strategy = if uniform { RelabelStrategy::FutureUniform } else { RelabelStrategy::FutureGeometric { gamma: 0.9 } };
        for t in relabel_dataset(&ds, strategy, 2, seed).unwrap() {
            let k = t.goal_step.unwrap();
            prop_assert!(k > t.t);
            prop_assert_eq!(t.goal.as_slice(), ds.trajectories[t.traj].eta(k));
        }
    }

    #[test]
    fn no_trajectory_joins_a_stitching_pair(id in prop::sample::select(vec![LayoutId::Umaze, LayoutId::Medium, LayoutId::Large]), seed in any::<u64>()) {
        let ds = region_dataset(id, seed);
        let pairs = stitching_pairs(&ds.header.regions);
        for tr in &ds.trajectories {
            let cells: Vec<_> = (0..=tr.len()).map(|i| cell_of_goal(tr.eta(i)).unwrap()).collect();
            for (i, s) in cells.iter().enumerate() {
                for g in &cells[i + 1..] {
                    prop_assert!(!pairs.contains(&(*s, *g)), "{s} -> {g}");
                }
            }
        }
    }
}
