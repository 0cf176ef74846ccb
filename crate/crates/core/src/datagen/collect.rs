use std::collections::{BTreeSet, VecDeque};

use rand::Rng;

use super::{Dataset, Trajectory};
use crate::envs::{Cell, LayoutId, MazeEnv, MazeSpec, TabularPolicy, RIGHT, UP};
use crate::rng::SeedStream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CollectConfig {
    pub n_transitions: usize,
    /// Probability of a uniformly random in-region action.
    pub epsilon: f64,
    pub gamma: f64,
    /// Episode cap; the layout default when `None`.
    pub horizon: Option<usize>,
    pub seed: u64,
}

impl CollectConfig {
    pub fn new(n_transitions: usize, seed: u64) -> Self {
        CollectConfig {
            n_transitions,
            epsilon: 0.1,
            gamma: 0.99,
            horizon: None,
            seed,
        }
    }
}

/// Splits the free cells into `n` bands of BFS distance from the first free
/// cell. Adjacent bands share the cells at their common distance.
pub fn default_regions(spec: &MazeSpec, n: usize) -> Result<Vec<Vec<Cell>>> {
    if n == 0 {
        return Err(Error::invalid("need at least one region"));
    }
    let free = spec.free_cells();
    let dist = spec.distances_to(free[0]);
    let max = free.iter().map(|c| dist[spec.state_index(*c).unwrap()]).max().unwrap();
    if n > 1 && max < n {
        return Err(Error::invalid(format!("layout too small for {n} overlapping regions")));
    }
    let cut = |i: usize| (i * max + n / 2) / n;
    let regions = (0..n)
        .map(|i| {
            free.iter()
                .copied()
                .filter(|c| {
                    let d = dist[spec.state_index(*c).unwrap()];
                    d >= cut(i) && d <= cut(i + 1)
                })
                .collect()
        })
        .collect();
    Ok(regions)
}

/// Checks that regions are nonempty sets of free cells covering the layout,
/// and that each shares a cell with another region when there are several.
pub fn validate_regions(spec: &MazeSpec, regions: &[Vec<Cell>]) -> Result<()> {
    if regions.is_empty() {
        return Err(Error::invalid("need at least one region"));
    }
    let mut covered = BTreeSet::new();
    for (i, r) in regions.iter().enumerate() {
        if r.iter().filter(|c| spec.is_free(**c)).count() < 2 {
            return Err(Error::invalid(format!("region {i} has fewer than two free cells")));
        }
        if let Some(c) = r.iter().find(|c| !spec.is_free(**c)) {
            return Err(Error::invalid(format!("region {i} contains non-free cell {c}")));
        }
        covered.extend(r.iter().copied());
    }
    if covered.len() != spec.num_states() {
        return Err(Error::invalid("regions do not cover every free cell"));
    }
    if regions.len() > 1 {
        for (i, r) in regions.iter().enumerate() {
            let shares = regions
                .iter()
                .enumerate()
                .any(|(j, o)| j != i && r.iter().any(|c| o.contains(c)));
            if !shares {
                return Err(Error::invalid(format!("region {i} shares no cell with another region")));
            }
        }
    }
    Ok(())
}

/// Start/goal pairs that never lie within a common region.
pub fn stitching_pairs(regions: &[Vec<Cell>]) -> Vec<(Cell, Cell)> {
    let all: BTreeSet<Cell> = regions.iter().flatten().copied().collect();
    let mut pairs = Vec::new();
    for &s in &all {
        for &g in &all {
            if s != g && !regions.iter().any(|r| r.contains(&s) && r.contains(&g)) {
                pairs.push((s, g));
            }
        }
    }
    pairs
}

/// Distances to `goal` through cells of `region` only; `usize::MAX` when
/// unreachable.
fn region_distances(spec: &MazeSpec, region: &[Cell], goal: Cell) -> Vec<usize> {
    let inside = |c: Cell| region.contains(&c);
    let mut dist = vec![usize::MAX; spec.num_states()];
    let mut queue = VecDeque::new();
    dist[spec.state_index(goal).unwrap()] = 0;
    queue.push_back(goal);
    while let Some(c) = queue.pop_front() {
        let d = dist[spec.state_index(c).unwrap()];
        for &p in region {
            let pi = spec.state_index(p).unwrap();
            if dist[pi] != usize::MAX {
                continue;
            }
            let moves_in = (0..spec.actions.len()).any(|a| spec.successor(p, a) == c);
            if moves_in && inside(p) {
                dist[pi] = d + 1;
                queue.push_back(p);
            }
        }
    }
    dist
}

/// Collects goal-reaching episodes inside each region with an ε-greedy
/// shortest-path controller restricted to region cells.
pub fn collect(spec: &MazeSpec, regions: &[Vec<Cell>], cfg: &CollectConfig) -> Result<Dataset> {
    validate_regions(spec, regions)?;
    if cfg.n_transitions == 0 {
        return Err(Error::invalid("n_transitions must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.epsilon) {
        return Err(Error::invalid("epsilon must lie in [0, 1]"));
    }
    let mut env = MazeEnv::new(spec.clone());
    if let Some(h) = cfg.horizon {
        env.horizon = h;
    }
    let root = SeedStream::new(cfg.seed).child("collect");
    let mut trajectories = Vec::new();
    let mut remaining = cfg.n_transitions;
    let mut i = 0u64;
    while remaining > 0 {
        let stream = root.index(i);
        let region_id = (i as usize) % regions.len();
        let region = &regions[region_id];
        let mut rng = stream.child("policy").rng();
        let (start, goal, dist) = loop {
            let s = region[rng.random_range(0..region.len())];
            let g = region[rng.random_range(0..region.len())];
            if s == g {
                continue;
            }
            let dist = region_distances(spec, region, g);
            if dist[spec.state_index(s).unwrap()] != usize::MAX {
                break (s, g, dist);
            }
        };
        let env_seed = stream.child("env").key();
        let (mut st, obs, g) = env.reset(env_seed, Some(start), Some(goal))?;
        let mut tr = Trajectory {
            transitions: Vec::new(),
            final_s: obs.clone(),
            final_eta: Vec::new(),
            goal: g.to_vec(),
            region: region_id,
            start,
            env_seed,
        };
        let mut obs = obs;
        while !st.done && remaining > 0 {
            let in_region: Vec<usize> = (0..env.num_actions())
                .filter(|&a| region.contains(&spec.successor(st.cell, a)))
                .collect();
            let a = if rng.random::<f64>() < cfg.epsilon {
                in_region[rng.random_range(0..in_region.len())]
            } else {
                *in_region
                    .iter()
                    .min_by_key(|&&a| dist[spec.state_index(spec.successor(st.cell, a)).unwrap()])
                    .unwrap()
            };
            let out = env.step(&mut st, a)?;
            tr.push(obs, a, out.reward, out.observation.clone());
            obs = out.observation;
            remaining -= 1;
        }
        if tr.final_eta.is_empty() {
            tr.final_eta = crate::envs::goal_of_observation(&tr.final_s).to_vec();
        }
        trajectories.push(tr);
        i += 1;
    }
    Dataset::new(
        &env,
        cfg.gamma,
        cfg.seed,
        regions.to_vec(),
        format!("epsilon-greedy shortest path within region, epsilon={}", cfg.epsilon),
        trajectories,
    )
}

/// The two-trajectory dataset on the example MDP: `{s0, s2, s3}` and
/// `{s1, s2, g}`.
pub fn example_dataset(gamma: f64) -> Result<Dataset> {
    let spec = MazeSpec::builtin(LayoutId::ExampleMdp)?;
    let cell = |c: char| spec.label(c).unwrap();
    let scripts = [
        (cell('0'), cell('3'), vec![UP, RIGHT]),
        (cell('1'), cell('G'), vec![RIGHT, UP]),
    ];
    let regions = vec![
        vec![cell('0'), cell('2'), cell('3')],
        vec![cell('1'), cell('2'), cell('G')],
    ];
    scripted_dataset(&spec, &scripts, regions, gamma)
}

/// Trajectories replaying fixed action lists; trajectory `k` is assigned
/// region `k` modulo the region count.
pub(crate) fn scripted_dataset(
    spec: &MazeSpec,
    scripts: &[(Cell, Cell, Vec<usize>)],
    regions: Vec<Vec<Cell>>,
    gamma: f64,
) -> Result<Dataset> {
    let env = MazeEnv::new(spec.clone());
    let mut trajectories = Vec::new();
    for (k, (start, goal, actions)) in scripts.iter().enumerate() {
        let (mut st, obs, g) = env.reset(0, Some(*start), Some(*goal))?;
        let mut tr = Trajectory {
            transitions: Vec::new(),
            final_s: obs.clone(),
            final_eta: Vec::new(),
            goal: g.to_vec(),
            region: k % regions.len().max(1),
            start: *start,
            env_seed: 0,
        };
        let mut obs = obs;
        for &a in actions {
            let out = env.step(&mut st, a)?;
            tr.push(obs, a, out.reward, out.observation.clone());
            obs = out.observation;
        }
        trajectories.push(tr);
    }
    Dataset::new(&env, gamma, 0, regions, "scripted".into(), trajectories)
}

/// Fixed-length rollouts of a tabular policy from uniform start cells,
/// without goal termination.
pub fn collect_tabular(
    spec: &MazeSpec,
    policy: &TabularPolicy,
    n_trajectories: usize,
    length: usize,
    gamma: f64,
    seed: u64,
) -> Result<Dataset> {
    if policy.n_states != spec.num_states() || policy.n_actions != spec.actions.len() {
        return Err(Error::shape("policy table does not match the layout"));
    }
    if n_trajectories == 0 || length == 0 {
        return Err(Error::invalid("need a positive trajectory count and length"));
    }
    let mut env = MazeEnv::new(spec.clone()).with_horizon(length);
    env.terminate_on_goal = false;
    let root = SeedStream::new(seed).child("tabular");
    let mut trajectories = Vec::with_capacity(n_trajectories);
    for i in 0..n_trajectories as u64 {
        let stream = root.index(i);
        let env_seed = stream.child("env").key();
        let mut rng = stream.child("policy").rng();
        let free = spec.free_cells();
        let start = free[rng.random_range(0..free.len())];
        let goal = loop {
            let g = free[rng.random_range(0..free.len())];
            if g != start {
                break g;
            }
        };
        let (mut st, obs, g) = env.reset(env_seed, Some(start), Some(goal))?;
        let mut tr = Trajectory {
            transitions: Vec::new(),
            final_s: obs.clone(),
            final_eta: Vec::new(),
            goal: g.to_vec(),
            region: 0,
            start: st.cell,
            env_seed,
        };
        let mut obs = obs;
        while !st.done {
            let a = policy.sample(spec.state_index(st.cell).unwrap(), &mut rng);
            let out = env.step(&mut st, a)?;
            tr.push(obs, a, out.reward, out.observation.clone());
            obs = out.observation;
        }
        trajectories.push(tr);
    }
    Dataset::new(
        &env,
        gamma,
        seed,
        vec![spec.free_cells().to_vec()],
        "tabular behavior policy".into(),
        trajectories,
    )
}
