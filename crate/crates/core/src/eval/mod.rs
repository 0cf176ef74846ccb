//! Rollout evaluation, bootstrap statistics and ablation sweeps.

mod stats;
mod sweep;

pub use stats::{
    average_ranks, bootstrap_ci, probability_of_improvement, spearman, Improvement, Interval, DEFAULT_RESAMPLES,
};
pub use sweep::{ablation_sweep, label_variance, write_sweep_csv, SweepAxis, SweepBase, SweepRow};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{stitching_pairs, Dataset};
use crate::envs::{cell_of_goal, Cell, MazeEnv, MazeSpec};
use crate::policy::{PolicyModel, PolicyRunner};
use crate::rng::SeedStream;
use crate::{Error, Result};

pub const DEFAULT_EPISODES_PER_PAIR: usize = 50;
pub const DEFAULT_EVAL_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// A closed-loop controller for one episode.
pub trait Agent {
    fn act(&mut self, obs: &[f64], goal: &[f64]) -> Result<usize>;
}

impl Agent for PolicyRunner<'_> {
    fn act(&mut self, obs: &[f64], goal: &[f64]) -> Result<usize> {
        PolicyRunner::act(self, obs, goal)
    }
}

/// Uniform random actions.
#[derive(Debug, Clone)]
pub struct RandomAgent {
    pub n_actions: usize,
    pub rng: ChaCha8Rng,
}

impl RandomAgent {
    pub fn new(n_actions: usize, seed: u64) -> Self {
        RandomAgent {
            n_actions,
            rng: SeedStream::new(seed).child("random-agent").rng(),
        }
    }
}

impl Agent for RandomAgent {
    fn act(&mut self, _obs: &[f64], _goal: &[f64]) -> Result<usize> {
        Ok(self.rng.random_range(0..self.n_actions))
    }
}

/// Greedy descent on exact shortest-path distances.
#[derive(Debug, Clone)]
pub struct ShortestPathAgent<'a> {
    pub spec: &'a MazeSpec,
    cache: Option<(Cell, Vec<usize>)>,
}

impl<'a> ShortestPathAgent<'a> {
    pub fn new(spec: &'a MazeSpec) -> Self {
        ShortestPathAgent { spec, cache: None }
    }
}

impl Agent for ShortestPathAgent<'_> {
    fn act(&mut self, obs: &[f64], goal: &[f64]) -> Result<usize> {
        let here = cell_of_goal(&crate::envs::goal_of_observation(obs))
            .ok_or_else(|| Error::invalid("observation outside the grid"))?;
        let target = cell_of_goal(goal).ok_or_else(|| Error::invalid("goal outside the grid"))?;
        if self.cache.as_ref().is_none_or(|(g, _)| *g != target) {
            self.cache = Some((target, self.spec.distances_to(target)));
        }
        let dist = &self.cache.as_ref().unwrap().1;
        let d = |c: Cell| self.spec.state_index(c).map_or(usize::MAX, |i| dist[i]);
        Ok((0..self.spec.actions.len())
            .min_by_key(|&a| d(self.spec.successor(here, a)))
            .unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Start and goal share a collection region.
    InDistribution,
    /// Start and goal never share a collection region.
    Stitching,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::InDistribution => "in-distribution",
            EvalMode::Stitching => "stitching",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in-distribution" => Ok(EvalMode::InDistribution),
            "stitching" => Ok(EvalMode::Stitching),
            _ => Err(Error::Config(format!("unknown eval mode '{s}'"))),
        }
    }
}

/// Start/goal pairs for a mode, from the dataset's collection regions.
pub fn eval_pairs(ds: &Dataset, mode: EvalMode) -> Result<Vec<(Cell, Cell)>> {
    let regions = &ds.header.regions;
    let pairs = match mode {
        EvalMode::Stitching => stitching_pairs(regions),
        EvalMode::InDistribution => {
            let mut pairs: Vec<(Cell, Cell)> = regions
                .iter()
                .flat_map(|r| r.iter().flat_map(move |&s| r.iter().map(move |&g| (s, g))))
                .filter(|(s, g)| s != g)
                .collect();
            pairs.sort();
            pairs.dedup();
            pairs
        }
    };
    if pairs.is_empty() {
        return Err(Error::invalid(format!("the dataset's regions yield no {mode} pairs")));
    }
    Ok(pairs)
}

/// Outcome of every episode under one evaluation seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub success_rate: f64,
    /// Success rate of each pair, in pair order.
    pub per_pair: Vec<f64>,
    pub episodes: usize,
}

/// Runs `episodes` episodes per pair and counts those reaching the goal
/// cell within the horizon. `make_agent` receives the episode seed.
pub fn rollout_seed<A, F>(
    env: &MazeEnv,
    pairs: &[(Cell, Cell)],
    episodes: usize,
    seed: u64,
    make_agent: F,
) -> Result<SeedResult>
where
    A: Agent,
    F: Fn(u64) -> A + Sync,
{
    if pairs.is_empty() || episodes == 0 {
        return Err(Error::invalid("need at least one pair and one episode"));
    }
    let mut env = env.clone();
    env.terminate_on_goal = true;
    let root = SeedStream::new(seed).child("eval");
    let jobs: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|p| (0..episodes).map(move |e| (p, e)))
        .collect();
    let outcomes: Vec<Result<bool>> = jobs
        .par_iter()
        .map(|&(p, e)| {
            let stream = root.index(p as u64).index(e as u64);
            let (start, goal) = pairs[p];
            let (mut st, mut obs, g) = env.reset(stream.child("env").key(), Some(start), Some(goal))?;
            let mut agent = make_agent(stream.child("agent").key());
            while !st.done {
                let a = agent.act(&obs, &g)?;
                let out = env.step(&mut st, a)?;
                if out.reward > 0.0 {
                    return Ok(true);
                }
                obs = out.observation;
            }
            Ok(false)
        })
        .collect();
    let mut per_pair = vec![0.0; pairs.len()];
    let mut total = 0.0;
    for ((p, _), ok) in jobs.iter().zip(outcomes) {
        if ok? {
            per_pair[*p] += 1.0;
            total += 1.0;
        }
    }
    per_pair.iter_mut().for_each(|x| *x /= episodes as f64);
    Ok(SeedResult {
        seed,
        success_rate: total / jobs.len() as f64,
        per_pair,
        episodes: jobs.len(),
    })
}

/// Cells visited in one episode and whether the goal was reached.
pub fn trace_episode<A: Agent>(
    env: &MazeEnv,
    start: Cell,
    goal: Cell,
    seed: u64,
    agent: &mut A,
) -> Result<(Vec<Cell>, bool)> {
    let mut env = env.clone();
    env.terminate_on_goal = true;
    let (mut st, mut obs, g) = env.reset(seed, Some(start), Some(goal))?;
    let mut cells = vec![st.cell];
    while !st.done {
        let out = env.step(&mut st, agent.act(&obs, &g)?)?;
        cells.push(st.cell);
        if out.reward > 0.0 {
            return Ok((cells, true));
        }
        obs = out.observation;
    }
    Ok((cells, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub ci: Interval,
    pub episodes: usize,
    pub pairs: Vec<(Cell, Cell)>,
    pub dataset_hash: String,
    pub checkpoint_hash: String,
    pub fingerprint: String,
}

/// Identifies an evaluation by what was evaluated and how.
pub fn fingerprint(
    dataset_hash: &str,
    checkpoint_hash: &str,
    mode: EvalMode,
    seeds: &[u64],
    episodes: usize,
) -> String {
    let text = format!(
        "{dataset_hash}\n{checkpoint_hash}\n{mode}\n{}\n{episodes}",
        seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    );
    crate::hashing::sha256_hex(text.as_bytes())
}

impl EvalReport {
    pub fn from_seeds(
        mode: EvalMode,
        pairs: &[(Cell, Cell)],
        results: &[SeedResult],
        dataset_hash: &str,
        checkpoint_hash: &str,
    ) -> Result<Self> {
        let seeds: Vec<u64> = results.iter().map(|r| r.seed).collect();
        let per_seed: Vec<f64> = results.iter().map(|r| r.success_rate).collect();
        let ci = bootstrap_ci(&per_seed, DEFAULT_RESAMPLES, 0.95, 0)?;
        let episodes = results.iter().map(|r| r.episodes).sum();
        let per_pair_episodes = results.first().map_or(0, |r| r.episodes / pairs.len().max(1));
        Ok(EvalReport {
            mode,
            mean: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
            ci,
            episodes,
            pairs: pairs.to_vec(),
            dataset_hash: dataset_hash.to_string(),
            checkpoint_hash: checkpoint_hash.to_string(),
            fingerprint: fingerprint(dataset_hash, checkpoint_hash, mode, &seeds, per_pair_episodes),
            seeds,
            per_seed,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    /// One row per seed.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["seed", "success_rate"])?;
        for (s, r) in self.seeds.iter().zip(&self.per_seed) {
            w.write_record([s.to_string(), r.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Evaluates a trained policy under each seed.
pub fn rollout_eval(
    model: &PolicyModel,
    env: &MazeEnv,
    mode: EvalMode,
    pairs: &[(Cell, Cell)],
    episodes: usize,
    seeds: &[u64],
    dataset_hash: &str,
) -> Result<EvalReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one evaluation seed"));
    }
    let results = seeds
        .iter()
        .map(|&s| rollout_seed(env, pairs, episodes, s, |_| PolicyRunner::new(model)))
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_seeds(mode, pairs, &results, dataset_hash, &model.hash())
}
