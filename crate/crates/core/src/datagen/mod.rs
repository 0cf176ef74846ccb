//! Offline datasets: collection, hindsight relabeling, goal-swap
//! augmentation and Monte-Carlo Q labels.
//!
//! # File format
//!
//! A dataset file is JSON lines. The first line is a [`DatasetHeader`]
//! (`"format": "qstitch-dataset"`, layout id, grid text, discount, seed,
//! declared size, regions and collection policy description). Every
//! following line is one [`Trajectory`].

mod collect;
mod relabel;

#[cfg(test)]
pub(crate) use collect::scripted_dataset;
pub use collect::{
    collect, collect_tabular, default_regions, example_dataset, stitching_pairs, validate_regions, CollectConfig,
};
pub use relabel::{mc_q_labels, relabel, relabel_dataset, swap_goal_augment, RelabelStrategy, RelabeledTuple};

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::maze::goal_of_observation;
use crate::envs::{ActionSet, Cell, LayoutId, MazeEnv, MazeSpec};
use crate::{Error, Result};

const FORMAT: &str = "qstitch-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    /// Goal-space image `φ(s)`.
    pub eta: Vec<f64>,
    pub a: usize,
    pub r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    /// Observation after the last action.
    pub final_s: Vec<f64>,
    pub final_eta: Vec<f64>,
    /// Desired goal of the episode.
    pub goal: Vec<f64>,
    pub region: usize,
    pub start: Cell,
    /// Seed passed to [`MazeEnv::reset`]; replaying the actions from it
    /// reproduces the stored observations.
    pub env_seed: u64,
}

impl Trajectory {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// Observation at step `i`, `0 <= i <= len()`.
    pub fn state(&self, i: usize) -> &[f64] {
        if i == self.len() {
            &self.final_s
        } else {
            &self.transitions[i].s
        }
    }

    /// Goal-space point at step `i`, `0 <= i <= len()`.
    pub fn eta(&self, i: usize) -> &[f64] {
        if i == self.len() {
            &self.final_eta
        } else {
            &self.transitions[i].eta
        }
    }

    pub fn actions(&self) -> Vec<usize> {
        self.transitions.iter().map(|t| t.a).collect()
    }

    fn push(&mut self, s: Vec<f64>, a: usize, r: f64, next: Vec<f64>) {
        let eta = goal_of_observation(&s).to_vec();
        self.transitions.push(Transition { s, eta, a, r });
        self.final_eta = goal_of_observation(&next).to_vec();
        self.final_s = next;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub layout: LayoutId,
    pub grid: String,
    pub gamma: f64,
    pub seed: u64,
    /// Total transition count.
    pub size: usize,
    pub num_trajectories: usize,
    pub horizon: usize,
    pub noisy: bool,
    pub terminate_on_goal: bool,
    pub regions: Vec<Vec<Cell>>,
    pub policy: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub(crate) fn new(
        env: &MazeEnv,
        gamma: f64,
        seed: u64,
        regions: Vec<Vec<Cell>>,
        policy: String,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let ds = Dataset {
            header: DatasetHeader {
                format: FORMAT.into(),
                version: VERSION,
                layout: env.spec.layout,
                grid: env.spec.render(),
                gamma,
                seed,
                size: trajectories.iter().map(Trajectory::len).sum(),
                num_trajectories: trajectories.len(),
                horizon: env.horizon,
                noisy: env.noisy,
                terminate_on_goal: env.terminate_on_goal,
                regions,
                policy,
            },
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn gamma(&self) -> f64 {
        self.header.gamma
    }

    pub fn size(&self) -> usize {
        self.header.size
    }

    pub fn spec(&self) -> Result<MazeSpec> {
        let actions = match self.header.layout {
            LayoutId::Custom => ActionSet::Compass,
            id => id.action_set(),
        };
        MazeSpec::parse(self.header.layout, &self.header.grid, actions)
    }

    /// The environment the dataset was collected in.
    pub fn env(&self) -> Result<MazeEnv> {
        let mut env = MazeEnv::new(self.spec()?).with_horizon(self.header.horizon);
        env.noisy = self.header.noisy;
        env.terminate_on_goal = self.header.terminate_on_goal;
        Ok(env)
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.format != FORMAT || h.version != VERSION {
            return Err(Error::invalid(format!(
                "unsupported dataset format {} v{}",
                h.format, h.version
            )));
        }
        if self.trajectories.is_empty() {
            return Err(Error::invalid("dataset has no trajectories"));
        }
        if !(h.gamma > 0.0 && h.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma {} outside (0, 1)", h.gamma)));
        }
        let total: usize = self.trajectories.iter().map(Trajectory::len).sum();
        if total != h.size || self.trajectories.len() != h.num_trajectories {
            return Err(Error::invalid(format!(
                "declared size {} does not match {} stored transitions",
                h.size, total
            )));
        }
        for (i, tr) in self.trajectories.iter().enumerate() {
            let bad_eta = tr.transitions.iter().any(|t| t.eta != goal_of_observation(&t.s))
                || tr.final_eta != goal_of_observation(&tr.final_s);
            if bad_eta {
                return Err(Error::invalid(format!(
                    "trajectory {i}: stored goal-space point differs from φ(s)"
                )));
            }
        }
        Ok(())
    }

    /// Replays trajectory `i` through the environment and checks that the
    /// stored observations and rewards are reproduced.
    pub fn replay_matches(&self, i: usize) -> Result<bool> {
        let env = self.env()?;
        let tr = &self.trajectories[i];
        let goal =
            crate::envs::maze::cell_of_goal(&tr.goal).ok_or_else(|| Error::invalid("desired goal is not a cell"))?;
        let (mut st, obs, _) = env.reset(tr.env_seed, Some(tr.start), Some(goal))?;
        if obs != tr.state(0) {
            return Ok(false);
        }
        for (k, t) in tr.transitions.iter().enumerate() {
            let out = env.step(&mut st, t.a)?;
            if out.observation != tr.state(k + 1) || out.reward != t.r {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(&mut w, &self.header)?;
        w.write_all(b"\n")?;
        for tr in &self.trajectories {
            serde_json::to_writer(&mut w, tr)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines.next().ok_or_else(|| Error::invalid("empty dataset file"))??;
        let header: DatasetHeader = serde_json::from_str(&first)?;
        let mut trajectories = Vec::with_capacity(header.num_trajectories);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            trajectories.push(serde_json::from_str(&line)?);
        }
        let ds = Dataset { header, trajectories };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f).map_err(|e| match e {
            Error::Io(_) => e,
            other => Error::Format {
                path: path.display().to_string(),
                detail: other.to_string(),
            },
        })
    }

    /// SHA-256 of the serialized dataset.
    pub fn hash(&self) -> Result<String> {
        Ok(crate::hashing::sha256_hex(&self.to_bytes()?))
    }
}
