use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Trajectory};
use crate::rng::SeedStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RelabelStrategy {
    /// `P(Δ = k) = (1 − γ) γ^(k−1)`, clamped to the last stored step.
    FutureGeometric { gamma: f64 },
    /// Uniform over the remaining steps.
    FutureUniform,
}

impl RelabelStrategy {
    pub(crate) fn sample_offset<R: Rng + ?Sized>(&self, remaining: usize, rng: &mut R) -> usize {
        match *self {
            RelabelStrategy::FutureGeometric { gamma } => {
                let u: f64 = 1.0 - rng.random::<f64>();
                let k = (u.ln() / gamma.ln()).floor();
                if k.is_finite() && k < remaining as f64 {
                    1 + k as usize
                } else {
                    remaining
                }
            }
            RelabelStrategy::FutureUniform => rng.random_range(1..=remaining),
        }
    }
}

/// One training tuple: step `t` of trajectory `traj` paired with a goal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelabeledTuple {
    pub traj: usize,
    pub t: usize,
    /// Step whose goal-space point was used, when taken from the same trajectory.
    pub goal_step: Option<usize>,
    pub goal: Vec<f64>,
    /// Source trajectory of a swapped goal.
    pub swapped_from: Option<usize>,
}

/// Pairs every step of a trajectory with `η_{t+Δ}`, `Δ ≥ 1`.
pub fn relabel(
    traj: &Trajectory,
    traj_index: usize,
    strategy: RelabelStrategy,
    seed: u64,
) -> Result<Vec<RelabeledTuple>> {
    if traj.is_empty() {
        return Err(Error::invalid("relabeling needs at least two states"));
    }
    if let RelabelStrategy::FutureGeometric { gamma } = strategy {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid("relabel gamma must lie in (0, 1)"));
        }
    }
    let mut rng = SeedStream::new(seed).child("relabel").rng();
    Ok((0..traj.len())
        .map(|t| {
            let step = t + strategy.sample_offset(traj.len() - t, &mut rng);
            RelabeledTuple {
                traj: traj_index,
                t,
                goal_step: Some(step),
                goal: traj.eta(step).to_vec(),
                swapped_from: None,
            }
        })
        .collect())
}

/// `copies` relabeled tuples per stored transition, trajectory-major.
pub fn relabel_dataset(
    ds: &Dataset,
    strategy: RelabelStrategy,
    copies: usize,
    seed: u64,
) -> Result<Vec<RelabeledTuple>> {
    let root = SeedStream::new(seed).child("relabel-dataset");
    let mut out = Vec::with_capacity(ds.size() * copies);
    for (i, tr) in ds.trajectories.iter().enumerate() {
        for c in 0..copies {
            let key = root.index(i as u64).index(c as u64).key();
            out.extend(relabel(tr, i, strategy, key)?);
        }
    }
    Ok(out)
}

/// Replaces each tuple's goal, with the given probability, by a goal-space
/// point drawn from a different trajectory.
pub fn swap_goal_augment(
    ds: &Dataset,
    tuples: &[RelabeledTuple],
    probability: f64,
    seed: u64,
) -> Result<Vec<RelabeledTuple>> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::invalid("swap probability must lie in [0, 1]"));
    }
    let n = ds.trajectories.len();
    if probability > 0.0 && n < 2 {
        return Err(Error::invalid("goal swapping needs at least two trajectories"));
    }
    let mut rng = SeedStream::new(seed).child("swap").rng();
    Ok(tuples
        .iter()
        .map(|tup| {
            if probability == 0.0 || rng.random::<f64>() >= probability {
                return tup.clone();
            }
            let mut j = rng.random_range(0..n - 1);
            if j >= tup.traj {
                j += 1;
            }
            let other = &ds.trajectories[j];
            let step = rng.random_range(0..=other.len());
            RelabeledTuple {
                traj: tup.traj,
                t: tup.t,
                goal_step: None,
                goal: other.eta(step).to_vec(),
                swapped_from: Some(j),
            }
        })
        .collect())
}

/// Discounted Monte-Carlo returns of the stored sparse reward under the
/// goal-at-next-step convention: `(1 − γ) γ Σ_k γ^k r_{t+k}`, per step.
pub fn mc_q_labels(ds: &Dataset, gamma: f64) -> Result<Vec<Vec<f64>>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid("gamma must lie in (0, 1)"));
    }
    let scale = (1.0 - gamma) * gamma;
    Ok(ds
        .trajectories
        .iter()
        .map(|tr| {
            let mut labels = vec![0.0; tr.len()];
            let mut acc = 0.0;
            for t in (0..tr.len()).rev() {
                acc = scale * tr.transitions[t].r + gamma * acc;
                labels[t] = acc;
            }
            labels
        })
        .collect())
}
