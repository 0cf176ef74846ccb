use crate::cvae::LabeledTuples;
use crate::datagen::{Dataset, RelabeledTuple};
use crate::{Error, Result};

/// Step `t` of trajectory `traj` with a goal held fixed over its window.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub traj: usize,
    pub t: usize,
    pub goal: Vec<f64>,
    /// Q labels of the window ending at `t`, oldest first.
    pub q: Option<Vec<f64>>,
}

/// Samples plus the dataset they index into.
#[derive(Debug, Clone)]
pub struct TrainingSet<'a> {
    pub dataset: &'a Dataset,
    pub samples: Vec<TrainingSample>,
    /// Goal dimension; zero for the return-conditioned mode.
    pub goal_dim: usize,
}

impl<'a> TrainingSet<'a> {
    /// Unlabeled relabeled tuples, for OCBC variants.
    pub fn from_tuples(dataset: &'a Dataset, tuples: &[RelabeledTuple]) -> Result<Self> {
        let samples = tuples
            .iter()
            .map(|t| TrainingSample {
                traj: t.traj,
                t: t.t,
                goal: t.goal.clone(),
                q: None,
            })
            .collect();
        Self::checked(dataset, samples, 2)
    }

    /// Tuples with Q labels over their windows.
    pub fn from_labels(dataset: &'a Dataset, labeled: &LabeledTuples) -> Result<Self> {
        if labeled.key.dataset_hash != dataset.hash()? {
            return Err(Error::invalid("labels were computed for a different dataset"));
        }
        let samples = labeled
            .tuples
            .iter()
            .zip(&labeled.labels)
            .map(|(t, q)| TrainingSample {
                traj: t.traj,
                t: t.t,
                goal: t.goal.clone(),
                q: Some(q.clone()),
            })
            .collect();
        Self::checked(dataset, samples, 2)
    }

    /// Every stored step with goal conditioning removed and Monte-Carlo
    /// labels over a window of `context` steps.
    pub fn return_conditioned(dataset: &'a Dataset, mc_labels: &[Vec<f64>], context: usize) -> Result<Self> {
        if mc_labels.len() != dataset.trajectories.len() {
            return Err(Error::invalid("one label row per trajectory is required"));
        }
        let mut samples = Vec::with_capacity(dataset.size());
        for (i, (tr, labels)) in dataset.trajectories.iter().zip(mc_labels).enumerate() {
            if labels.len() != tr.len() {
                return Err(Error::invalid(format!("trajectory {i}: label count mismatch")));
            }
            for t in 0..tr.len() {
                let start = LabeledTuples::window_start(t, context.max(1));
                samples.push(TrainingSample {
                    traj: i,
                    t,
                    goal: Vec::new(),
                    q: Some(labels[start..=t].to_vec()),
                });
            }
        }
        Self::checked(dataset, samples, 0)
    }

    fn checked(dataset: &'a Dataset, samples: Vec<TrainingSample>, goal_dim: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        for s in &samples {
            let tr = dataset
                .trajectories
                .get(s.traj)
                .ok_or_else(|| Error::invalid(format!("sample references trajectory {}", s.traj)))?;
            if s.t >= tr.len() || s.goal.len() != goal_dim {
                return Err(Error::invalid("sample step or goal size is inconsistent"));
            }
            if let Some(q) = &s.q {
                if q.is_empty() || q.len() > s.t + 1 || q.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid("sample Q window is malformed"));
                }
            }
        }
        Ok(TrainingSet {
            dataset,
            samples,
            goal_dim,
        })
    }

    pub fn has_labels(&self) -> bool {
        self.samples.iter().all(|s| s.q.is_some())
    }

    /// Largest Q label in the set.
    pub fn max_label(&self) -> Option<f64> {
        self.samples
            .iter()
            .filter_map(|s| s.q.as_ref())
            .flatten()
            .copied()
            .reduce(f64::max)
    }
}
