//! Q labels for relabeled tuples, with a file cache keyed by the dataset,
//! model, sample count and seed.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{estimate_many, CvaeModel, Query};
use crate::datagen::{Dataset, RelabeledTuple};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelKey {
    pub dataset_hash: String,
    pub model_hash: String,
    pub samples: usize,
    pub seed: u64,
    /// Steps per tuple window, ending at the tuple's own step.
    pub context: usize,
}

/// Relabeled tuples with one label per step of their context window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTuples {
    pub key: LabelKey,
    pub tuples: Vec<RelabeledTuple>,
    /// `labels[i][j]` labels step `window_start(i) + j` of tuple `i` with its goal.
    pub labels: Vec<Vec<f64>>,
}

impl LabeledTuples {
    pub fn window_start(t: usize, context: usize) -> usize {
        (t + 1).saturating_sub(context)
    }

    /// Label of the tuple's own step.
    pub fn label(&self, i: usize) -> f64 {
        *self.labels[i].last().unwrap()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let lt: LabeledTuples = serde_json::from_slice(&std::fs::read(path)?).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if lt.tuples.len() != lt.labels.len() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "label count differs from tuple count".into(),
            });
        }
        Ok(lt)
    }
}

/// Labels every window step of every tuple with `exp(log p̂)` clamped to
/// `[0, 1]`. Identical triples are estimated once. When `cache` names an
/// existing file with the same key, it is returned instead.
pub fn label_tuples(
    ds: &Dataset,
    model: &CvaeModel,
    tuples: &[RelabeledTuple],
    context: usize,
    samples: usize,
    seed: u64,
    cache: Option<&Path>,
) -> Result<LabeledTuples> {
    if context == 0 {
        return Err(Error::invalid("context must be at least one step"));
    }
    let key = LabelKey {
        dataset_hash: ds.hash()?,
        model_hash: model.hash(),
        samples,
        seed,
        context,
    };
    if let Some(path) = cache {
        if path.exists() {
            let cached = LabeledTuples::load(path)?;
            if cached.key == key && cached.tuples == tuples {
                return Ok(cached);
            }
        }
    }
    let mut unique: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    let mut queries = Vec::new();
    let mut slots: Vec<Vec<usize>> = Vec::with_capacity(tuples.len());
    for tup in tuples {
        let tr = ds
            .trajectories
            .get(tup.traj)
            .ok_or_else(|| Error::invalid(format!("tuple references trajectory {}", tup.traj)))?;
        if tup.t >= tr.len() {
            return Err(Error::invalid("tuple step beyond trajectory end"));
        }
        let start = LabeledTuples::window_start(tup.t, context);
        let row = (start..=tup.t)
            .map(|j| {
                let s = tr.state(j);
                let a = tr.transitions[j].a;
                let bits: Vec<u64> = std::iter::once(a as u64)
                    .chain(s.iter().chain(&tup.goal).map(|x| x.to_bits()))
                    .collect();
                *unique.entry(bits).or_insert_with(|| {
                    queries.push(Query {
                        s: s.to_vec(),
                        a,
                        g: tup.goal.clone(),
                    });
                    queries.len() - 1
                })
            })
            .collect();
        slots.push(row);
    }
    let estimates = estimate_many(model, &queries, samples, seed)?;
    let values: Vec<f64> = estimates.iter().map(|e| e.value.exp().clamp(0.0, 1.0)).collect();
    let labels = slots
        .iter()
        .map(|row| row.iter().map(|&k| values[k]).collect())
        .collect();
    let out = LabeledTuples {
        key,
        tuples: tuples.to_vec(),
        labels,
    };
    if let Some(path) = cache {
        out.save(path)?;
    }
    Ok(out)
}
