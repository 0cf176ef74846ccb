use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{eval_pairs, rollout_seed, EvalMode, EvalReport};
use crate::cvae::{estimate_many, label_tuples, CvaeModel, Query};
use crate::datagen::{Dataset, RelabeledTuple};
use crate::nn::ExpectileParam;
use crate::policy::{train, PolicyArch, PolicyConfig, PolicyRunner, TrainingSet};
use crate::rng::SeedStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Expectile parameter.
    M,
    /// Importance samples per label.
    L,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "m" => Ok(SweepAxis::M),
            "L" | "l" => Ok(SweepAxis::L),
            _ => Err(Error::Config(format!("unknown sweep axis '{s}' (expected m or L)"))),
        }
    }
}

/// Everything a grid point shares.
#[derive(Debug, Clone)]
pub struct SweepBase<'a> {
    pub dataset: &'a Dataset,
    pub cvae: &'a CvaeModel,
    pub tuples: Vec<RelabeledTuple>,
    pub policy: PolicyConfig,
    pub samples: usize,
    pub label_seed: u64,
    pub mode: EvalMode,
    pub episodes: usize,
    /// Each seed trains and evaluates one policy.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub report: EvalReport,
    /// Value-head prediction at the evaluation pairs, averaged over pairs and seeds.
    pub mean_value_prediction: Option<f64>,
    pub mean_label: f64,
}

/// One full label, train and evaluate run per grid point, with the same
/// seeds at every point.
pub fn ablation_sweep(axis: SweepAxis, grid: &[f64], base: &SweepBase<'_>) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || base.seeds.is_empty() {
        return Err(Error::invalid("sweep needs a nonempty grid and seed list"));
    }
    let env = base.dataset.env()?;
    let pairs = eval_pairs(base.dataset, base.mode)?;
    let context = if base.policy.variant.is_dt() {
        base.policy.context
    } else {
        1
    };
    let arch = PolicyArch::for_env(&env, true);
    let dataset_hash = base.dataset.hash()?;
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let mut cfg = base.policy.clone();
        let mut samples = base.samples;
        match axis {
            SweepAxis::M => cfg.m = ExpectileParam::new(value)?,
            SweepAxis::L => {
                if !(value >= 1.0 && value.fract() == 0.0) {
                    return Err(Error::Config(format!("L grid value {value} is not a positive integer")));
                }
                samples = value as usize;
            }
        }
        let labeled = cfg
            .variant
            .uses_q()
            .then(|| {
                label_tuples(
                    base.dataset,
                    base.cvae,
                    &base.tuples,
                    context,
                    samples,
                    base.label_seed,
                    None,
                )
            })
            .transpose()?;
        let set = match &labeled {
            Some(l) => TrainingSet::from_labels(base.dataset, l)?,
            None => TrainingSet::from_tuples(base.dataset, &base.tuples)?,
        };
        let mean_label = labeled.as_ref().map_or(0.0, |l| {
            (0..l.tuples.len()).map(|i| l.label(i)).sum::<f64>() / l.tuples.len() as f64
        });
        let mut results = Vec::with_capacity(base.seeds.len());
        let mut hashes = Vec::new();
        let mut v_sum = 0.0;
        for &seed in &base.seeds {
            cfg.seed = seed;
            let model = train(&set, arch.clone(), &cfg)?.model;
            if cfg.variant.uses_q() {
                for &(s, g) in &pairs {
                    let (_, obs, goal) = env.reset(0, Some(s), Some(g))?;
                    v_sum += model.value(&obs, &goal)?;
                }
            }
            results.push(rollout_seed(&env, &pairs, base.episodes, seed, |_| {
                PolicyRunner::new(&model)
            })?);
            hashes.push(model.hash());
        }
        let checkpoint_hash = crate::hashing::sha256_hex(hashes.join("\n").as_bytes());
        let report = EvalReport::from_seeds(base.mode, &pairs, &results, &dataset_hash, &checkpoint_hash)?;
        rows.push(SweepRow {
            axis,
            value,
            report,
            mean_value_prediction: cfg
                .variant
                .uses_q()
                .then(|| v_sum / (pairs.len() * base.seeds.len()) as f64),
            mean_label,
        });
    }
    Ok(rows)
}

/// Writes the sweep as one CSV row per grid point.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "axis",
        "value",
        "mean_success",
        "ci_lower",
        "ci_upper",
        "mean_value_prediction",
        "mean_label",
        "fingerprint",
    ])?;
    for r in rows {
        let axis = match r.axis {
            SweepAxis::M => "m",
            SweepAxis::L => "L",
        };
        w.write_record([
            axis.to_string(),
            r.value.to_string(),
            r.report.mean.to_string(),
            r.report.ci.lower.to_string(),
            r.report.ci.upper.to_string(),
            r.mean_value_prediction.map_or(String::new(), |v| v.to_string()),
            r.mean_label.to_string(),
            r.report.fingerprint.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean over queries of the variance of the label `exp(log p̂)` across
/// `repeats` independent estimates with `samples` draws each.
pub fn label_variance(model: &CvaeModel, queries: &[Query], samples: usize, repeats: usize, seed: u64) -> Result<f64> {
    if queries.is_empty() || repeats < 2 {
        return Err(Error::invalid("label variance needs queries and at least two repeats"));
    }
    let root = SeedStream::new(seed).child("label-variance");
    let draws: Vec<Vec<f64>> = (0..repeats)
        .map(|r| {
            let key = root.index(r as u64).key();
            estimate_many(model, queries, samples, key).map(|es| es.iter().map(|e| e.value.exp()).collect())
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for q in 0..queries.len() {
        let xs: Vec<f64> = draws.iter().map(|d| d[q]).collect();
        let mean = xs.iter().sum::<f64>() / repeats as f64;
        total += xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
    }
    Ok(total / queries.len() as f64)
}
