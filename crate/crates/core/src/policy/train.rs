use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{TrainingSample, TrainingSet};
use super::dt::DtInputs;
use super::model::{PolicyArch, PolicyModel};
use super::PolicyConfig;
use crate::datagen::Dataset;
use crate::nn::{Checkpoint, Graph, Optimizer, OptimizerState};
use crate::rng::SeedStream;
use crate::{Error, Result};

const DIVERGENCE_LIMIT: f64 = 1e6;

/// Interval means of the two loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub action_loss: f64,
    /// Zero for OCBC variants.
    pub q_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub model: PolicyModel,
    pub trace: Vec<TracePoint>,
    pub optimizer: OptimizerState,
}

impl TrainedPolicy {
    pub fn to_checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(
            Some(self.optimizer.clone()),
            serde_json::json!({ "loss_trace": self.trace }),
        )
    }
}

/// Goal of a sample, swapped with probability `p` for a goal-space point of
/// another trajectory.
fn batch_goal<'s, R: Rng + ?Sized>(ds: &'s Dataset, sample: &'s TrainingSample, p: f64, rng: &mut R) -> &'s [f64] {
    let n = ds.trajectories.len();
    if p == 0.0 || n < 2 || rng.random::<f64>() >= p {
        return &sample.goal;
    }
    let mut j = rng.random_range(0..n - 1);
    if j >= sample.traj {
        j += 1;
    }
    let other = &ds.trajectories[j];
    other.eta(rng.random_range(0..=other.len()))
}

struct Batch {
    inputs: Inputs,
    targets: Vec<f64>,
    weights: Option<Vec<f64>>,
    q_targets: Option<Vec<f64>>,
}

enum Inputs {
    Rvs {
        sg: Vec<f64>,
        q: Option<Vec<f64>>,
        rows: usize,
    },
    Dt(DtInputs),
}

fn rvs_batch<R: Rng + ?Sized>(
    set: &TrainingSet<'_>,
    arch: &PolicyArch,
    cfg: &PolicyConfig,
    picks: &[usize],
    rng: &mut R,
) -> Batch {
    let mut sg = Vec::new();
    let mut q = Vec::new();
    let mut targets = Vec::new();
    for &i in picks {
        let sample = &set.samples[i];
        let tr = &set.dataset.trajectories[sample.traj];
        arch.push_obs(tr.state(sample.t), &mut sg);
        arch.push_goal(batch_goal(set.dataset, sample, cfg.augment_probability, rng), &mut sg);
        if let Some(labels) = &sample.q {
            q.push(*labels.last().unwrap());
        }
        arch.push_one_hot(Some(tr.transitions[sample.t].a), &mut targets);
    }
    let q = cfg.variant.uses_q().then_some(q);
    Batch {
        inputs: Inputs::Rvs {
            sg,
            q: q.clone(),
            rows: picks.len(),
        },
        targets,
        weights: None,
        q_targets: q,
    }
}

/// Window length used for a sample.
fn window(sample: &TrainingSample, context: usize) -> usize {
    match &sample.q {
        Some(q) => q.len().min(context),
        None => (sample.t + 1).min(context),
    }
}

/// Windows ending at each sampled step, right-padded to the longest one.
/// Padded slots get zero weight; the causal mask keeps them from
/// influencing real slots.
fn dt_batch<R: Rng + ?Sized>(
    set: &TrainingSet<'_>,
    arch: &PolicyArch,
    cfg: &PolicyConfig,
    picks: &[usize],
    rng: &mut R,
) -> Batch {
    let steps = picks
        .iter()
        .map(|&i| window(&set.samples[i], cfg.context))
        .max()
        .unwrap_or(1);
    let rows = picks.len() * steps;
    let mut inp = DtInputs {
        batch: picks.len(),
        steps,
        s: Vec::with_capacity(rows * arch.obs_dim),
        g: Vec::with_capacity(rows * arch.goal_dim),
        q: Vec::with_capacity(rows),
        a: Vec::with_capacity(rows * arch.n_actions),
    };
    let mut targets = Vec::with_capacity(rows * arch.n_actions);
    let mut weights = Vec::with_capacity(rows);
    let zero_s = vec![0.0; arch.obs_dim];
    let zero_g = vec![0.0; arch.goal_dim];
    for &i in picks {
        let sample = &set.samples[i];
        let tr = &set.dataset.trajectories[sample.traj];
        let goal = batch_goal(set.dataset, sample, cfg.augment_probability, rng).to_vec();
        let w = window(sample, cfg.context);
        let start = sample.t + 1 - w;
        for j in 0..steps {
            if j < w {
                let t = start + j;
                let a = tr.transitions[t].a;
                arch.push_obs(tr.state(t), &mut inp.s);
                arch.push_goal(&goal, &mut inp.g);
                inp.q.push(sample.q.as_ref().map_or(0.0, |q| q[q.len() - w + j]));
                arch.push_one_hot(Some(a), &mut inp.a);
                arch.push_one_hot(Some(a), &mut targets);
                weights.push(1.0);
            } else {
                inp.s.extend(&zero_s);
                inp.g.extend(&zero_g);
                inp.q.push(0.0);
                arch.push_one_hot(None, &mut inp.a);
                arch.push_one_hot(None, &mut targets);
                weights.push(0.0);
            }
        }
    }
    let q_targets = cfg.variant.uses_q().then(|| inp.q.clone());
    Batch {
        inputs: Inputs::Dt(inp),
        targets,
        weights: Some(weights),
        q_targets,
    }
}

/// Minimizes the one-hot action MSE plus, for Q-conditioned variants, the
/// expectile regression of the Q labels, with equal weights.
pub fn train(set: &TrainingSet<'_>, arch: PolicyArch, config: &PolicyConfig) -> Result<TrainedPolicy> {
    config.validate()?;
    if set.goal_dim != arch.goal_dim {
        return Err(Error::shape(format!(
            "training goals have {} values, the policy expects {}",
            set.goal_dim, arch.goal_dim
        )));
    }
    if config.variant.uses_q() && !set.has_labels() {
        return Err(Error::invalid(format!(
            "{} needs a Q label on every training sample",
            config.variant
        )));
    }
    let mut model = PolicyModel::new(arch, config.clone())?;
    let mut opt = Optimizer::adam(config.lr, &model.store)?;
    let mut rng = SeedStream::new(config.seed).child("policy-batches").rng();
    let m = config.m.value();
    let mut trace = Vec::new();
    let (mut sum_a, mut sum_q) = (0.0, 0.0);
    for step in 1..=config.steps {
        let picks: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..set.samples.len()))
            .collect();
        let batch = if config.variant.is_dt() {
            dt_batch(set, &model.arch, config, &picks, &mut rng)
        } else {
            rvs_batch(set, &model.arch, config, &picks, &mut rng)
        };
        let mut g = Graph::new();
        let (q_pred, scores) = match batch.inputs {
            Inputs::Rvs { sg, q, rows } => model.rvs_graph(&mut g, sg, q.as_deref(), rows)?,
            Inputs::Dt(inp) => model.dt_graph(&mut g, &inp)?,
        };
        let weights = batch.weights.as_deref();
        let action_loss = g.squared_error(scores, &batch.targets, weights)?;
        let loss = match (q_pred, &batch.q_targets) {
            (Some(pred), Some(targets)) => {
                let q_loss = g.expectile_loss(pred, targets, weights, m)?;
                sum_q += g.scalar(q_loss);
                g.add(action_loss, q_loss)?
            }
            _ => action_loss,
        };
        sum_a += g.scalar(action_loss);
        let v = g.scalar(loss);
        if !v.is_finite() || v > DIVERGENCE_LIMIT {
            return Err(Error::Diverged(format!("policy loss {v} at step {step}")));
        }
        g.backward(loss, &mut model.store)?;
        opt.step(&mut model.store);
        if step % config.log_every == 0 || step == config.steps {
            let n = ((step - 1) % config.log_every + 1) as f64;
            trace.push(TracePoint {
                step,
                action_loss: sum_a / n,
                q_loss: sum_q / n,
            });
            sum_a = 0.0;
            sum_q = 0.0;
        }
    }
    Ok(TrainedPolicy {
        model,
        trace,
        optimizer: opt.into_state(),
    })
}

/// Goal-free training on Monte-Carlo Q labels of the stored sparse reward.
pub fn train_return_conditioned(ds: &Dataset, mc_labels: &[Vec<f64>], config: &PolicyConfig) -> Result<TrainedPolicy> {
    let context = if config.variant.is_dt() { config.context } else { 1 };
    let set = TrainingSet::return_conditioned(ds, mc_labels, context)?;
    let arch = PolicyArch::for_env(&ds.env()?, false);
    train(&set, arch, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{example_dataset, mc_q_labels, scripted_dataset};
    use crate::envs::{LayoutId, MazeSpec, RIGHT, UP};
    use crate::nn::{expectile_argmin_oracle, ExpectileParam};
    use crate::policy::{DtStep, Variant};

    fn small(variant: Variant, steps: usize) -> PolicyConfig {
        let mut c = PolicyConfig::new(variant);
        c.steps = steps;
        c.batch_size = 32;
        c.hidden = vec![32, 32];
        c.embed_dim = 16;
        c.heads = 2;
        c.layers = 1;
        c.context = 3;
        c.log_every = 50;
        c.seed = 7;
        c
    }

    fn arch(ds: &Dataset, goals: bool) -> PolicyArch {
        PolicyArch::for_env(&ds.env().unwrap(), goals)
    }

    #[test]
    fn ocbc_memorizes_a_single_transition() {
        let ds = example_dataset(0.9).unwrap();
        let tr = &ds.trajectories[1];
        let set = TrainingSet {
            dataset: &ds,
            samples: vec![TrainingSample {
                traj: 1,
                t: 0,
                goal: tr.eta(1).to_vec(),
                q: None,
            }],
            goal_dim: 2,
        };
        for v in [Variant::OcbcRvs, Variant::OcbcDt] {
            let out = train(&set, arch(&ds, true), &small(v, 300)).unwrap();
            assert!(
                out.trace.last().unwrap().action_loss < 1e-3,
                "{v}: {:?}",
                out.trace.last()
            );
            let a = act(&out.model, tr.state(0), tr.eta(1));
            assert_eq!(a, RIGHT);
        }
    }

    fn act(model: &PolicyModel, s: &[f64], g: &[f64]) -> usize {
        crate::policy::PolicyRunner::new(model).act(s, g).unwrap()
    }

    /// Two (s, g) pairs with known label sets.
    fn value_set(ds: &Dataset) -> (TrainingSet<'_>, [Vec<f64>; 2]) {
        let sets = [vec![0.1, 0.3, 0.5], vec![0.2, 0.8]];
        let mut samples = Vec::new();
        for (k, labels) in sets.iter().enumerate() {
            let tr = &ds.trajectories[k];
            for &y in labels {
                samples.push(TrainingSample {
                    traj: k,
                    t: 0,
                    goal: tr.eta(2).to_vec(),
                    q: Some(vec![y]),
                });
            }
        }
        let set = TrainingSet {
            dataset: ds,
            samples,
            goal_dim: 2,
        };
        (set, sets)
    }

    fn trained_values(m: f64) -> Vec<f64> {
        let ds = example_dataset(0.9).unwrap();
        let (set, _) = value_set(&ds);
        let mut cfg = small(Variant::GcrslRvs, 1500);
        cfg.m = ExpectileParam::new(m).unwrap();
        let model = train(&set, arch(&ds, true), &cfg).unwrap().model;
        (0..2)
            .map(|k| {
                let tr = &ds.trajectories[k];
                model.value(tr.state(0), tr.eta(2)).unwrap()
            })
            .collect()
    }

    #[test]
    fn value_head_tracks_the_expectile_and_the_max() {
        let ds = example_dataset(0.9).unwrap();
        let (_, sets) = value_set(&ds);
        let grid = [0.5, 0.7, 0.9, 0.99];
        let values: Vec<Vec<f64>> = grid.iter().map(|&m| trained_values(m)).collect();
        for (k, labels) in sets.iter().enumerate() {
            let max = labels.iter().copied().fold(f64::MIN, f64::max);
            let min = labels.iter().copied().fold(f64::MAX, f64::min);
            for (i, &m) in grid.iter().enumerate() {
                let oracle = expectile_argmin_oracle(labels, ExpectileParam::new(m).unwrap(), 1e-5).unwrap();
                assert!(
                    (values[i][k] - oracle).abs() < 0.02,
                    "m={m} k={k}: {} vs {oracle}",
                    values[i][k]
                );
                assert!(values[i][k] <= max + 0.05);
                if i > 0 {
                    assert!(values[i][k] >= values[i - 1][k] - 1e-3);
                }
            }
            assert!((values[3][k] - max).abs() <= 0.05 * (max - min), "{:?}", values[3]);
        }
    }

    #[test]
    fn missing_labels_and_bad_goal_dims_are_rejected() {
        let ds = example_dataset(0.9).unwrap();
        let tuples =
            crate::datagen::relabel_dataset(&ds, crate::datagen::RelabelStrategy::FutureUniform, 1, 0).unwrap();
        let set = TrainingSet::from_tuples(&ds, &tuples).unwrap();
        assert!(train(&set, arch(&ds, true), &small(Variant::GcrslRvs, 1)).is_err());
        assert!(train(&set, arch(&ds, false), &small(Variant::OcbcRvs, 1)).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = example_dataset(0.9).unwrap();
        let (set, _) = value_set(&ds);
        for v in [Variant::GcrslRvs, Variant::GcrslDt] {
            let a = train(&set, arch(&ds, true), &small(v, 20)).unwrap();
            let b = train(&set, arch(&ds, true), &small(v, 20)).unwrap();
            assert!(a.model.store.bitwise_eq(&b.model.store));
            assert_eq!(a.trace, b.trace);
        }
    }

    #[test]
    fn right_padding_does_not_change_real_slots() {
        let ds = example_dataset(0.9).unwrap();
        let model = PolicyModel::new(arch(&ds, true), small(Variant::GcrslDt, 1)).unwrap();
        let tr = &ds.trajectories[0];
        let steps: Vec<DtStep> = (0..2)
            .map(|t| DtStep {
                s: tr.state(t).to_vec(),
                g: tr.eta(2).to_vec(),
                q: 0.1 * (t + 1) as f64,
                a: Some(tr.transitions[t].a),
            })
            .collect();
        let (q1, s1) = model.dt_predict(&steps[..1]).unwrap();
        let (q2, s2) = model.dt_predict(&steps).unwrap();
        assert!((q1[0] - q2[0]).abs() < 1e-12);
        for (x, y) in s1[0].iter().zip(&s2[0]) {
            assert!((x - y).abs() < 1e-12);
        }
        let mut long = steps.clone();
        long.push(steps[0].clone());
        long.push(steps[0].clone());
        assert!(model.dt_predict(&long).is_err());
        assert!(model.infer_dt(&long[..3], tr.state(2), tr.eta(2)).is_err());
        model.infer_dt(&steps, tr.state(2), tr.eta(2)).unwrap();
        model.infer_dt(&[], tr.state(0), tr.eta(2)).unwrap();
    }

    /// From s0 the up action always reaches the goal; right never does.
    fn bandit() -> Dataset {
        let spec = MazeSpec::builtin(LayoutId::ExampleMdp).unwrap();
        let cell = |c: char| spec.label(c).unwrap();
        let scripts = vec![
            (cell('0'), cell('G'), vec![UP, UP]),
            (cell('0'), cell('G'), vec![RIGHT, UP]),
            (cell('0'), cell('G'), vec![UP, UP]),
            (cell('0'), cell('G'), vec![RIGHT, RIGHT]),
        ];
        let free = spec.free_cells().to_vec();
        scripted_dataset(&spec, &scripts, vec![free], 0.9).unwrap()
    }

    #[test]
    fn return_conditioned_bandit_prefers_the_rewarding_action() {
        let ds = bandit();
        let labels = mc_q_labels(&ds, 0.9).unwrap();
        assert!(labels[0][0] > 0.0 && labels[1][0] == 0.0);
        let s0 = ds.trajectories[0].state(0);
        for v in [Variant::GcrslRvs, Variant::GcrslDt] {
            let out = train_return_conditioned(&ds, &labels, &small(v, 600)).unwrap();
            let a = act(&out.model, s0, &[]);
            assert_eq!(a, UP, "{v}");
            let again = train_return_conditioned(&ds, &labels, &small(v, 600)).unwrap();
            assert!(out.model.store.bitwise_eq(&again.model.store));
        }
    }

    #[test]
    fn median_expectile_predicts_the_mean_label() {
        let ds = bandit();
        let labels = mc_q_labels(&ds, 0.9).unwrap();
        let at_s0: Vec<f64> = labels.iter().map(|l| l[0]).collect();
        let mean = at_s0.iter().sum::<f64>() / at_s0.len() as f64;
        let mut cfg = small(Variant::GcrslRvs, 1500);
        cfg.m = ExpectileParam::new(0.5).unwrap();
        let model = train_return_conditioned(&ds, &labels, &cfg).unwrap().model;
        let v = model.value(ds.trajectories[0].state(0), &[]).unwrap();
        assert!((v - mean).abs() < 0.01, "{v} vs {mean}");
    }

    #[test]
    fn checkpoint_round_trip_preserves_decisions() {
        let ds = example_dataset(0.9).unwrap();
        let (set, _) = value_set(&ds);
        for v in [Variant::GcrslRvs, Variant::GcrslDt] {
            let out = train(&set, arch(&ds, true), &small(v, 10)).unwrap();
            let ck = out.to_checkpoint();
            let bytes = ck.to_bytes().unwrap();
            let back = PolicyModel::from_checkpoint(&Checkpoint::from_bytes(&bytes, "mem").unwrap()).unwrap();
            assert_eq!(back.hash(), out.model.hash());
            assert_eq!(back.config, out.model.config);
            let tr = &ds.trajectories[0];
            assert_eq!(
                act(&back, tr.state(0), tr.eta(2)),
                act(&out.model, tr.state(0), tr.eta(2))
            );
        }
    }
}
