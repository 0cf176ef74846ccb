use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CvaeArch, CvaeBatch, CvaeModel};
use crate::datagen::{Dataset, RelabelStrategy};
use crate::nn::{Graph, Optimizer};
use crate::rng::{standard_normal, SeedStream};
use crate::{Error, Result};

const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub relabel: RelabelStrategy,
    pub seed: u64,
    /// Interval of the recorded loss trace.
    pub log_every: usize,
}

impl CvaeTrainConfig {
    pub fn new(gamma: f64, seed: u64) -> Self {
        CvaeTrainConfig {
            steps: 5000,
            batch_size: 256,
            lr: 1e-3,
            relabel: RelabelStrategy::FutureGeometric { gamma },
            seed,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedCvae {
    pub model: CvaeModel,
    /// `(step, mean training loss over the preceding interval)`.
    pub trace: Vec<(usize, f64)>,
}

/// Flat index of every stored transition.
fn transition_index(ds: &Dataset) -> Vec<(usize, usize)> {
    ds.trajectories
        .iter()
        .enumerate()
        .flat_map(|(i, tr)| (0..tr.len()).map(move |t| (i, t)))
        .collect()
}

fn sample_batch<R: Rng + ?Sized>(
    ds: &Dataset,
    index: &[(usize, usize)],
    strategy: RelabelStrategy,
    n: usize,
    rng: &mut R,
) -> CvaeBatch {
    let mut b = CvaeBatch::default();
    for _ in 0..n {
        let (i, t) = index[rng.random_range(0..index.len())];
        let tr = &ds.trajectories[i];
        let step = t + strategy.sample_offset(tr.len() - t, rng);
        b.push(tr.state(t), tr.transitions[t].a, tr.eta(step));
    }
    b
}

/// Fixed relabeled batch, for held-out comparisons.
pub fn heldout_batch(ds: &Dataset, strategy: RelabelStrategy, n: usize, seed: u64) -> CvaeBatch {
    let mut rng = SeedStream::new(seed).child("heldout").rng();
    sample_batch(ds, &transition_index(ds), strategy, n, &mut rng)
}

/// Minibatch Adam on the negative ELBO with relabeled goals drawn afresh
/// every step.
pub fn train_cvae(ds: &Dataset, arch: CvaeArch, cfg: &CvaeTrainConfig) -> Result<TrainedCvae> {
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::invalid("batch_size and log_every must be positive"));
    }
    let root = SeedStream::new(cfg.seed);
    let mut model = CvaeModel::new(arch, root.child("init").key())?;
    let mut opt = Optimizer::adam(cfg.lr, &model.store)?;
    let index = transition_index(ds);
    let mut rng = root.child("batches").rng();
    let mut trace = Vec::new();
    let mut window = 0.0;
    for step in 1..=cfg.steps {
        let b = sample_batch(ds, &index, cfg.relabel, cfg.batch_size, &mut rng);
        let eps: Vec<f64> = (0..b.len() * model.arch.latent_dim)
            .map(|_| standard_normal(&mut rng))
            .collect();
        let mut g = Graph::new();
        let loss = model.loss(&mut g, &b, &eps)?;
        let v = g.scalar(loss);
        if !v.is_finite() || v > DIVERGENCE_LIMIT {
            return Err(Error::Diverged(format!("cvae loss {v} at step {step}")));
        }
        g.backward(loss, &mut model.store)?;
        opt.step(&mut model.store);
        window += v;
        if step % cfg.log_every == 0 || step == cfg.steps {
            let n = (step - 1) % cfg.log_every + 1;
            trace.push((step, window / n as f64));
            window = 0.0;
        }
    }
    Ok(TrainedCvae { model, trace })
}
