//! Conditional VAE over goals, `p_ψ(g | s, a) = ∫ p_ψ(g | z, s, a) N(z; 0, I) dz`,
//! with an amortized diagonal-Gaussian posterior `q_φ(z | s, a, g)`.
//!
//! Training maximizes the evidence lower bound. At query time the
//! log-marginal is estimated by importance sampling with `L` posterior draws:
//!
//! ```text
//! log p̂(g | s, a) = logsumexp_l [log p_ψ(g | z_l, s, a) + log N(z_l) − log q_φ(z_l | s, a, g)] − log L
//! ```
//!
//! Observations and goals are affinely normalized before entering either
//! network; the decoder mean is mapped back to raw goal coordinates so the
//! fixed decoder scale `σ_dec` is measured in cells.

mod labels;
mod train;

pub use labels::{label_tuples, LabelKey, LabeledTuples};
pub use train::{heldout_batch, train_cvae, CvaeTrainConfig, TrainedCvae};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{MazeEnv, MazeSpec};
use crate::nn::kernels::logsumexp;
use crate::nn::{Checkpoint, Graph, Mlp, ParamStore, Var};
use crate::rng::{standard_normal, SeedStream};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const CHECKPOINT_KIND: &str = "cvae";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvaeArch {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub goal_dim: usize,
    pub latent_dim: usize,
    /// Hidden widths shared by encoder and decoder.
    pub hidden: Vec<usize>,
    pub sigma_dec: f64,
    pub obs_offset: Vec<f64>,
    pub goal_offset: Vec<f64>,
    pub scale: f64,
}

impl CvaeArch {
    pub fn for_env(env: &MazeEnv) -> Self {
        let (w, h) = (env.spec.width as f64, env.spec.height as f64);
        let centre = vec![(w - 1.0) / 2.0, (h - 1.0) / 2.0];
        CvaeArch {
            obs_dim: env.obs_dim(),
            n_actions: env.num_actions(),
            goal_dim: 2,
            latent_dim: 8,
            hidden: vec![128, 128],
            sigma_dec: 0.25,
            obs_offset: centre.clone(),
            goal_offset: centre,
            scale: w.max(h) / 2.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.sigma_dec > 0.0) || !(self.scale > 0.0) {
            return Err(Error::invalid("sigma_dec and scale must be positive"));
        }
        if self.obs_offset.len() != self.obs_dim || self.goal_offset.len() != self.goal_dim {
            return Err(Error::shape("normalization offsets do not match dimensions"));
        }
        if self.latent_dim == 0 || self.n_actions == 0 {
            return Err(Error::invalid("latent and action dimensions must be positive"));
        }
        Ok(())
    }

    fn encoder_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.obs_dim + self.n_actions + self.goal_dim];
        v.extend(&self.hidden);
        v.push(2 * self.latent_dim);
        v
    }

    fn decoder_sizes(&self) -> Vec<usize> {
        let mut v = vec![self.latent_dim + self.obs_dim + self.n_actions];
        v.extend(&self.hidden);
        v.push(self.goal_dim);
        v
    }
}

/// Minibatch of `(s, a, g)` triples.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CvaeBatch {
    pub s: Vec<f64>,
    pub a: Vec<usize>,
    pub g: Vec<f64>,
}

impl CvaeBatch {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn push(&mut self, s: &[f64], a: usize, g: &[f64]) {
        self.s.extend_from_slice(s);
        self.a.push(a);
        self.g.extend_from_slice(g);
    }
}

#[derive(Debug, Clone)]
pub struct CvaeModel {
    pub arch: CvaeArch,
    pub store: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
}

impl CvaeModel {
    pub fn new(arch: CvaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = SeedStream::new(seed).child("cvae-init").rng();
        let mut store = ParamStore::new();
        let encoder = Mlp::new(&mut store, "encoder", &arch.encoder_sizes(), &mut rng);
        let decoder = Mlp::new(&mut store, "decoder", &arch.decoder_sizes(), &mut rng);
        Ok(CvaeModel {
            arch,
            store,
            encoder,
            decoder,
        })
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn to_checkpoint(&self, train: serde_json::Value, trace: &[(usize, f64)]) -> Result<Checkpoint> {
        let config = serde_json::json!({ "arch": self.arch, "train": train });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, config, self.store.clone(), None);
        ck.extra = serde_json::json!({ "loss_trace": trace });
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let arch: CvaeArch = serde_json::from_value(
            ck.config
                .get("arch")
                .cloned()
                .ok_or_else(|| Error::Config("cvae checkpoint lacks an arch".into()))?,
        )?;
        let mut model = CvaeModel::new(arch, 0)?;
        if model.store.len() != ck.params.len()
            || model
                .store
                .iter()
                .zip(ck.params.iter())
                .any(|((n1, t1), (n2, t2))| n1 != n2 || t1.shape() != t2.shape())
        {
            return Err(Error::Config("checkpoint parameters do not match the arch".into()));
        }
        model.store = ck.params.clone();
        Ok(model)
    }

    /// Hash of the parameter values.
    pub fn hash(&self) -> String {
        let bytes: Vec<u8> = self.store.flatten().iter().flat_map(|x| x.to_le_bytes()).collect();
        crate::hashing::short_hash(&bytes)
    }

    fn check_batch(&self, b: &CvaeBatch) -> Result<()> {
        let n = b.len();
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if b.s.len() != n * self.arch.obs_dim || b.g.len() != n * self.arch.goal_dim {
            return Err(Error::shape("batch arrays disagree with model dimensions"));
        }
        if let Some(a) = b.a.iter().find(|a| **a >= self.arch.n_actions) {
            return Err(Error::invalid(format!("action {a} out of range")));
        }
        Ok(())
    }

    fn norm_obs(&self, s: &[f64], out: &mut Vec<f64>) {
        out.extend(
            s.iter()
                .zip(&self.arch.obs_offset)
                .map(|(x, o)| (x - o) / self.arch.scale),
        );
    }

    fn norm_goal(&self, g: &[f64], out: &mut Vec<f64>) {
        out.extend(
            g.iter()
                .zip(&self.arch.goal_offset)
                .map(|(x, o)| (x - o) / self.arch.scale),
        );
    }

    fn one_hot(&self, a: usize, out: &mut Vec<f64>) {
        out.extend((0..self.arch.n_actions).map(|k| f64::from(u8::from(k == a))));
    }

    fn encoder_input(&self, b: &CvaeBatch) -> Vec<f64> {
        let (ds, dg) = (self.arch.obs_dim, self.arch.goal_dim);
        let mut x = Vec::with_capacity(b.len() * self.encoder.input_dim());
        for i in 0..b.len() {
            self.norm_obs(&b.s[i * ds..(i + 1) * ds], &mut x);
            self.one_hot(b.a[i], &mut x);
            self.norm_goal(&b.g[i * dg..(i + 1) * dg], &mut x);
        }
        x
    }

    fn decoder_input(&self, z: &[f64], b: &CvaeBatch) -> Vec<f64> {
        let (ds, dz) = (self.arch.obs_dim, self.arch.latent_dim);
        let mut x = Vec::with_capacity(b.len() * self.decoder.input_dim());
        for i in 0..b.len() {
            x.extend_from_slice(&z[i * dz..(i + 1) * dz]);
            self.norm_obs(&b.s[i * ds..(i + 1) * ds], &mut x);
            self.one_hot(b.a[i], &mut x);
        }
        x
    }

    /// Posterior means and log-variances, each `[n, latent]`.
    pub fn posterior(&self, b: &CvaeBatch) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_batch(b)?;
        let out = self.encoder.eval(&self.store, &self.encoder_input(b), b.len());
        let dz = self.arch.latent_dim;
        let (mut mu, mut lv) = (Vec::new(), Vec::new());
        for row in out.chunks(2 * dz) {
            mu.extend_from_slice(&row[..dz]);
            lv.extend_from_slice(&row[dz..]);
        }
        Ok((mu, lv))
    }

    /// Decoder means in raw goal coordinates, `[n, goal_dim]`.
    pub fn decode_mean(&self, z: &[f64], b: &CvaeBatch) -> Result<Vec<f64>> {
        self.check_batch(b)?;
        if z.len() != b.len() * self.arch.latent_dim {
            return Err(Error::shape("latent batch has the wrong size"));
        }
        let out = self.decoder.eval(&self.store, &self.decoder_input(z, b), b.len());
        Ok(self.denorm_goal(out))
    }

    fn denorm_goal(&self, mut out: Vec<f64>) -> Vec<f64> {
        let dg = self.arch.goal_dim;
        for row in out.chunks_mut(dg) {
            for (x, o) in row.iter_mut().zip(&self.arch.goal_offset) {
                *x = *x * self.arch.scale + o;
            }
        }
        out
    }

    fn log_lik(&self, g: &[f64], mean: &[f64]) -> f64 {
        let s2 = self.arch.sigma_dec * self.arch.sigma_dec;
        let sq: f64 = g.iter().zip(mean).map(|(x, m)| (x - m).powi(2)).sum();
        -0.5 * sq / s2 - 0.5 * g.len() as f64 * (LN_2PI + s2.ln())
    }

    /// `log p_ψ(g | z, s, a) + log N(z; 0, I) − log q_φ(z | s, a, g)` for a
    /// single triple and latent.
    pub fn log_weight(&self, s: &[f64], a: usize, g: &[f64], z: &[f64]) -> Result<f64> {
        let mut b = CvaeBatch::default();
        b.push(s, a, g);
        let (mu, lv) = self.posterior(&b)?;
        let mean = self.decode_mean(z, &b)?;
        let log_prior: f64 = z.iter().map(|x| -0.5 * (x * x + LN_2PI)).sum();
        let log_q: f64 = z
            .iter()
            .zip(mu.iter().zip(&lv))
            .map(|(x, (m, l))| -0.5 * ((x - m).powi(2) / l.exp() + l + LN_2PI))
            .sum();
        Ok(self.log_lik(g, &mean) + log_prior - log_q)
    }

    /// Records the batch-mean negative ELBO with reparameterization noise
    /// `eps: [n, latent]`.
    pub fn loss(&self, graph: &mut Graph, b: &CvaeBatch, eps: &[f64]) -> Result<Var> {
        self.check_batch(b)?;
        let (n, dz, dg) = (b.len(), self.arch.latent_dim, self.arch.goal_dim);
        if eps.len() != n * dz {
            return Err(Error::shape("noise batch has the wrong size"));
        }
        let enc_in = graph.constant(vec![n, self.encoder.input_dim()], self.encoder_input(b))?;
        let enc = self.encoder.forward(graph, &self.store, enc_in)?;
        let mu = graph.slice_cols(enc, 0, dz)?;
        let lv = graph.slice_cols(enc, dz, 2 * dz)?;
        let half = graph.scale(lv, 0.5);
        let std = graph.exp(half);
        let e = graph.constant(vec![n, dz], eps.to_vec())?;
        let noise = graph.mul(std, e)?;
        let z = graph.add(mu, noise)?;

        let mut cond = Vec::with_capacity(n * (self.arch.obs_dim + self.arch.n_actions));
        for i in 0..n {
            self.norm_obs(&b.s[i * self.arch.obs_dim..(i + 1) * self.arch.obs_dim], &mut cond);
            self.one_hot(b.a[i], &mut cond);
        }
        let cond = graph.constant(vec![n, self.arch.obs_dim + self.arch.n_actions], cond)?;
        let dec_in = graph.concat_cols(&[z, cond])?;
        let out = self.decoder.forward(graph, &self.store, dec_in)?;
        // Compare in normalized units: (g − μ_raw)² = scale² (g_norm − out)².
        let mut g_norm = Vec::with_capacity(n * dg);
        for i in 0..n {
            self.norm_goal(&b.g[i * dg..(i + 1) * dg], &mut g_norm);
        }
        let sq = graph.squared_error(out, &g_norm, None)?;
        let s2 = self.arch.sigma_dec * self.arch.sigma_dec;
        let recon = graph.scale(sq, 0.5 * self.arch.scale * self.arch.scale / s2);
        let recon = graph.add_scalar(recon, 0.5 * dg as f64 * (LN_2PI + s2.ln()));

        // KL[q ‖ N(0, I)] = ½ Σ (μ² + e^lv − lv − 1), averaged over rows.
        let mu2 = graph.square(mu);
        let var = graph.exp(lv);
        let t = graph.add(mu2, var)?;
        let t = graph.sub(t, lv)?;
        let t = graph.sum(t);
        let kl = graph.scale(t, 0.5 / n as f64);
        let kl = graph.add_scalar(kl, -0.5 * dz as f64);
        graph.add(recon, kl)
    }

    /// Posterior draws `z_l = μ + σ ε_l` for one triple, `[L, latent]`.
    pub fn sample_posterior(&self, s: &[f64], a: usize, g: &[f64], samples: usize, seed: u64) -> Result<Vec<f64>> {
        let mut b = CvaeBatch::default();
        b.push(s, a, g);
        let (mu, lv) = self.posterior(&b)?;
        let mut rng = SeedStream::new(seed).child("importance").rng();
        let dz = self.arch.latent_dim;
        let mut z = Vec::with_capacity(samples * dz);
        for _ in 0..samples {
            for k in 0..dz {
                z.push(mu[k] + (0.5 * lv[k]).exp() * standard_normal(&mut rng));
            }
        }
        Ok(z)
    }
}

/// Mean negative ELBO on a batch with noise from `seed`.
pub fn elbo(model: &CvaeModel, b: &CvaeBatch, seed: u64) -> Result<f64> {
    let mut rng = SeedStream::new(seed).child("elbo").rng();
    let eps: Vec<f64> = (0..b.len() * model.arch.latent_dim)
        .map(|_| standard_normal(&mut rng))
        .collect();
    let mut g = Graph::new();
    let loss = model.loss(&mut g, b, &eps)?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::numerical("elbo", format!("non-finite loss {v}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogProbEstimate {
    pub value: f64,
    pub samples: usize,
    pub seed: u64,
}

/// Importance-sampled `log p̂(g | s, a)` with `samples` posterior draws.
pub fn estimate_log_prob(
    model: &CvaeModel,
    s: &[f64],
    a: usize,
    g: &[f64],
    samples: usize,
    seed: u64,
) -> Result<LogProbEstimate> {
    if samples == 0 {
        return Err(Error::invalid("importance sampling needs L >= 1"));
    }
    let mut b = CvaeBatch::default();
    b.push(s, a, g);
    let (mu, lv) = model.posterior(&b)?;
    let z = model.sample_posterior(s, a, g, samples, seed)?;
    let dz = model.arch.latent_dim;
    let (ds, na) = (model.arch.obs_dim, model.arch.n_actions);

    // The conditioning part of the first decoder layer is shared by all draws.
    let first = &model.decoder().layers[0];
    let w = model.store.get(first.weight).data();
    let bias = model.store.get(first.bias).data();
    let h = first.fan_out;
    let mut cond = Vec::with_capacity(ds + na);
    model.norm_obs(s, &mut cond);
    model.one_hot(a, &mut cond);
    let mut base = bias.to_vec();
    for (i, c) in cond.iter().enumerate() {
        if *c != 0.0 {
            let row = &w[(dz + i) * h..(dz + i + 1) * h];
            base.iter_mut().zip(row).for_each(|(o, r)| *o += c * r);
        }
    }
    let mut hidden = crate::nn::kernels::matmul(&z, &w[..dz * h], samples, dz, h);
    for row in hidden.chunks_mut(h) {
        row.iter_mut().zip(&base).for_each(|(o, c)| *o += c);
    }
    let last_layer = model.decoder().layers.len() == 1;
    if !last_layer {
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let out = if last_layer {
        hidden
    } else {
        model.decoder().eval_from(&model.store, &hidden, samples, 1)
    };
    let means = model.denorm_goal(out);

    let dg = model.arch.goal_dim;
    let log_w: Vec<f64> = (0..samples)
        .map(|l| {
            let zl = &z[l * dz..(l + 1) * dz];
            let log_prior: f64 = zl.iter().map(|x| -0.5 * (x * x + LN_2PI)).sum();
            let log_q: f64 = zl
                .iter()
                .zip(mu.iter().zip(&lv))
                .map(|(x, (m, v))| -0.5 * ((x - m).powi(2) / v.exp() + v + LN_2PI))
                .sum();
            model.log_lik(g, &means[l * dg..(l + 1) * dg]) + log_prior - log_q
        })
        .collect();
    let lse = logsumexp(&log_w);
    if lse == f64::NEG_INFINITY {
        return Err(Error::numerical("estimate_log_prob", "all importance weights are zero"));
    }
    let value = lse - (samples as f64).ln();
    if !value.is_finite() {
        return Err(Error::numerical(
            "estimate_log_prob",
            format!("non-finite estimate {value}"),
        ));
    }
    Ok(LogProbEstimate { value, samples, seed })
}

/// `exp(log p̂)` clamped to `[0, 1]`.
pub fn q_label(model: &CvaeModel, s: &[f64], a: usize, g: &[f64], samples: usize, seed: u64) -> Result<f64> {
    let est = estimate_log_prob(model, s, a, g, samples, seed)?;
    Ok(est.value.exp().clamp(0.0, 1.0))
}

/// Seed of the importance-sampling stream for one triple. Identical triples
/// share a stream, so labels depend only on the triple and the root seed.
pub fn query_seed(seed: u64, s: &[f64], a: usize, g: &[f64]) -> u64 {
    let mut stream = SeedStream::new(seed).child("query").index(a as u64);
    for x in s.iter().chain(g) {
        stream = stream.index(x.to_bits());
    }
    stream.key()
}

/// One query triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub s: Vec<f64>,
    pub a: usize,
    pub g: Vec<f64>,
}

/// Estimates for many triples in parallel, each from its [`query_seed`].
pub fn estimate_many(model: &CvaeModel, queries: &[Query], samples: usize, seed: u64) -> Result<Vec<LogProbEstimate>> {
    queries
        .par_iter()
        .map(|q| estimate_log_prob(model, &q.s, q.a, &q.g, samples, query_seed(seed, &q.s, q.a, &q.g)))
        .collect()
}

/// Unclamped `p̂(g | s, a)` for every state, action and goal cell of a
/// layout, observed at cell centres; row-major `[state, action, goal]`.
pub fn density_table(model: &CvaeModel, spec: &MazeSpec, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let cells = spec.free_cells();
    let queries: Vec<Query> = cells
        .iter()
        .flat_map(|s| {
            (0..spec.actions.len()).flat_map(move |a| {
                cells.iter().map(move |g| Query {
                    s: s.coords().to_vec(),
                    a,
                    g: g.coords().to_vec(),
                })
            })
        })
        .collect();
    Ok(estimate_many(model, &queries, samples, seed)?
        .iter()
        .map(|e| e.value.exp())
        .collect())
}
