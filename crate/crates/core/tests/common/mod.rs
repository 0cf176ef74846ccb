//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.
#![allow(dead_code)]

use qstitch_core::cvae::{CvaeArch, CvaeModel};
use qstitch_core::envs::{LayoutId, MazeEnv};
use qstitch_core::nn::{Graph, ParamStore, Tensor, Var};
use qstitch_core::rng::SeedStream;
use qstitch_core::Result;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, 1e-3)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Values in `±[0.2, 1.5]`, kept away from the ReLU kink.
pub fn draw(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `build` with respect to every element of every input,
/// over `draws` random input draws.
pub fn check_input_grads<F>(shapes: &[Vec<usize>], draws: usize, seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |data: &[Vec<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(data)
            .map(|(s, d)| g.input(&Tensor::new(s.clone(), d.clone()).unwrap()))
            .collect();
        let out = build(&mut g, &vars).unwrap();
        g.scalar(out)
    };
    let mut rng = SeedStream::new(seed).child("gradcheck").rng();
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let data: Vec<Vec<f64>> = shapes.iter().map(|s| draw(s.iter().product(), &mut rng)).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&data)
            .map(|(s, d)| g.input(&Tensor::new(s.clone(), d.clone()).unwrap().with_grad()))
            .collect();
        let out = build(&mut g, &vars).unwrap();
        let grads = g.gradients(out).unwrap();
        for (i, v) in vars.iter().enumerate() {
            let analytic = grads
                .wrt(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; data[i].len()]);
            for j in 0..data[i].len() {
                let mut plus = data.clone();
                plus[i][j] += FD_STEP;
                let mut minus = data.clone();
                minus[i][j] -= FD_STEP;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic[j], fd));
            }
        }
    }
    worst
}

/// Worst relative error of parameter gradients accumulated by `backward`,
/// checked at `coords` random parameter coordinates.
pub fn check_param_grads<F>(store: &ParamStore, coords: usize, seed: u64, loss: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut store = store.clone();
    store.zero_grad();
    let mut g = Graph::new();
    let out = loss(&mut g, &store).unwrap();
    g.backward(out, &mut store).unwrap();
    let ids: Vec<_> = store.ids().collect();
    let mut rng = SeedStream::new(seed).child("param-gradcheck").rng();
    let value = |s: &ParamStore| {
        let mut g = Graph::new();
        let out = loss(&mut g, s).unwrap();
        g.scalar(out)
    };
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..store.get(id).len());
        let analytic = store.get(id).grad().map_or(0.0, |gr| gr[j]);
        let mut plus = store.clone();
        plus.get_mut(id).data_mut()[j] += FD_STEP;
        let mut minus = store.clone();
        minus.get_mut(id).data_mut()[j] -= FD_STEP;
        let fd = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic, fd));
    }
    worst
}

/// `Σ_i w_i x_i` with fixed pseudo-random weights, reducing any tensor to a
/// scalar whose gradient exercises every element.
pub fn readout(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let wv = g.constant(shape, w)?;
    let p = g.mul(x, wv)?;
    Ok(g.sum(p))
}

/// Brute-force expectile: grid minimizer of `Σ |m − 1(y < q)| (y − q)²`.
pub fn expectile_by_grid(values: &[f64], m: f64, step: f64) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best = (f64::INFINITY, lo);
    let n = ((hi - lo) / step).ceil() as usize;
    for i in 0..=n {
        let q = (lo + i as f64 * step).min(hi);
        let loss: f64 = values
            .iter()
            .map(|&y| {
                let d = y - q;
                let w = if d < 0.0 { 1.0 - m } else { m };
                w * d * d
            })
            .sum();
        if loss < best.0 {
            best = (loss, q);
        }
    }
    best.1
}

/// A CVAE whose decoder is linear with diagonal latent loadings and whose
/// encoder outputs the exact Gaussian posterior, so every importance
/// weight equals the log-marginal.
pub struct LinearGaussian {
    pub model: CvaeModel,
    loadings: [f64; 2],
    state_w: [[f64; 2]; 2],
    action_w: Vec<[f64; 2]>,
    bias: [f64; 2],
}

impl LinearGaussian {
    pub fn new(seed: u64) -> Self {
        let env = MazeEnv::builtin(LayoutId::Gridworld5).unwrap();
        let mut arch = CvaeArch::for_env(&env);
        arch.hidden = vec![];
        arch.latent_dim = 2;
        arch.sigma_dec = 0.3;
        let mut model = CvaeModel::new(arch, seed).unwrap();
        let mut rng = SeedStream::new(seed).child("linear-gaussian").rng();
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let loadings = [u(0.3, 1.2), u(0.3, 1.2)];
        let state_w = [[u(-0.5, 0.5), u(-0.5, 0.5)], [u(-0.5, 0.5), u(-0.5, 0.5)]];
        let na = model.arch.n_actions;
        let action_w: Vec<[f64; 2]> = (0..na).map(|_| [u(-0.5, 0.5), u(-0.5, 0.5)]).collect();
        let bias = [u(-0.3, 0.3), u(-0.3, 0.3)];
        let sn2 = (model.arch.sigma_dec / model.arch.scale).powi(2);

        // Decoder input rows: [z0, z1, s0, s1, onehot...]; outputs g_norm.
        let dec = model.decoder().layers[0].clone();
        let w = model.store.get_mut(dec.weight).data_mut();
        w.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..2 {
            w[k * 2 + k] = loadings[k];
            for i in 0..2 {
                w[(2 + i) * 2 + k] = state_w[i][k];
            }
            for (a, aw) in action_w.iter().enumerate() {
                w[(4 + a) * 2 + k] = aw[k];
            }
        }
        model.store.get_mut(dec.bias).data_mut().copy_from_slice(&bias);

        // Encoder input rows: [s0, s1, onehot..., g0, g1]; outputs [mu0, mu1, lv0, lv1].
        let enc = model.encoder().layers[0].clone();
        let w = model.store.get_mut(enc.weight).data_mut();
        w.iter_mut().for_each(|x| *x = 0.0);
        let mut eb = [0.0; 4];
        for k in 0..2 {
            let precision = 1.0 + loadings[k] * loadings[k] / sn2;
            let kappa = loadings[k] / (sn2 * precision);
            w[(2 + na + k) * 4 + k] = kappa;
            for i in 0..2 {
                w[i * 4 + k] = -kappa * state_w[i][k];
            }
            for (a, aw) in action_w.iter().enumerate() {
                w[(2 + a) * 4 + k] = -kappa * aw[k];
            }
            eb[k] = -kappa * bias[k];
            eb[2 + k] = -precision.ln();
        }
        model.store.get_mut(enc.bias).data_mut().copy_from_slice(&eb);
        LinearGaussian {
            model,
            loadings,
            state_w,
            action_w,
            bias,
        }
    }

    /// Closed-form `log p(g | s, a)` in raw goal coordinates.
    pub fn log_marginal(&self, s: &[f64], a: usize, g: &[f64]) -> f64 {
        let arch = &self.model.arch;
        let sn: Vec<f64> = s
            .iter()
            .zip(&arch.obs_offset)
            .map(|(x, o)| (x - o) / arch.scale)
            .collect();
        (0..2)
            .map(|k| {
                let c = self.bias[k] + self.action_w[a][k] + sn[0] * self.state_w[0][k] + sn[1] * self.state_w[1][k];
                let mean = arch.scale * c + arch.goal_offset[k];
                let var =
                    arch.scale * arch.scale * self.loadings[k] * self.loadings[k] + arch.sigma_dec * arch.sigma_dec;
                -0.5 * ((g[k] - mean).powi(2) / var + var.ln() + (2.0 * std::f64::consts::PI).ln())
            })
            .sum()
    }
}

/// `(1 − γ) Σ_{t ≤ horizon} γᵗ T0 Tᵗ`, row-major `[S, A, S]`.
pub fn occupancy_power_series(t0: &[f64], t: &[f64], n: usize, na: usize, gamma: f64, horizon: usize) -> Vec<f64> {
    let mut term = t0.to_vec();
    let mut acc = vec![0.0; term.len()];
    let mut w = 1.0 - gamma;
    for _ in 0..=horizon {
        acc.iter_mut().zip(&term).for_each(|(a, x)| *a += w * x);
        let mut next = vec![0.0; term.len()];
        for r in 0..n * na {
            for (k, &x) in term[r * n..(r + 1) * n].iter().enumerate() {
                if x != 0.0 {
                    for (o, &y) in next[r * n..(r + 1) * n].iter_mut().zip(&t[k * n..(k + 1) * n]) {
                        *o += x * y;
                    }
                }
            }
        }
        term = next;
        w *= gamma;
    }
    acc
}
