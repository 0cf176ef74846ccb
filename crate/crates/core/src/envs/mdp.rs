//! Exact tabular view of a grid layout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::{Cell, MazeSpec};
use crate::rng::SeedStream;
use crate::{Error, Result};

/// Finite MDP with an explicit `[state, action, next]` kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    kernel: Vec<f64>,
    /// Cell of each state index, when the MDP comes from a grid.
    pub cells: Vec<Cell>,
}

impl FiniteMdp {
    pub fn from_kernel(n_states: usize, n_actions: usize, kernel: Vec<f64>) -> Result<Self> {
        if kernel.len() != n_states * n_actions * n_states {
            return Err(Error::shape("kernel size must be S*A*S"));
        }
        for (i, row) in kernel.chunks(n_states).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                return Err(Error::invalid(format!(
                    "kernel row (s={}, a={}) is not a distribution (sum {sum})",
                    i / n_actions,
                    i % n_actions
                )));
            }
        }
        Ok(FiniteMdp {
            n_states,
            n_actions,
            kernel,
            cells: Vec::new(),
        })
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.kernel[(s * self.n_actions + a) * self.n_states + next]
    }

    /// Distribution over next states for `(s, a)`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.n_actions + a) * self.n_states;
        &self.kernel[off..off + self.n_states]
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }
}

/// Tabular transition kernel of a grid; deterministic moves, blocked moves
/// self-loop.
pub fn enumerate_mdp(spec: &MazeSpec) -> FiniteMdp {
    let n = spec.num_states();
    let na = spec.actions.len();
    let mut kernel = vec![0.0; n * na * n];
    for (s, &c) in spec.free_cells().iter().enumerate() {
        for a in 0..na {
            let next = spec.state_index(spec.successor(c, a)).expect("successor is free");
            kernel[(s * na + a) * n + next] = 1.0;
        }
    }
    FiniteMdp {
        n_states: n,
        n_actions: na,
        kernel,
        cells: spec.free_cells().to_vec(),
    }
}

/// Stochastic tabular policy `π(a|s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_states: usize,
    pub n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != n_states * n_actions {
            return Err(Error::shape("policy table must be S*A"));
        }
        for (s, row) in probs.chunks(n_actions).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "policy row {s} is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(TabularPolicy {
            n_states,
            n_actions,
            probs,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Rows drawn from a symmetric Dirichlet(1).
    pub fn dirichlet(n_states: usize, n_actions: usize, seed: u64) -> Self {
        let mut rng = SeedStream::new(seed).child("dirichlet").rng();
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            let draws: Vec<f64> = (0..n_actions).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let z: f64 = draws.iter().sum();
            probs.extend(draws.iter().map(|d| d / z));
        }
        TabularPolicy {
            n_states,
            n_actions,
            probs,
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn set_row(&mut self, s: usize, row: &[f64]) -> Result<()> {
        let sum: f64 = row.iter().sum();
        if row.len() != self.n_actions || row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("policy row must be a distribution"));
        }
        self.probs[s * self.n_actions..(s + 1) * self.n_actions].copy_from_slice(row);
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in self.row(s).iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        self.n_actions - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::layout::LayoutId;

    #[test]
    fn grid_kernels_are_stochastic() {
        for id in LayoutId::BUILTIN {
            let spec = MazeSpec::builtin(id).unwrap();
            let mdp = enumerate_mdp(&spec);
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let sum: f64 = mdp.row(s, a).iter().sum();
                    assert!((sum - 1.0).abs() <= 1e-12);
                    assert!(mdp.row(s, a).iter().all(|p| *p == 0.0 || *p == 1.0));
                }
            }
        }
    }

    #[test]
    fn table_sizes() {
        let mdp = enumerate_mdp(&MazeSpec::builtin(LayoutId::ExampleMdp).unwrap());
        assert_eq!((mdp.n_states, mdp.n_actions), (6, 2));
        let gw = enumerate_mdp(&MazeSpec::builtin(LayoutId::Gridworld5).unwrap());
        assert_eq!((gw.n_states, gw.n_actions), (25, 4));
    }

    #[test]
    fn policies_validate() {
        assert!(TabularPolicy::new(1, 2, vec![0.5, 0.6]).is_err());
        assert!(TabularPolicy::new(1, 2, vec![-0.5, 1.5]).is_err());
        let p = TabularPolicy::dirichlet(25, 4, 3);
        for s in 0..25 {
            assert!((p.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(FiniteMdp::from_kernel(1, 1, vec![0.5]).is_err());
    }
}
