//! Exact tabular occupancy measures and goal-conditioned Q-functions.
//!
//! For a policy `π` on a finite MDP, `T[s, s'] = Σ_a π(a|s) p(s'|s,a)` and
//! `T0[s, a, s'] = p(s'|s,a)`. The discounted future-state distribution
//! starting one step after `(s, a)` is `P = (1 − γ) T0 (I − γT)^{-1}`.
//!
//! With the reward `r(s,a,g) = (1 − γ) γ p(s' = g | s,a)` the Q-function is
//! `Q[s,a,g] = γ P[s,a,g]`; see [`theorem1_gap`].

mod linalg;

pub use linalg::Lu;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::envs::{FiniteMdp, TabularPolicy};
use crate::{Error, Result};

const KL_FLOOR: f64 = 1e-12;

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("gamma {gamma} outside (0, 1)")))
    }
}

/// Tabular dynamics under a fixed policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrices {
    pub n_states: usize,
    pub n_actions: usize,
    /// `[S, S]` state-to-state kernel.
    pub t: Vec<f64>,
    /// `[S, A, S]` state-action-to-state kernel.
    pub t0: Vec<f64>,
}

pub fn build_matrices(mdp: &FiniteMdp, policy: &TabularPolicy) -> Result<Matrices> {
    let (n, na) = (mdp.n_states, mdp.n_actions);
    if policy.n_states != n || policy.n_actions != na {
        return Err(Error::shape("policy table does not match the MDP"));
    }
    for s in 0..n {
        let row = policy.row(s);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("policy row {s} is not stochastic")));
        }
    }
    let t0 = mdp.kernel().to_vec();
    let mut t = vec![0.0; n * n];
    for s in 0..n {
        for a in 0..na {
            let p = policy.prob(s, a);
            if p == 0.0 {
                continue;
            }
            for (dst, k) in t[s * n..(s + 1) * n].iter_mut().zip(mdp.row(s, a)) {
                *dst += p * k;
            }
        }
    }
    Ok(Matrices {
        n_states: n,
        n_actions: na,
        t,
        t0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTable {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    /// `[S, A, S]`.
    pub p: Vec<f64>,
}

impl OccupancyTable {
    pub fn get(&self, s: usize, a: usize, future: usize) -> f64 {
        self.p[(s * self.n_actions + a) * self.n_states + future]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.n_actions + a) * self.n_states;
        &self.p[off..off + self.n_states]
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_table_csv(
            w,
            ["state", "action", "future", "p"],
            self.n_states,
            self.n_actions,
            &self.p,
        )
    }
}

/// `P = (1 − γ) T0 (I − γT)^{-1}` via an LU solve.
pub fn analytic_occupancy(m: &Matrices, gamma: f64) -> Result<OccupancyTable> {
    check_gamma(gamma)?;
    let n = m.n_states;
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = f64::from(u8::from(i == j)) - gamma * m.t[i * n + j];
        }
    }
    let inv = Lu::factor(&a, n)?.inverse();
    let mut p = vec![0.0; m.t0.len()];
    for (row, out) in m.t0.chunks(n).zip(p.chunks_mut(n)) {
        for (k, &w) in row.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(&inv[k * n..(k + 1) * n]) {
                *o += (1.0 - gamma) * w * x;
            }
        }
    }
    Ok(OccupancyTable {
        n_states: n,
        n_actions: m.n_actions,
        gamma,
        p,
    })
}

/// `Q[s, a, g]` for every goal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    pub n_states: usize,
    pub n_actions: usize,
    pub goals: Vec<usize>,
    /// `[S, A, goals.len()]`.
    pub q: Vec<f64>,
    pub iterations: usize,
}

impl TabularQ {
    pub fn get(&self, s: usize, a: usize, goal_slot: usize) -> f64 {
        self.q[(s * self.n_actions + a) * self.goals.len() + goal_slot]
    }

    /// `[S, A]` slice for one goal slot.
    pub fn slice(&self, goal_slot: usize) -> Vec<f64> {
        let ng = self.goals.len();
        self.q.iter().skip(goal_slot).step_by(ng).copied().collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["state", "action", "goal", "q"])?;
        let ng = self.goals.len();
        for (i, v) in self.q.iter().enumerate() {
            let s = i / (self.n_actions * ng);
            let a = (i / ng) % self.n_actions;
            let g = self.goals[i % ng];
            wtr.serialize((s, a, g, v))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

const MAX_ITERATIONS: usize = 1_000_000;

/// Bellman evaluation with reward `(1 − γ) γ p(s' = g | s,a)` for each goal
/// in `goals`, iterated until the sup-norm update falls below `1e-12`.
pub fn policy_eval_q_goals(mdp: &FiniteMdp, policy: &TabularPolicy, gamma: f64, goals: &[usize]) -> Result<TabularQ> {
    check_gamma(gamma)?;
    let m = build_matrices(mdp, policy)?;
    let (n, na, ng) = (m.n_states, m.n_actions, goals.len());
    if let Some(g) = goals.iter().find(|g| **g >= n) {
        return Err(Error::invalid(format!("goal state {g} out of range")));
    }
    // Sparse kernel rows.
    let rows: Vec<Vec<(usize, f64)>> =
        m.t0.chunks(n)
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, p)| **p != 0.0)
                    .map(|(k, p)| (k, *p))
                    .collect()
            })
            .collect();
    let mut reward = vec![0.0; n * na * ng];
    for (sa, row) in rows.iter().enumerate() {
        for (gi, &g) in goals.iter().enumerate() {
            let p: f64 = row.iter().filter(|(k, _)| *k == g).map(|(_, p)| p).sum();
            reward[sa * ng + gi] = (1.0 - gamma) * gamma * p;
        }
    }
    let mut q = reward.clone();
    let mut v = vec![0.0; n * ng];
    for it in 1..=MAX_ITERATIONS {
        v.iter_mut().for_each(|x| *x = 0.0);
        for s in 0..n {
            for a in 0..na {
                let p = policy.prob(s, a);
                if p == 0.0 {
                    continue;
                }
                let src = &q[(s * na + a) * ng..(s * na + a + 1) * ng];
                for (dst, x) in v[s * ng..(s + 1) * ng].iter_mut().zip(src) {
                    *dst += p * x;
                }
            }
        }
        let mut residual = 0.0f64;
        for (sa, row) in rows.iter().enumerate() {
            let out = &mut q[sa * ng..(sa + 1) * ng];
            let r = &reward[sa * ng..(sa + 1) * ng];
            for gi in 0..ng {
                let mut acc = 0.0;
                for &(k, p) in row {
                    acc += p * v[k * ng + gi];
                }
                let new = r[gi] + gamma * acc;
                residual = residual.max((new - out[gi]).abs());
                out[gi] = new;
            }
        }
        if residual < 1e-12 {
            return Ok(TabularQ {
                n_states: n,
                n_actions: na,
                goals: goals.to_vec(),
                q,
                iterations: it,
            });
        }
    }
    Err(Error::numerical(
        "policy_eval_q",
        format!("no convergence within {MAX_ITERATIONS} iterations"),
    ))
}

/// Single-goal `[S, A]` slice of the Q-function.
pub fn policy_eval_q(mdp: &FiniteMdp, policy: &TabularPolicy, gamma: f64, goal: usize) -> Result<Vec<f64>> {
    Ok(policy_eval_q_goals(mdp, policy, gamma, &[goal])?.q)
}

/// Every goal state at once.
pub fn policy_eval_q_all(mdp: &FiniteMdp, policy: &TabularPolicy, gamma: f64) -> Result<TabularQ> {
    let goals: Vec<usize> = (0..mdp.n_states).collect();
    policy_eval_q_goals(mdp, policy, gamma, &goals)
}

/// `max |Q[s,a,g] − γ P[s,a,g]|` over all states, actions and goals.
pub fn theorem1_gap(q: &TabularQ, occ: &OccupancyTable) -> Result<f64> {
    if q.n_states != occ.n_states || q.n_actions != occ.n_actions {
        return Err(Error::shape("Q and occupancy tables differ in size"));
    }
    let mut gap = 0.0f64;
    for s in 0..q.n_states {
        for a in 0..q.n_actions {
            for (gi, &g) in q.goals.iter().enumerate() {
                gap = gap.max((q.get(s, a, gi) - occ.gamma * occ.get(s, a, g)).abs());
            }
        }
    }
    Ok(gap)
}

/// Undiscounted probability of ever entering `goal` after taking `a` in `s`,
/// as an `[S, A]` table.
pub fn reachability(mdp: &FiniteMdp, policy: &TabularPolicy, goal: usize) -> Result<Vec<f64>> {
    let m = build_matrices(mdp, policy)?;
    let n = m.n_states;
    if goal >= n {
        return Err(Error::invalid(format!("goal state {goal} out of range")));
    }
    // States with a positive-probability path to the goal.
    let mut can = vec![false; n];
    can[goal] = true;
    loop {
        let mut changed = false;
        for s in 0..n {
            if !can[s] && (0..n).any(|k| can[k] && m.t[s * n + k] > 0.0) {
                can[s] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    // Hitting probabilities h on the transient set C = can \ {goal}:
    // (I − T_CC) h_C = T_{C,goal}.
    let idx: Vec<usize> = (0..n).filter(|&s| can[s] && s != goal).collect();
    let c = idx.len();
    let mut h = vec![0.0; n];
    h[goal] = 1.0;
    if c > 0 {
        let mut a = vec![0.0; c * c];
        let mut b = vec![0.0; c];
        for (i, &s) in idx.iter().enumerate() {
            for (j, &k) in idx.iter().enumerate() {
                a[i * c + j] = f64::from(u8::from(i == j)) - m.t[s * n + k];
            }
            b[i] = m.t[s * n + goal];
        }
        Lu::factor(&a, c)?.solve_in_place(&mut b);
        for (i, &s) in idx.iter().enumerate() {
            h[s] = b[i];
        }
    }
    Ok(m.t0
        .chunks(n)
        .map(|row| row.iter().zip(&h).map(|(p, x)| p * x).sum())
        .collect())
}

/// Mean over `(s, a)` of `Σ_{s'} P log(P / Q̂)`. Estimates are floored at
/// `1e-12` and each row is renormalized to a distribution.
pub fn forward_kl(p: &OccupancyTable, qhat: &[f64]) -> Result<f64> {
    let n = p.n_states;
    if qhat.len() != p.p.len() {
        return Err(Error::shape("estimate table does not match the occupancy table"));
    }
    if let Some(x) = qhat.iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::invalid(format!("negative or NaN density estimate {x}")));
    }
    let rows = p.n_states * p.n_actions;
    let mut total = 0.0;
    for (prow, qrow) in p.p.chunks(n).zip(qhat.chunks(n)) {
        let z: f64 = qrow.iter().map(|q| q.max(KL_FLOOR)).sum();
        for (&pi, &qi) in prow.iter().zip(qrow) {
            if pi > 0.0 {
                total += pi * (pi / (qi.max(KL_FLOOR) / z)).ln();
            }
        }
    }
    Ok(total / rows as f64)
}

fn write_table_csv<W: Write>(w: W, header: [&str; 4], n_states: usize, n_actions: usize, values: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(header)?;
    for (i, v) in values.iter().enumerate() {
        let s = i / (n_actions * n_states);
        let a = (i / n_states) % n_actions;
        wtr.serialize((s, a, i % n_states, v))?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{enumerate_mdp, LayoutId, MazeSpec, RIGHT, UP};

    fn cycle() -> FiniteMdp {
        // a <-> b under the single action.
        FiniteMdp::from_kernel(2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn two_state_cycle() {
        let m = build_matrices(&cycle(), &TabularPolicy::uniform(2, 1)).unwrap();
        assert_eq!(m.t, vec![0.0, 1.0, 1.0, 0.0]);
        let occ = analytic_occupancy(&m, 0.5).unwrap();
        assert!((occ.get(0, 0, 1) - 2.0 / 3.0).abs() < 1e-14);
        assert!((occ.get(0, 0, 0) - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn absorbing_state_keeps_all_mass() {
        let mdp = FiniteMdp::from_kernel(2, 1, vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let m = build_matrices(&mdp, &TabularPolicy::uniform(2, 1)).unwrap();
        let occ = analytic_occupancy(&m, 0.9).unwrap();
        assert!((occ.get(1, 0, 1) - 1.0).abs() < 1e-12);
        assert!((occ.get(0, 0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gridworld_shapes() {
        let mdp = enumerate_mdp(&MazeSpec::builtin(LayoutId::Gridworld5).unwrap());
        let m = build_matrices(&mdp, &TabularPolicy::uniform(25, 4)).unwrap();
        assert_eq!(m.t.len(), 25 * 25);
        assert_eq!(m.t0.len(), 25 * 4 * 25);
        let occ = analytic_occupancy(&m, 0.95).unwrap();
        for s in 0..25 {
            for a in 0..4 {
                assert!((occ.row(s, a).iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn example_reachability_matches_figure() {
        let spec = MazeSpec::builtin(LayoutId::ExampleMdp).unwrap();
        let mdp = enumerate_mdp(&spec);
        let idx = |c: char| spec.state_index(spec.label(c).unwrap()).unwrap();
        let pi = TabularPolicy::uniform(mdp.n_states, 2);
        let r = reachability(&mdp, &pi, idx('G')).unwrap();
        assert!((r[idx('0') * 2 + UP] - 0.5).abs() < 1e-15);
        assert_eq!(r[idx('0') * 2 + RIGHT], 0.0);
    }

    #[test]
    fn unreachable_goal_has_zero_q() {
        // Nothing ever enters state 0.
        let mdp = FiniteMdp::from_kernel(3, 1, vec![0., 1., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let q = policy_eval_q(&mdp, &TabularPolicy::uniform(3, 1), 0.9, 0).unwrap();
        assert!(q.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn theorem1_on_example() {
        let spec = MazeSpec::builtin(LayoutId::ExampleMdp).unwrap();
        let mdp = enumerate_mdp(&spec);
        let pi = TabularPolicy::uniform(mdp.n_states, 2);
        let occ = analytic_occupancy(&build_matrices(&mdp, &pi).unwrap(), 0.9).unwrap();
        let q = policy_eval_q_all(&mdp, &pi, 0.9).unwrap();
        assert!(theorem1_gap(&q, &occ).unwrap() < 1e-8);
    }

    #[test]
    fn kl_identities() {
        let mdp = enumerate_mdp(&MazeSpec::builtin(LayoutId::Gridworld5).unwrap());
        let pi = TabularPolicy::dirichlet(25, 4, 1);
        let occ = analytic_occupancy(&build_matrices(&mdp, &pi).unwrap(), 0.9).unwrap();
        assert!(forward_kl(&occ, &occ.p).unwrap().abs() < 1e-12);
        assert!(forward_kl(&occ, &vec![1.0; occ.p.len()]).unwrap() > 0.0);
        let mut bad = occ.p.clone();
        bad[0] = -1.0;
        assert!(forward_kl(&occ, &bad).is_err());
    }

    #[test]
    fn non_stochastic_policy_rejected() {
        let mut pi = TabularPolicy::uniform(2, 1);
        assert!(pi.set_row(0, &[0.5]).is_err());
        pi = TabularPolicy::uniform(3, 1);
        assert!(build_matrices(&cycle(), &pi).is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_entry() {
        let m = build_matrices(&cycle(), &TabularPolicy::uniform(2, 1)).unwrap();
        let occ = analytic_occupancy(&m, 0.5).unwrap();
        let mut buf = Vec::new();
        occ.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("state,action,future,p"));
    }
}
