use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::layout::{Cell, LayoutId, MazeSpec};
use crate::rng::SeedStream;
use crate::{Error, Result};

/// Goal-space image of an observation: the coordinates of its cell.
pub fn goal_of_observation(obs: &[f64]) -> [f64; 2] {
    [obs[0].round(), obs[1].round()]
}

/// Cell whose coordinates equal a goal-space point, if any.
pub fn cell_of_goal(goal: &[f64]) -> Option<Cell> {
    let (x, y) = (goal[0], goal[1]);
    if x < 0.0 || y < 0.0 || x.fract() != 0.0 || y.fract() != 0.0 {
        return None;
    }
    Some(Cell::new(x as usize, y as usize))
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub cell: Cell,
    /// Observation noise offsets in `[-0.5, 0.5)`; zero for noiseless layouts.
    pub noise: [f64; 2],
    pub step: usize,
    pub goal: Cell,
    pub done: bool,
    rng: ChaCha8Rng,
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        let [x, y] = self.cell.coords();
        vec![x + self.noise[0], y + self.noise[1]]
    }

    pub fn goal_point(&self) -> [f64; 2] {
        self.goal.coords()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Episodic wrapper around a [`MazeSpec`].
#[derive(Debug, Clone)]
pub struct MazeEnv {
    pub spec: MazeSpec,
    pub horizon: usize,
    pub noisy: bool,
    /// End the episode when the goal cell is entered.
    pub terminate_on_goal: bool,
}

impl MazeEnv {
    pub fn new(spec: MazeSpec) -> Self {
        let layout = spec.layout;
        MazeEnv {
            spec,
            horizon: layout.default_horizon(),
            noisy: layout == LayoutId::Gridworld5,
            terminate_on_goal: true,
        }
    }

    pub fn builtin(layout: LayoutId) -> Result<Self> {
        Ok(Self::new(MazeSpec::builtin(layout)?))
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn num_actions(&self) -> usize {
        self.spec.actions.len()
    }

    pub fn obs_dim(&self) -> usize {
        2
    }

    fn draw_noise(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        if self.noisy {
            [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]
        } else {
            [0.0, 0.0]
        }
    }

    /// Starts an episode. Unspecified start/goal are drawn uniformly over
    /// free cells with `start != goal`.
    pub fn reset(&self, seed: u64, start: Option<Cell>, goal: Option<Cell>) -> Result<(EnvState, Vec<f64>, [f64; 2])> {
        for c in [start, goal].into_iter().flatten() {
            if !self.spec.is_free(c) {
                return Err(Error::invalid(format!("cell {c} is not free")));
            }
        }
        let mut rng = SeedStream::new(seed).child("env").rng();
        let free = self.spec.free_cells();
        let pick = |rng: &mut ChaCha8Rng, avoid: Option<Cell>| loop {
            let c = free[rng.random_range(0..free.len())];
            if Some(c) != avoid {
                break c;
            }
        };
        let (start, goal) = match (start, goal) {
            (Some(s), Some(g)) => (s, g),
            (Some(s), None) => (s, pick(&mut rng, Some(s))),
            (None, Some(g)) => (pick(&mut rng, Some(g)), g),
            (None, None) => {
                let s = pick(&mut rng, None);
                (s, pick(&mut rng, Some(s)))
            }
        };
        let noise = self.draw_noise(&mut rng);
        let state = EnvState {
            cell: start,
            noise,
            step: 0,
            goal,
            done: false,
            rng,
        };
        let obs = state.observation();
        let g = state.goal_point();
        Ok((state, obs, g))
    }

    pub fn step(&self, state: &mut EnvState, action: usize) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::invalid("step called on a finished episode"));
        }
        if action >= self.num_actions() {
            return Err(Error::invalid(format!(
                "action {action} out of range for {} actions",
                self.num_actions()
            )));
        }
        state.cell = self.spec.successor(state.cell, action);
        state.noise = self.draw_noise(&mut state.rng);
        state.step += 1;
        let reached = state.cell == state.goal;
        let reward = if reached { 1.0 } else { 0.0 };
        state.done = (reached && self.terminate_on_goal) || state.step >= self.horizon;
        Ok(StepOutcome {
            observation: state.observation(),
            reward,
            done: state.done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::layout::{RIGHT, UP};

    #[test]
    fn reset_is_deterministic() {
        let env = MazeEnv::builtin(LayoutId::Gridworld5).unwrap();
        let (_, o1, g1) = env.reset(4, Some(Cell::new(2, 2)), Some(Cell::new(4, 4))).unwrap();
        let (_, o2, g2) = env.reset(4, Some(Cell::new(2, 2)), Some(Cell::new(4, 4))).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(g1, g2);
        let (s, _, _) = env.reset(9, None, None).unwrap();
        assert_ne!(s.cell, s.goal);
    }

    #[test]
    fn gridworld_noise_is_within_half_cell() {
        let env = MazeEnv::builtin(LayoutId::Gridworld5).unwrap();
        for seed in 0..200 {
            let (mut s, obs, _) = env.reset(seed, None, None).unwrap();
            let c = s.cell.coords();
            assert!((obs[0] - c[0]).abs() <= 0.5 && (obs[1] - c[1]).abs() <= 0.5);
            assert_eq!(goal_of_observation(&obs), c);
            let out = env.step(&mut s, (seed % 4) as usize).unwrap();
            assert_eq!(goal_of_observation(&out.observation), s.cell.coords());
        }
    }

    #[test]
    fn wall_cells_rejected() {
        let env = MazeEnv::builtin(LayoutId::Umaze).unwrap();
        assert!(env.reset(0, Some(Cell::new(0, 0)), None).is_err());
        assert!(env.reset(0, None, Some(Cell::new(1, 2))).is_err());
    }

    #[test]
    fn example_mdp_second_trajectory_reaches_goal() {
        let env = MazeEnv::builtin(LayoutId::ExampleMdp).unwrap();
        let s = |c: char| env.spec.label(c).unwrap();
        let (mut st, obs, g) = env.reset(0, Some(s('1')), Some(s('G'))).unwrap();
        assert_eq!(obs, s('1').coords().to_vec());
        assert_eq!(g, s('G').coords());
        let first = env.step(&mut st, RIGHT).unwrap();
        assert_eq!(st.cell, s('2'));
        assert!(!first.done);
        let second = env.step(&mut st, UP).unwrap();
        assert_eq!(second.reward, 1.0);
        assert!(second.done);
        assert!(env.step(&mut st, UP).is_err());
    }

    #[test]
    fn horizon_ends_episode_without_reward() {
        let env = MazeEnv::builtin(LayoutId::Gridworld5).unwrap();
        assert_eq!(env.horizon, 100);
        let (mut st, _, _) = env.reset(1, Some(Cell::new(1, 1)), Some(Cell::new(5, 5))).unwrap();
        let mut last = None;
        for _ in 0..100 {
            last = Some(env.step(&mut st, UP).unwrap());
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.reward, 0.0);
    }

    #[test]
    fn same_actions_same_trajectory() {
        let env = MazeEnv::builtin(LayoutId::Gridworld5).unwrap();
        let run = || {
            let (mut st, o, _) = env.reset(77, None, None).unwrap();
            let mut obs = vec![o];
            for a in [0, 1, 1, 2, 3, 3, 2] {
                obs.push(env.step(&mut st, a).unwrap().observation);
                if st.done {
                    break;
                }
            }
            obs
        };
        assert_eq!(run(), run());
    }
}
