//! Grid environments with a known state-to-goal mapping.
//!
//! The goal space is the cell space: `φ(s)` maps an observation to the
//! coordinates of the cell it lies in, discarding observation noise.

pub mod layout;
pub mod maze;
pub mod mdp;

pub use layout::{ActionSet, Cell, LayoutId, MazeSpec, DOWN, LEFT, RIGHT, UP};
pub use maze::{cell_of_goal, goal_of_observation, EnvState, MazeEnv, StepOutcome};
pub use mdp::{enumerate_mdp, FiniteMdp, TabularPolicy};
