//! Boat navigation in a river with state-dependent drift.
//!
//! State `x = (x1, x2)` in `X = [-3, 2] × [-2, 2]`, action `a` in the closed
//! unit disk, explicit Euler dynamics
//!
//! ```text
//! x1' = x1 + (a1 + 2 - 0.5·x2²)·dt
//! x2' = x2 + a2·dt
//! ```
//!
//! Two circular obstacles define the failure set `{ℓ(x) > 0}`; the reward is
//! the negative scaled distance to the goal. States are never clamped while
//! stepping, and episodes run to a fixed horizon.

mod dataset;

pub use dataset::{
    generate_dataset, sidecar_path, DatasetMeta, TrajectoryDataset, Transition, DATASET_MAGIC, DATASET_VERSION,
    RECORD_LEN,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATE_DIM: usize = 2;
pub const ACTION_DIM: usize = 2;

pub const X1_BOUNDS: (f64, f64) = (-3.0, 2.0);
pub const X2_BOUNDS: (f64, f64) = (-2.0, 2.0);

pub const GOAL: (f64, f64) = (0.5, 0.0);
pub const REWARD_SCALE: f64 = 0.1;

/// `(center, radius)` of each circular obstacle.
pub const OBSTACLES: [((f64, f64), f64); 2] = [((-0.5, 0.5), 0.4), ((-1.0, -1.2), 0.5)];

pub const DEFAULT_DT: f64 = 0.005;
pub const DEFAULT_HORIZON: usize = 400;
pub const DEFAULT_N_TRAJ: usize = 2500;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoatState {
    pub x1: f64,
    pub x2: f64,
}

impl BoatState {
    pub const fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    pub fn in_bounds(&self) -> bool {
        (X1_BOUNDS.0..=X1_BOUNDS.1).contains(&self.x1) && (X2_BOUNDS.0..=X2_BOUNDS.1).contains(&self.x2)
    }

    pub fn to_f32(self) -> [f32; STATE_DIM] {
        [self.x1 as f32, self.x2 as f32]
    }

    pub fn from_f32(v: &[f32]) -> Self {
        Self::new(v[0] as f64, v[1] as f64)
    }

    pub fn sample_uniform<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self::new(
            rng.random_range(X1_BOUNDS.0..=X1_BOUNDS.1),
            rng.random_range(X2_BOUNDS.0..=X2_BOUNDS.1),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoatAction {
    pub a1: f64,
    pub a2: f64,
}

impl BoatAction {
    pub const ZERO: BoatAction = BoatAction { a1: 0.0, a2: 0.0 };

    pub const fn new(a1: f64, a2: f64) -> Self {
        Self { a1, a2 }
    }

    pub fn norm(&self) -> f64 {
        self.a1.hypot(self.a2)
    }

    pub fn is_admissible(&self) -> bool {
        self.a1 * self.a1 + self.a2 * self.a2 <= 1.0
    }

    /// Radial projection onto the unit disk.
    pub fn projected(self) -> Self {
        let n = self.norm();
        if n > 1.0 {
            Self::new(self.a1 / n, self.a2 / n)
        } else {
            self
        }
    }

    pub fn to_f32(self) -> [f32; ACTION_DIM] {
        [self.a1 as f32, self.a2 as f32]
    }

    pub fn from_f32(v: &[f32]) -> Self {
        Self::new(v[0] as f64, v[1] as f64)
    }
}

pub fn dynamics_step(state: BoatState, action: BoatAction, dt: f64) -> Result<BoatState> {
    let finite = [state.x1, state.x2, action.a1, action.a2, dt]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::Numeric {
            layer: 0,
            context: "boat dynamics input",
        });
    }
    Ok(step_unchecked(state, action, dt))
}

#[inline]
pub(crate) fn step_unchecked(s: BoatState, a: BoatAction, dt: f64) -> BoatState {
    BoatState::new(
        s.x1 + (a.a1 + 2.0 - 0.5 * s.x2 * s.x2) * dt,
        s.x2 + a.a2 * dt,
    )
}

pub fn reward(state: BoatState) -> f64 {
    -REWARD_SCALE * (state.x1 - GOAL.0).hypot(state.x2 - GOAL.1)
}

/// Signed safety margin: positive inside an obstacle.
pub fn safety_margin(state: BoatState) -> f64 {
    OBSTACLES
        .iter()
        .map(|&((c1, c2), r)| r - (state.x1 - c1).hypot(state.x2 - c2))
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn in_failure_set(state: BoatState) -> bool {
    safety_margin(state) > 0.0
}

/// Uniform over the closed unit disk, by rejection from the square.
pub fn sample_disk_action<R: Rng + ?Sized>(rng: &mut R) -> BoatAction {
    loop {
        let a = BoatAction::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        if a.is_admissible() {
            return a;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `horizon + 1` states starting at `x0`.
    pub states: Vec<BoatState>,
    pub actions: Vec<BoatAction>,
    /// Reward of each visited state, `horizon + 1` entries.
    pub rewards: Vec<f64>,
    pub margins: Vec<f64>,
    /// Sum of rewards over the `horizon` decision steps.
    pub cumulative_reward: f64,
    /// Number of visited states with `ℓ > 0`.
    pub violations: usize,
    pub max_margin: f64,
    /// Whether the trajectory left `X` at some point.
    pub left_bounds: bool,
}

/// Runs `policy` for `horizon` steps. Inadmissible actions are projected onto
/// the unit disk before stepping.
pub fn rollout<P>(mut policy: P, x0: BoatState, horizon: usize, dt: f64) -> Trajectory
where
    P: FnMut(BoatState) -> BoatAction,
{
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    states.push(x0);
    let mut x = x0;
    for _ in 0..horizon {
        let a = policy(x).projected();
        x = step_unchecked(x, a, dt);
        actions.push(a);
        states.push(x);
    }
    let rewards: Vec<f64> = states.iter().map(|&s| reward(s)).collect();
    let margins: Vec<f64> = states.iter().map(|&s| safety_margin(s)).collect();
    Trajectory {
        cumulative_reward: rewards[..horizon].iter().sum(),
        violations: margins.iter().filter(|&&m| m > 0.0).count(),
        max_margin: margins.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        left_bounds: states.iter().any(|s| !s.in_bounds()),
        states,
        actions,
        rewards,
        margins,
    }
}

/// `max_t ℓ(x_t)` along a rollout, including `x0`; avoids allocating the
/// trajectory.
pub fn rollout_max_margin<P>(mut policy: P, x0: BoatState, horizon: usize, dt: f64) -> f64
where
    P: FnMut(BoatState) -> BoatAction,
{
    let mut x = x0;
    let mut worst = safety_margin(x);
    for _ in 0..horizon {
        x = step_unchecked(x, policy(x).projected(), dt);
        worst = worst.max(safety_margin(x));
    }
    worst
}
