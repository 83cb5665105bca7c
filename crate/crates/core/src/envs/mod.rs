//! Differentiable continuous-control environments with fixed-length episodes.

mod arith;
mod physics;
mod rollout;

pub use arith::{Arith, Plain, Taped};
pub use rollout::{batch_rollout, BatchRollout, Trajectory};

use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub damping: f64,
    pub max_torque: f64,
    pub action_cost: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        PendulumParams {
            mass: 1.0,
            length: 1.0,
            gravity: 9.81,
            damping: 0.05,
            max_torque: 15.0,
            action_cost: 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CartpoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    /// Distance from pivot to the pole's centre of mass.
    pub half_length: f64,
    pub gravity: f64,
    pub max_force: f64,
    pub position_cost: f64,
    pub action_cost: f64,
}

impl Default for CartpoleParams {
    fn default() -> Self {
        CartpoleParams {
            cart_mass: 1.0,
            pole_mass: 0.1,
            half_length: 0.5,
            gravity: 9.81,
            max_force: 10.0,
            position_cost: 0.01,
            action_cost: 0.001,
        }
    }
}

/// Scalar system `s' = a s + b u` with reward `-state_cost s^2 - action_cost u^2`.
/// Actions are not clamped. One map application per agent step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearParams {
    pub a: f64,
    pub b: f64,
    pub state_cost: f64,
    pub action_cost: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Dynamics {
    Pendulum(PendulumParams),
    Cartpole(CartpoleParams),
    Linear(LinearParams),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub dynamics: Dynamics,
    /// Agent steps per episode; episodes end by truncation only.
    pub episode_len: usize,
    pub action_repeat: usize,
    /// Integration steps per repeated action.
    pub substeps: usize,
    /// Integration step in seconds.
    pub dt: f64,
}

impl EnvSpec {
    pub fn pendulum() -> Self {
        EnvSpec {
            dynamics: Dynamics::Pendulum(PendulumParams::default()),
            episode_len: 200,
            action_repeat: 4,
            substeps: 5,
            dt: 0.01,
        }
    }

    pub fn cartpole() -> Self {
        EnvSpec {
            dynamics: Dynamics::Cartpole(CartpoleParams::default()),
            episode_len: 500,
            action_repeat: 2,
            substeps: 5,
            dt: 0.01,
        }
    }

    pub fn linear(params: LinearParams, episode_len: usize) -> Self {
        EnvSpec {
            dynamics: Dynamics::Linear(params),
            episode_len,
            action_repeat: 1,
            substeps: 1,
            dt: 1.0,
        }
    }

    pub fn integration_steps(&self) -> usize {
        self.action_repeat * self.substeps
    }

    pub fn state_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::Pendulum(_) => 2,
            Dynamics::Cartpole(_) => 4,
            Dynamics::Linear(_) => 1,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.dynamics {
            Dynamics::Pendulum(_) => 3,
            Dynamics::Cartpole(_) => 5,
            Dynamics::Linear(_) => 1,
        }
    }

    pub fn act_dim(&self) -> usize {
        1
    }

    /// Upper bound on the per-step reward.
    pub fn max_reward(&self) -> f64 {
        match self.dynamics {
            Dynamics::Linear(_) => 0.0,
            _ => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.episode_len == 0 {
            return bad("episode length must be positive");
        }
        if self.action_repeat == 0 || self.substeps == 0 {
            return bad("action repeat and substeps must be positive");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("time step must be positive");
        }
        Ok(())
    }
}

/// Physical state plus the agent step within the current episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub x: Vec<f64>,
    pub step: usize,
}

pub fn env_reset(spec: &EnvSpec, rng: &mut Rng) -> EnvState {
    let mut u = |w: f64| rng.random_range(-w..w);
    let x = match spec.dynamics {
        Dynamics::Pendulum(_) => alloc::vec![core::f64::consts::PI + u(0.1), u(0.1)],
        Dynamics::Cartpole(_) => {
            alloc::vec![u(0.1), u(0.1), core::f64::consts::PI + u(0.1), u(0.1)]
        }
        Dynamics::Linear(_) => alloc::vec![u(1.0)],
    };
    EnvState { x, step: 0 }
}

/// Reset from a seed alone.
pub fn env_reset_seeded(spec: &EnvSpec, seed: u64) -> EnvState {
    env_reset(
        spec,
        &mut crate::rng::stream(seed, crate::rng::Stream::EnvReset),
    )
}

pub fn env_step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<(EnvState, f64)> {
    let (x, r) = physics::step(&mut Plain, spec, &state.x, action)?;
    if !r.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState {
            step: state.step as u64,
        });
    }
    Ok((
        EnvState {
            x,
            step: state.step + 1,
        },
        r,
    ))
}

pub fn observe(spec: &EnvSpec, x: &[f64]) -> Vec<f64> {
    physics::observe(&mut Plain, spec, x).expect("plain arithmetic is infallible")
}

pub fn reward(spec: &EnvSpec, x: &[f64], action: &[f64]) -> f64 {
    physics::reward(&mut Plain, spec, x, action).expect("plain arithmetic is infallible")
}

/// Row-wise observation of a `[batch, state_dim]` tensor.
pub fn observe_batch(spec: &EnvSpec, states: &Tensor) -> Tensor {
    let mut data = Vec::with_capacity(states.rows() * spec.obs_dim());
    for r in 0..states.rows() {
        data.extend(observe(spec, states.row_slice(r)));
    }
    Tensor::matrix(states.rows(), spec.obs_dim(), data)
}

fn columns(tape: &mut Tape, x: Var, n: usize) -> Result<Vec<Var>> {
    (0..n).map(|j| tape.column(x, j)).collect()
}

/// Batched differentiable step of `[batch, state_dim]` states under
/// `[batch, act_dim]` actions. Returns next states and `[batch, 1]` rewards.
pub fn step_taped(spec: &EnvSpec, tape: &mut Tape, state: Var, action: Var) -> Result<(Var, Var)> {
    let s = columns(tape, state, spec.state_dim())?;
    let a = columns(tape, action, spec.act_dim())?;
    let (next, r) = physics::step(&mut Taped { tape: &mut *tape }, spec, &s, &a)?;
    let next = tape.concat(&next, 1)?;
    Ok((next, r))
}

pub fn reward_taped(spec: &EnvSpec, tape: &mut Tape, state: Var, action: Var) -> Result<Var> {
    let s = columns(tape, state, spec.state_dim())?;
    let a = columns(tape, action, spec.act_dim())?;
    physics::reward(&mut Taped { tape: &mut *tape }, spec, &s, &a)
}

pub fn observe_taped(spec: &EnvSpec, tape: &mut Tape, state: Var) -> Result<Var> {
    let s = columns(tape, state, spec.state_dim())?;
    let o = physics::observe(&mut Taped { tape: &mut *tape }, spec, &s)?;
    tape.concat(&o, 1)
}
