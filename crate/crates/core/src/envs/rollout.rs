use alloc::vec::Vec;

use super::{env_reset, env_step, observe, EnvSpec, EnvState};
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::nets::Policy;
use crate::rng::{normal_tensor, stream, Stream};

/// Contiguous piece of one episode: `len + 1` states, `len` actions,
/// rewards and behaviour log-densities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub state_dim: usize,
    pub act_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub log_mu: Vec<f64>,
    /// Episode step index of the first state.
    pub start_step: usize,
    /// The last state is the episode's truncation point.
    pub truncated: bool,
}

impl Trajectory {
    pub fn new(state_dim: usize, act_dim: usize, first: &EnvState) -> Self {
        Trajectory {
            state_dim,
            act_dim,
            states: first.x.clone(),
            start_step: first.step,
            ..Trajectory::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f64] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }

    pub fn push(&mut self, action: &[f64], reward: f64, log_mu: f64, next: &[f64]) {
        self.actions.extend_from_slice(action);
        self.rewards.push(reward);
        self.log_mu.push(log_mu);
        self.states.extend_from_slice(next);
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards
            .iter()
            .rev()
            .fold(0.0, |acc, r| r + gamma * acc)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchRollout {
    /// Finished episodes in completion order, then the unfinished piece of
    /// each environment.
    pub segments: Vec<Trajectory>,
    /// Undiscounted returns of episodes that reached the horizon, accumulated
    /// while stepping.
    pub episode_returns: Vec<f64>,
}

/// Steps `num_envs` environments in lockstep with behaviour actions from
/// `policy`. Episodes reset at the fixed horizon.
pub fn batch_rollout(
    spec: &EnvSpec,
    policy: &Policy,
    num_envs: usize,
    num_steps: usize,
    seed: u64,
) -> Result<BatchRollout> {
    let mut reset_rng = stream(seed, Stream::EnvReset);
    let mut act_rng = stream(seed, Stream::Exploration);
    let (sd, ad) = (spec.state_dim(), spec.act_dim());
    let mut states: Vec<EnvState> = (0..num_envs)
        .map(|_| env_reset(spec, &mut reset_rng))
        .collect();
    let mut open: Vec<Trajectory> = states.iter().map(|s| Trajectory::new(sd, ad, s)).collect();
    let mut running = alloc::vec![0.0; num_envs];
    let mut out = BatchRollout::default();
    if num_steps == 0 {
        return Ok(out);
    }
    for _ in 0..num_steps {
        let mut obs = Vec::with_capacity(num_envs * spec.obs_dim());
        for s in &states {
            obs.extend(observe(spec, &s.x));
        }
        let obs = Tensor::matrix(num_envs, spec.obs_dim(), obs);
        let noise = normal_tensor(&mut act_rng, num_envs, ad);
        let (actions, log_mu) = policy.behaviour_action(&obs, &noise)?;
        for e in 0..num_envs {
            let a = actions.row_slice(e);
            let (next, r) = env_step(spec, &states[e], a)?;
            open[e].push(a, r, log_mu.get(e, 0), &next.x);
            running[e] += r;
            states[e] = next;
            if states[e].step >= spec.episode_len {
                open[e].truncated = true;
                out.episode_returns.push(running[e]);
                running[e] = 0.0;
                states[e] = env_reset(spec, &mut reset_rng);
                let fresh = Trajectory::new(sd, ad, &states[e]);
                out.segments.push(core::mem::replace(&mut open[e], fresh));
            }
        }
    }
    out.segments
        .extend(open.into_iter().filter(|t| !t.is_empty()));
    Ok(out)
}
