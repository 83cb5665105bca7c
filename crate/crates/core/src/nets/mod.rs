//! Parametric function approximators and their optimizers.

mod critic;
mod mlp;
mod optim;
mod policy;

pub use critic::{BoundDoubleQ, DoubleQ, TargetPair};
pub use mlp::{BoundMlp, Linear, Mlp};
pub use optim::{soft_update, Adam, Temperature};
pub use policy::{
    BoundPolicy, Policy, PolicyKind, PolicySample, LOG_STD_MAX, LOG_STD_MIN, TANH_EPS,
};

use alloc::vec::Vec;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::checkpoint::ParamMap;
use crate::error::Result;

/// Stochastic or deterministic policy placed on a tape.
pub trait Actor {
    /// Reparametrized action; `log_prob` is `None` for deterministic policies.
    fn sample(&self, tape: &mut Tape, obs: Var, noise: &Tensor) -> Result<PolicySample>;
    /// `[batch, 1]` log-density of given actions.
    fn log_prob(&self, tape: &mut Tape, obs: Var, action: Var) -> Result<Var>;
}

/// Pessimistic state-action value placed on a tape.
pub trait Critic {
    fn q_min(&self, tape: &mut Tape, obs: Var, action: Var) -> Result<Var>;
}

impl Actor for BoundPolicy {
    fn sample(&self, tape: &mut Tape, obs: Var, noise: &Tensor) -> Result<PolicySample> {
        BoundPolicy::sample(self, tape, obs, noise)
    }
    fn log_prob(&self, tape: &mut Tape, obs: Var, action: Var) -> Result<Var> {
        BoundPolicy::log_prob(self, tape, obs, action)
    }
}

impl Critic for BoundDoubleQ {
    fn q_min(&self, tape: &mut Tape, obs: Var, action: Var) -> Result<Var> {
        BoundDoubleQ::q_min(self, tape, obs, action)
    }
}

/// Anything with an ordered list of trainable tensors.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn to_params(&self) -> ParamMap;
    fn load_params(&mut self, map: &ParamMap) -> Result<()>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Gradients for `vars` in order, zero where the root did not depend on them.
pub fn collect_grads(grads: &Gradients, vars: &[Var], like: &[&Tensor]) -> Vec<Tensor> {
    vars.iter()
        .zip(like)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect()
}
