use alloc::vec::Vec;

use super::mlp::{BoundMlp, Mlp};
use super::Module;
use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::ParamMap;
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Stabilizer inside the tanh change-of-variables term `log(1 - a^2 + eps)`.
pub const TANH_EPS: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicyKind {
    /// Tanh-squashed diagonal Gaussian.
    Gaussian,
    /// `tanh(mean)`; behaviour actions add `N(0, exploration_std^2)` noise.
    Deterministic { exploration_std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    net: Mlp,
    kind: PolicyKind,
    act_dim: usize,
}

/// Reparametrized action and, for stochastic policies, its log-density.
#[derive(Clone, Copy, Debug)]
pub struct PolicySample {
    pub action: Var,
    pub log_prob: Option<Var>,
}

impl Policy {
    pub fn new(
        kind: PolicyKind,
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        rng: &mut Rng,
    ) -> Self {
        let heads = match kind {
            PolicyKind::Gaussian => 2 * act_dim,
            PolicyKind::Deterministic { .. } => act_dim,
        };
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(obs_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(heads);
        Policy {
            net: Mlp::new(&sizes, rng),
            kind,
            act_dim,
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.net.in_dim()
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self.kind, PolicyKind::Gaussian)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundPolicy {
        BoundPolicy {
            net: self.net.bind(tape, trainable),
            kind: self.kind,
            act_dim: self.act_dim,
        }
    }

    /// Binds to caller-owned handles in [`Module::params`] order.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundPolicy {
        BoundPolicy {
            net: BoundMlp::from_vars(vars),
            kind: self.kind,
            act_dim: self.act_dim,
        }
    }

    /// Deterministic action `tanh(mean(obs))` without recording gradients.
    pub fn mean_action(&self, obs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let o = tape.constant(obs.clone());
        let a = p.mean_action(&mut tape, o)?;
        Ok(tape.value(a).clone())
    }

    /// Behaviour action for data collection plus its log-density under the
    /// behaviour distribution. `noise` is standard normal, `[batch, act_dim]`.
    pub fn behaviour_action(&self, obs: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let o = tape.constant(obs.clone());
        match self.kind {
            PolicyKind::Gaussian => {
                let s = p.sample(&mut tape, o, noise)?;
                let lp = s.log_prob.expect("gaussian policies report log-densities");
                Ok((tape.value(s.action).clone(), tape.value(lp).clone()))
            }
            PolicyKind::Deterministic { exploration_std } => {
                let mean = p.mean_action(&mut tape, o)?;
                let mut a = tape.value(mean).clone();
                for (ai, &e) in a.data_mut().iter_mut().zip(noise.data()) {
                    *ai = (*ai + exploration_std * e).clamp(-1.0, 1.0);
                }
                let av = tape.constant(a.clone());
                let lp = p.log_prob(&mut tape, o, av)?;
                Ok((a, tape.value(lp).clone()))
            }
        }
    }
}

impl Module for Policy {
    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }

    fn to_params(&self) -> ParamMap {
        self.net.to_params()
    }

    fn load_params(&mut self, map: &ParamMap) -> Result<()> {
        self.net.load_params(map)
    }
}

#[derive(Clone, Debug)]
pub struct BoundPolicy {
    net: BoundMlp,
    kind: PolicyKind,
    act_dim: usize,
}

impl BoundPolicy {
    pub fn vars(&self) -> Vec<Var> {
        self.net.vars()
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    /// Pre-squash mean and clipped log standard deviation.
    fn heads(&self, tape: &mut Tape, obs: Var) -> Result<(Var, Option<Var>)> {
        let out = self.net.forward(tape, obs)?;
        match self.kind {
            PolicyKind::Gaussian => {
                let mean = tape.slice(out, 1, 0, self.act_dim)?;
                let ls = tape.slice(out, 1, self.act_dim, 2 * self.act_dim)?;
                let ls = tape.clip(ls, LOG_STD_MIN, LOG_STD_MAX)?;
                Ok((mean, Some(ls)))
            }
            PolicyKind::Deterministic { .. } => Ok((out, None)),
        }
    }

    pub fn mean_action(&self, tape: &mut Tape, obs: Var) -> Result<Var> {
        let (mean, _) = self.heads(tape, obs)?;
        tape.tanh(mean)
    }

    /// Reparametrized draw `tanh(mean + exp(log_std) * noise)`. Deterministic
    /// policies ignore `noise` and report no log-density.
    pub fn sample(&self, tape: &mut Tape, obs: Var, noise: &Tensor) -> Result<PolicySample> {
        let (mean, ls) = self.heads(tape, obs)?;
        let Some(ls) = ls else {
            let action = tape.tanh(mean)?;
            return Ok(PolicySample {
                action,
                log_prob: None,
            });
        };
        let u = tape.gaussian_sample(mean, ls, noise)?;
        let action = tape.tanh(u)?;
        // sum_j (-0.5 n^2 - 0.5 ln 2pi) is constant in the parameters
        let rows = noise.rows();
        let base: Vec<f64> = (0..rows)
            .map(|r| {
                noise
                    .row_slice(r)
                    .iter()
                    .map(|n| -0.5 * n * n - HALF_LN_2PI)
                    .sum()
            })
            .collect();
        let base = tape.constant(Tensor::column(base));
        let corr = squash_correction(tape, action)?;
        let per_dim = tape.add(ls, corr)?;
        let per_row = tape.sum_axis(per_dim, 1)?;
        let log_prob = tape.sub(base, per_row)?;
        Ok(PolicySample {
            action,
            log_prob: Some(log_prob),
        })
    }

    /// Log-density of a given action, `[batch, 1]`. For deterministic policies
    /// this is the Gaussian exploration density centred on `tanh(mean)`.
    pub fn log_prob(&self, tape: &mut Tape, obs: Var, action: Var) -> Result<Var> {
        let (mean, ls) = self.heads(tape, obs)?;
        match (self.kind, ls) {
            (PolicyKind::Gaussian, Some(ls)) => {
                let a = tape.value(action).clone();
                let u = a.map(|v| libm::atanh(v.clamp(-1.0 + TANH_EPS, 1.0 - TANH_EPS)));
                let u = tape.constant(u);
                let d = tape.sub(u, mean)?;
                let inv = tape.neg(ls)?;
                let inv = tape.exp(inv)?;
                let z = tape.mul(d, inv)?;
                let z2 = tape.square(z)?;
                let quad = tape.scale(z2, -0.5)?;
                let t = tape.sub(quad, ls)?;
                let corr = squash_correction(tape, action)?;
                let t = tape.sub(t, corr)?;
                let s = tape.sum_axis(t, 1)?;
                tape.add_scalar(s, -HALF_LN_2PI * self.act_dim as f64)
            }
            (PolicyKind::Deterministic { exploration_std }, _) => {
                let centre = tape.tanh(mean)?;
                let d = tape.sub(action, centre)?;
                let z2 = tape.square(d)?;
                let quad = tape.scale(z2, -0.5 / (exploration_std * exploration_std))?;
                let s = tape.sum_axis(quad, 1)?;
                let c = -(libm::log(exploration_std) + HALF_LN_2PI) * self.act_dim as f64;
                tape.add_scalar(s, c)
            }
            (PolicyKind::Gaussian, None) => Err(Error::InvalidTensor(
                "gaussian policy without log-std head".into(),
            )),
        }
    }
}

/// `log(1 - a^2 + TANH_EPS)` elementwise.
fn squash_correction(tape: &mut Tape, action: Var) -> Result<Var> {
    let a2 = tape.square(action)?;
    let one_minus = tape.neg(a2)?;
    let one_minus = tape.add_scalar(one_minus, 1.0 + TANH_EPS)?;
    tape.log(one_minus)
}
