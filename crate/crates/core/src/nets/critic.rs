use alloc::vec::Vec;

use super::mlp::{BoundMlp, Mlp};
use super::optim::soft_update;
use super::Module;
use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::ParamMap;
use crate::error::Result;
use crate::rng::Rng;

/// Two independently initialized Q-networks on `obs ++ action`.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleQ {
    q1: Mlp,
    q2: Mlp,
}

impl DoubleQ {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut Rng) -> Self {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(obs_dim + act_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = Mlp::new(&sizes, rng);
        let q2 = Mlp::new(&sizes, rng);
        DoubleQ { q1, q2 }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDoubleQ {
        BoundDoubleQ {
            q1: self.q1.bind(tape, trainable),
            q2: self.q2.bind(tape, trainable),
        }
    }

    /// Binds to caller-owned handles in [`Module::params`] order: the first
    /// half belongs to `q1`.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundDoubleQ {
        let (a, b) = vars.split_at(vars.len() / 2);
        BoundDoubleQ {
            q1: BoundMlp::from_vars(a),
            q2: BoundMlp::from_vars(b),
        }
    }

    /// `min(Q1, Q2)` without recording gradients.
    pub fn q_min_value(&self, obs: &Tensor, act: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let q = self.bind(&mut tape, false);
        let (o, a) = (tape.constant(obs.clone()), tape.constant(act.clone()));
        let m = q.q_min(&mut tape, o, a)?;
        Ok(tape.value(m).clone())
    }
}

impl Module for DoubleQ {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.q1.params();
        p.extend(self.q2.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.q1.params_mut();
        p.extend(self.q2.params_mut());
        p
    }

    fn to_params(&self) -> ParamMap {
        let mut m = ParamMap::new();
        m.extend_prefixed("q1", self.q1.to_params());
        m.extend_prefixed("q2", self.q2.to_params());
        m
    }

    fn load_params(&mut self, map: &ParamMap) -> Result<()> {
        let mut q1 = self.q1.clone();
        let mut q2 = self.q2.clone();
        q1.load_params(&map.sub("q1"))?;
        q2.load_params(&map.sub("q2"))?;
        self.q1 = q1;
        self.q2 = q2;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BoundDoubleQ {
    q1: BoundMlp,
    q2: BoundMlp,
}

impl BoundDoubleQ {
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.q1.vars();
        v.extend(self.q2.vars());
        v
    }

    pub fn q_values(&self, tape: &mut Tape, obs: Var, act: Var) -> Result<(Var, Var)> {
        let x = tape.concat(&[obs, act], 1)?;
        let a = self.q1.forward(tape, x)?;
        let b = self.q2.forward(tape, x)?;
        Ok((a, b))
    }

    pub fn q_min(&self, tape: &mut Tape, obs: Var, act: Var) -> Result<Var> {
        let (a, b) = self.q_values(tape, obs, act)?;
        tape.minimum(a, b)
    }
}

/// Slowly tracking copy of an online network. Its parameters change only
/// through [`TargetPair::soft_update`].
#[derive(Clone, Debug, PartialEq)]
pub struct TargetPair<M> {
    net: M,
    pub tau: f64,
}

impl<M: Module + Clone> TargetPair<M> {
    pub fn new(online: &M, tau: f64) -> Self {
        TargetPair {
            net: online.clone(),
            tau,
        }
    }

    pub fn net(&self) -> &M {
        &self.net
    }

    pub fn soft_update(&mut self, online: &M) {
        soft_update(&mut self.net, online, self.tau);
    }

    pub fn to_params(&self) -> ParamMap {
        self.net.to_params()
    }

    pub fn load_params(&mut self, map: &ParamMap) -> Result<()> {
        self.net.load_params(map)
    }
}
