use alloc::vec::Vec;

use super::Module;
use crate::autodiff::Tensor;
use crate::checkpoint::ParamMap;
use crate::error::{Error, Result};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Tensor]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            t: 0,
        }
    }

    pub fn for_module(lr: f64, module: &impl Module) -> Self {
        Adam::new(lr, &module.params())
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::LengthMismatch {
                left: params.len(),
                right: grads.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if p.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((pi, &gi), (mi, vi)) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *pi -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }

    pub fn to_params(&self) -> ParamMap {
        let mut map = ParamMap::new();
        map.insert_scalar("t", self.t as f64);
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            map.insert(alloc::format!("m{i}"), m.clone());
            map.insert(alloc::format!("v{i}"), v.clone());
        }
        map
    }

    pub fn load_params(&mut self, map: &ParamMap) -> Result<()> {
        let t = map.scalar("t")?;
        let mut m = Vec::with_capacity(self.m.len());
        let mut v = Vec::with_capacity(self.v.len());
        for (i, (mi, vi)) in self.m.iter().zip(&self.v).enumerate() {
            m.push(map.require_shaped(&alloc::format!("m{i}"), mi.shape())?);
            v.push(map.require_shaped(&alloc::format!("v{i}"), vi.shape())?);
        }
        self.t = t as u64;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Polyak averaging `target <- tau * online + (1 - tau) * target`.
pub fn soft_update<M: Module>(target: &mut M, online: &M, tau: f64) {
    for (t, o) in target.params_mut().into_iter().zip(online.params()) {
        for (ti, &oi) in t.data_mut().iter_mut().zip(o.data()) {
            *ti = tau * oi + (1.0 - tau) * *ti;
        }
    }
}

/// Entropy temperature `alpha = exp(log_alpha)`, tuned towards a target
/// entropy by gradient steps on `-log_alpha * mean(log_prob + target)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Temperature {
    log_alpha: Tensor,
    pub target_entropy: f64,
    opt: Adam,
}

impl Temperature {
    pub fn new(initial_alpha: f64, target_entropy: f64, lr: f64) -> Self {
        let log_alpha = Tensor::scalar(libm::log(initial_alpha));
        let opt = Adam::new(lr, &[&log_alpha]);
        Temperature {
            log_alpha,
            target_entropy,
            opt,
        }
    }

    pub fn alpha(&self) -> f64 {
        libm::exp(self.log_alpha.item())
    }

    pub fn log_alpha(&self) -> f64 {
        self.log_alpha.item()
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr
    }

    /// One optimizer step from a batch of policy log-densities. Returns the loss.
    pub fn update(&mut self, log_probs: &[f64]) -> Result<f64> {
        if log_probs.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mean = log_probs
            .iter()
            .map(|lp| lp + self.target_entropy)
            .sum::<f64>()
            / log_probs.len() as f64;
        let loss = -self.log_alpha.item() * mean;
        if !mean.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "temperature",
                update: self.opt.steps(),
            });
        }
        let grad = Tensor::scalar(-mean);
        self.opt.step(alloc::vec![&mut self.log_alpha], &[grad])?;
        Ok(loss)
    }

    pub fn to_params(&self) -> ParamMap {
        let mut map = ParamMap::new();
        map.insert("log_alpha", self.log_alpha.clone());
        map.insert_scalar("target_entropy", self.target_entropy);
        map.extend_prefixed("opt", self.opt.to_params());
        map
    }

    pub fn load_params(&mut self, map: &ParamMap) -> Result<()> {
        self.log_alpha = map.require_shaped("log_alpha", &[1, 1])?;
        self.target_entropy = map.scalar("target_entropy")?;
        self.opt.load_params(&map.sub("opt"))
    }
}
