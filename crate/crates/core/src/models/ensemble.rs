use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::ParamMap;
use crate::envs::{observe, observe_taped, EnvSpec};
use crate::error::{Error, Result};
use crate::nets::{collect_grads, Adam, BoundMlp, Mlp, Module};
use crate::replay::{SequenceBuffer, TransitionBatch};
use crate::rng::Rng;

const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub members: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Weight of `sum(max_logvar) - sum(min_logvar)` in the training loss.
    pub logvar_penalty: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            members: 5,
            hidden: vec![256; 4],
            lr: 1e-3,
            logvar_penalty: 0.01,
        }
    }
}

/// Affine standardization of model inputs and state-delta targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub in_mean: Tensor,
    pub in_std: Tensor,
    pub out_mean: Tensor,
    pub out_std: Tensor,
}

fn moments(rows: &[f64], width: usize) -> (Tensor, Tensor) {
    let n = (rows.len() / width).max(1) as f64;
    let mut mean = vec![0.0; width];
    for r in rows.chunks(width) {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for r in rows.chunks(width) {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .map(|s| libm::sqrt(s / n).max(STD_FLOOR))
        .collect();
    (Tensor::row(mean), Tensor::row(std))
}

impl Normalizer {
    pub fn identity(in_dim: usize, out_dim: usize) -> Self {
        Normalizer {
            in_mean: Tensor::zeros(&[1, in_dim]),
            in_std: Tensor::full(&[1, in_dim], 1.0),
            out_mean: Tensor::zeros(&[1, out_dim]),
            out_std: Tensor::full(&[1, out_dim], 1.0),
        }
    }

    /// Fits to row-major `inputs` and `deltas`.
    pub fn fit(inputs: &[f64], in_dim: usize, deltas: &[f64], out_dim: usize) -> Self {
        let (in_mean, in_std) = moments(inputs, in_dim);
        let (out_mean, out_std) = moments(deltas, out_dim);
        Normalizer {
            in_mean,
            in_std,
            out_mean,
            out_std,
        }
    }

    pub fn normalize_out(&self, delta: &[f64]) -> Vec<f64> {
        delta
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let j = i % self.out_mean.len();
                (d - self.out_mean.data()[j]) / self.out_std.data()[j]
            })
            .collect()
    }

    pub fn denormalize_out(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| {
                let j = i % self.out_mean.len();
                v * self.out_std.data()[j] + self.out_mean.data()[j]
            })
            .collect()
    }
}

/// Probabilistic ensemble predicting a Gaussian over the normalized change
/// in physical state, with log-variances softly bounded by learned limits.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    spec: EnvSpec,
    members: Vec<Mlp>,
    max_logvar: Tensor,
    min_logvar: Tensor,
    norm: Normalizer,
    cfg: EnsembleConfig,
    opt: Adam,
}

impl EnsembleModel {
    pub fn new(spec: EnvSpec, cfg: EnsembleConfig, rng: &mut Rng) -> Self {
        let sd = spec.state_dim();
        let in_dim = spec.obs_dim() + spec.act_dim();
        let mut sizes = vec![in_dim];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(2 * sd);
        let members = (0..cfg.members).map(|_| Mlp::new(&sizes, rng)).collect();
        let mut model = EnsembleModel {
            spec,
            members,
            max_logvar: Tensor::full(&[1, sd], 0.5),
            min_logvar: Tensor::full(&[1, sd], -10.0),
            norm: Normalizer::identity(in_dim, sd),
            opt: Adam::new(cfg.lr, &[]),
            cfg,
        };
        model.opt = Adam::new(model.cfg.lr, &model.params());
        model
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn num_members(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self) -> &[Mlp] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [Mlp] {
        &mut self.members
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn set_logvar_bounds(&mut self, min: f64, max: f64) {
        self.min_logvar.data_mut().iter_mut().for_each(|v| *v = min);
        self.max_logvar.data_mut().iter_mut().for_each(|v| *v = max);
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundEnsemble<'_> {
        let members = self.members.iter().map(|m| m.bind(tape, false)).collect();
        let max_lv = tape.constant(self.max_logvar.clone());
        let min_lv = tape.constant(self.min_logvar.clone());
        BoundEnsemble {
            model: self,
            members,
            max_lv,
            min_lv,
        }
    }

    /// `obs(s) ++ a` feature rows and raw deltas `s' - s` for a batch.
    fn rows(&self, batch: &TransitionBatch) -> (Vec<f64>, Vec<f64>) {
        let n = batch.len();
        let mut inputs = Vec::with_capacity(n * (self.spec.obs_dim() + self.spec.act_dim()));
        let mut deltas = Vec::with_capacity(n * self.spec.state_dim());
        for i in 0..n {
            inputs.extend(observe(&self.spec, batch.states.row_slice(i)));
            inputs.extend_from_slice(batch.actions.row_slice(i));
            for (a, b) in batch
                .next_states
                .row_slice(i)
                .iter()
                .zip(batch.states.row_slice(i))
            {
                deltas.push(a - b);
            }
        }
        (inputs, deltas)
    }

    /// Refits normalization statistics to every stored transition.
    pub fn refresh_normalizer(&mut self, buffer: &SequenceBuffer) {
        let (sd, ad) = (self.spec.state_dim(), self.spec.act_dim());
        let mut inputs = Vec::new();
        let mut deltas = Vec::new();
        for ep in buffer.episodes() {
            for t in 0..ep.len() {
                inputs.extend(observe(&self.spec, ep.state(t)));
                inputs.extend_from_slice(ep.action(t));
                for (a, b) in ep.state(t + 1).iter().zip(ep.state(t)) {
                    deltas.push(a - b);
                }
            }
        }
        self.norm = Normalizer::fit(&inputs, self.spec.obs_dim() + ad, &deltas, sd);
    }

    /// Per-member loss on a batch: mean over rows and state dimensions of
    /// `(mu - y)^2 exp(-logvar) + logvar` in normalized delta units.
    fn member_losses(
        &self,
        tape: &mut Tape,
        bound: &[BoundMlp],
        max_lv: Var,
        min_lv: Var,
        batches: &[&TransitionBatch],
    ) -> Result<Vec<Var>> {
        let in_dim = self.spec.obs_dim() + self.spec.act_dim();
        let sd = self.spec.state_dim();
        let mut losses = Vec::with_capacity(bound.len());
        for (k, batch) in batches.iter().enumerate() {
            let n = batch.len();
            let (inputs, deltas) = self.rows(batch);
            let x: Vec<f64> = inputs
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let j = i % in_dim;
                    (v - self.norm.in_mean.data()[j]) / self.norm.in_std.data()[j]
                })
                .collect();
            let x = tape.constant(Tensor::matrix(n, in_dim, x));
            let y = tape.constant(Tensor::matrix(n, sd, self.norm.normalize_out(&deltas)));
            let (mu, lv) = heads(tape, &bound[k], max_lv, min_lv, sd, x)?;
            let err = tape.sub(mu, y)?;
            let err2 = tape.square(err)?;
            let nlv = tape.neg(lv)?;
            let inv = tape.exp(nlv)?;
            let w = tape.mul(err2, inv)?;
            let l = tape.add(w, lv)?;
            losses.push(tape.mean(l)?);
        }
        Ok(losses)
    }

    /// Held-out loss of each member on one batch.
    pub fn evaluate(&self, batch: &TransitionBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound: Vec<BoundMlp> = self
            .members
            .iter()
            .map(|m| m.bind(&mut tape, false))
            .collect();
        let max_lv = tape.constant(self.max_logvar.clone());
        let min_lv = tape.constant(self.min_logvar.clone());
        let batches = vec![batch; bound.len()];
        let losses = self.member_losses(&mut tape, &bound, max_lv, min_lv, &batches)?;
        Ok(losses.iter().map(|&l| tape.value(l).item()).collect())
    }

    /// Trains for `batches` steps, each member on its own minibatch. Returns
    /// the per-member loss of every step. Normalization is refit first.
    pub fn train(
        &mut self,
        buffer: &SequenceBuffer,
        batches: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut Rng,
    ) -> Result<Vec<Vec<f64>>> {
        if buffer.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if batches == 0 {
            return Ok(Vec::new());
        }
        self.refresh_normalizer(buffer);
        self.opt.lr = lr;
        let mut trace = Vec::with_capacity(batches);
        for step in 0..batches {
            let samples: Vec<TransitionBatch> = (0..self.members.len())
                .map(|_| buffer.sample_transitions(batch_size, rng))
                .collect::<Result<_>>()?;
            let refs: Vec<&TransitionBatch> = samples.iter().collect();
            let mut tape = Tape::new();
            let bound: Vec<BoundMlp> = self
                .members
                .iter()
                .map(|m| m.bind(&mut tape, true))
                .collect();
            let max_lv = tape.param(self.max_logvar.clone());
            let min_lv = tape.param(self.min_logvar.clone());
            let losses = self.member_losses(&mut tape, &bound, max_lv, min_lv, &refs)?;
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l)?;
            }
            let smax = tape.sum(max_lv)?;
            let smin = tape.sum(min_lv)?;
            let spread = tape.sub(smax, smin)?;
            let pen = tape.scale(spread, self.cfg.logvar_penalty)?;
            let total = tape.add(total, pen)?;
            trace.push(losses.iter().map(|&l| tape.value(l).item()).collect());
            let mut vars: Vec<Var> = bound.iter().flat_map(|b| b.vars()).collect();
            vars.push(max_lv);
            vars.push(min_lv);
            let grads = tape.backward(total)?;
            let g = collect_grads(&grads, &vars, &self.params());
            if g.iter().any(|t| !t.all_finite()) {
                return Err(Error::NonFiniteGradient {
                    component: "model",
                    update: step as u64,
                });
            }
            let mut params: Vec<&mut Tensor> = self
                .members
                .iter_mut()
                .flat_map(|m| m.params_mut())
                .collect();
            params.push(&mut self.max_logvar);
            params.push(&mut self.min_logvar);
            self.opt.step(params, &g)?;
        }
        Ok(trace)
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.members.iter().flat_map(|m| m.params()).collect();
        p.push(&self.max_logvar);
        p.push(&self.min_logvar);
        p
    }

    pub fn to_params(&self) -> ParamMap {
        let mut map = ParamMap::new();
        for (k, m) in self.members.iter().enumerate() {
            map.extend_prefixed(&format!("m{k}"), m.to_params());
        }
        map.insert("max_logvar", self.max_logvar.clone());
        map.insert("min_logvar", self.min_logvar.clone());
        map.insert("norm.in_mean", self.norm.in_mean.clone());
        map.insert("norm.in_std", self.norm.in_std.clone());
        map.insert("norm.out_mean", self.norm.out_mean.clone());
        map.insert("norm.out_std", self.norm.out_std.clone());
        map.extend_prefixed("opt", self.opt.to_params());
        map
    }

    pub fn load_params(&mut self, map: &ParamMap) -> Result<()> {
        let mut next = self.clone();
        for (k, m) in next.members.iter_mut().enumerate() {
            m.load_params(&map.sub(&format!("m{k}")))?;
        }
        next.max_logvar = map.require_shaped("max_logvar", self.max_logvar.shape())?;
        next.min_logvar = map.require_shaped("min_logvar", self.min_logvar.shape())?;
        next.norm = Normalizer {
            in_mean: map.require_shaped("norm.in_mean", self.norm.in_mean.shape())?,
            in_std: map.require_shaped("norm.in_std", self.norm.in_std.shape())?,
            out_mean: map.require_shaped("norm.out_mean", self.norm.out_mean.shape())?,
            out_std: map.require_shaped("norm.out_std", self.norm.out_std.shape())?,
        };
        next.opt.load_params(&map.sub("opt"))?;
        *self = next;
        Ok(())
    }
}

/// Mean and softly bounded log-variance heads of one member.
fn heads(
    tape: &mut Tape,
    net: &BoundMlp,
    max_lv: Var,
    min_lv: Var,
    sd: usize,
    x: Var,
) -> Result<(Var, Var)> {
    let out = net.forward(tape, x)?;
    let rows = tape.value(out).rows();
    let mu = tape.slice(out, 1, 0, sd)?;
    let raw = tape.slice(out, 1, sd, 2 * sd)?;
    let hi = tape.broadcast(max_lv, rows, sd)?;
    let lo = tape.broadcast(min_lv, rows, sd)?;
    let t = tape.sub(hi, raw)?;
    let t = tape.softplus(t)?;
    let lv = tape.sub(hi, t)?;
    let t = tape.sub(lv, lo)?;
    let t = tape.softplus(t)?;
    let lv = tape.add(lo, t)?;
    Ok((mu, lv))
}

pub struct BoundEnsemble<'a> {
    model: &'a EnsembleModel,
    members: Vec<BoundMlp>,
    max_lv: Var,
    min_lv: Var,
}

impl BoundEnsemble<'_> {
    fn row_const(tape: &mut Tape, t: &Tensor, rows: usize) -> Result<Var> {
        let v = tape.constant(t.clone());
        tape.broadcast(v, rows, t.len())
    }

    /// `state + denormalize(mu_k + exp(logvar_k / 2) * noise)` with member
    /// `k = members[row]` for each row.
    pub fn predict(
        &self,
        tape: &mut Tape,
        state: Var,
        action: Var,
        noise: &Tensor,
        members: &[usize],
    ) -> Result<Var> {
        let m = self.model;
        let sd = m.spec.state_dim();
        let rows = tape.value(state).rows();
        if members.len() != rows {
            return Err(Error::LengthMismatch {
                left: members.len(),
                right: rows,
            });
        }
        if noise.shape() != [rows, sd] {
            return Err(Error::Shape {
                op: "ensemble_predict",
                lhs: alloc::vec![rows, sd],
                rhs: noise.shape().to_vec(),
            });
        }
        let obs = observe_taped(&m.spec, tape, state)?;
        let x = tape.concat(&[obs, action], 1)?;
        let mean = Self::row_const(tape, &m.norm.in_mean, rows)?;
        let inv: Vec<f64> = m.norm.in_std.data().iter().map(|s| 1.0 / s).collect();
        let inv = Self::row_const(tape, &Tensor::row(inv), rows)?;
        let x = tape.sub(x, mean)?;
        let x = tape.mul(x, inv)?;

        let mut parts = Vec::new();
        let mut order = Vec::with_capacity(rows);
        for k in 0..self.members.len() {
            let idx: Vec<usize> = (0..rows).filter(|&r| members[r] == k).collect();
            if idx.is_empty() {
                continue;
            }
            let whole = idx.len() == rows;
            let xk = if whole { x } else { tape.gather_rows(x, &idx)? };
            let (mu, lv) = heads(tape, &self.members[k], self.max_lv, self.min_lv, sd, xk)?;
            let ls = tape.scale(lv, 0.5)?;
            let nk = if whole {
                noise.clone()
            } else {
                let data = idx
                    .iter()
                    .flat_map(|&r| noise.row_slice(r).iter().copied())
                    .collect();
                Tensor::matrix(idx.len(), sd, data)
            };
            parts.push(tape.gaussian_sample(mu, ls, &nk)?);
            order.extend(idx);
        }
        if order.len() != rows {
            return Err(Error::InvalidTensor(format!(
                "member choice outside 0..{}",
                self.members.len()
            )));
        }
        let z = if parts.len() == 1 {
            parts[0]
        } else {
            let cat = tape.concat(&parts, 0)?;
            let mut pos = vec![0; rows];
            for (p, &r) in order.iter().enumerate() {
                pos[r] = p;
            }
            tape.gather_rows(cat, &pos)?
        };
        let scale = Self::row_const(tape, &m.norm.out_std, rows)?;
        let shift = Self::row_const(tape, &m.norm.out_mean, rows)?;
        let d = tape.mul(z, scale)?;
        let d = tape.add(d, shift)?;
        tape.add(state, d)
    }
}
