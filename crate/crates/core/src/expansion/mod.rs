//! H-step value expansion and Retrace targets.
//!
//! With soft value `V(s) = min Q(s, a~) - alpha log pi(a~|s)` evaluated on a
//! single reparametrized sample:
//!
//! ```text
//! Q^H(s0,a0)      = r0 + sum_{t=1}^{H-1} g^t (r_t - alpha log pi(a_t|s_t)) + g^H V(s_H)
//! Q^H_ret(s0,a0)  = r0 + sum_{t=1}^{H-1} g^t (c_t r_t + c_{t-1} V(s_t) - c_t Q(s_t,a_t))
//!                      + g^H c_{H-1} V(s_H)
//! c_0 = 1,  c_t   = prod_{j=1}^{t} lambda min(1, pi(a_j|s_j) / mu(a_j|s_j))
//! ```
//!
//! and `Q^0 = Q^0_ret = Q(s0, a0)`. When `alpha` is `None` (deterministic
//! policies) no entropy term is built at all.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::envs::{observe_taped, EnvSpec};
use crate::error::{Error, Result};
use crate::models::{model_rollout, BoundModel, Rollout, RolloutNoise};
use crate::nets::{Actor, Critic};
use crate::replay::SegmentBatch;

/// Floor on per-step importance ratios, applied in log space.
pub const LOG_RATIO_FLOOR: f64 = -50.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpansionConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    /// Entropy temperature; `None` removes every entropy term.
    pub alpha: Option<f64>,
    pub particles: usize,
}

impl ExpansionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("gamma must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must lie in [0, 1]".into()));
        }
        if self.particles == 0 {
            return Err(Error::Config("particles must be positive".into()));
        }
        if let Some(a) = self.alpha {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(
                    "alpha must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

/// `q - alpha * log_prob`, or `q` when there is no entropy term.
fn soften(tape: &mut Tape, alpha: Option<f64>, q: Var, log_prob: Option<Var>) -> Result<Var> {
    match (alpha, log_prob) {
        (Some(a), Some(lp)) => {
            let ent = tape.scale(lp, a)?;
            tape.sub(q, ent)
        }
        _ => Ok(q),
    }
}

/// Single-sample soft value at `obs`.
pub fn soft_value(
    tape: &mut Tape,
    alpha: Option<f64>,
    policy: &dyn Actor,
    critic: &dyn Critic,
    obs: Var,
    noise: &Tensor,
) -> Result<Var> {
    let s = policy.sample(tape, obs, noise)?;
    let q = critic.q_min(tape, obs, s.action)?;
    soften(tape, alpha, q, s.log_prob)
}

fn check(tape: &Tape, v: Var, step: usize) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteRollout {
            what: "target",
            step,
        })
    }
}

/// Per-row `Q^H(s0, a0)` along a model rollout from `state0` and `action0`.
/// `noise.policy[t]` draws `a_t` for `t >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn q_h_expansion(
    tape: &mut Tape,
    cfg: &ExpansionConfig,
    spec: &EnvSpec,
    model: &BoundModel<'_>,
    policy: &dyn Actor,
    critic: &dyn Critic,
    state0: Var,
    action0: Var,
    noise: &RolloutNoise,
) -> Result<Var> {
    let h = cfg.horizon;
    if h == 0 {
        let obs = observe_taped(spec, tape, state0)?;
        return critic.q_min(tape, obs, action0);
    }
    let ro = model_rollout(
        tape,
        model,
        spec,
        policy,
        state0,
        Some((action0, None)),
        h,
        noise,
    )?;
    let q = critic.q_min(tape, ro.obs[h], ro.actions[h])?;
    let v = soften(tape, cfg.alpha, q, ro.log_probs[h])?;
    h_step_sum(tape, cfg, &ro.rewards, &ro.log_probs, v)
}

/// `r_0 + sum_{t=1}^{H-1} g^t (r_t - alpha lp_t) + g^H v_h` with `H = rewards.len()`.
pub fn h_step_sum(
    tape: &mut Tape,
    cfg: &ExpansionConfig,
    rewards: &[Var],
    log_probs: &[Option<Var>],
    v_h: Var,
) -> Result<Var> {
    let h = rewards.len();
    if h == 0 {
        return Ok(v_h);
    }
    let mut acc = rewards[0];
    let mut disc = 1.0;
    for t in 1..h {
        disc *= cfg.gamma;
        let term = soften(
            tape,
            cfg.alpha,
            rewards[t],
            log_probs.get(t).copied().flatten(),
        )?;
        let term = tape.scale(term, disc)?;
        acc = tape.add(acc, term)?;
        check(tape, acc, t)?;
    }
    disc *= cfg.gamma;
    let v = tape.scale(v_h, disc)?;
    let out = tape.add(acc, v)?;
    check(tape, out, h)?;
    Ok(out)
}

/// Truncated importance weights `c_0 .. c_{n-1}` for one sequence, where
/// `log_pi[t]` and `log_mu[t]` belong to the action at step `t`. The ratio of
/// step 0 is never used.
pub fn retrace_weights(log_pi: &[f64], log_mu: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if log_pi.len() != log_mu.len() {
        return Err(Error::LengthMismatch {
            left: log_pi.len(),
            right: log_mu.len(),
        });
    }
    let n = log_pi.len();
    let mut c = Vec::with_capacity(n);
    if n == 0 {
        return Ok(c);
    }
    c.push(1.0);
    if lambda == 0.0 {
        c.resize(n, 0.0);
        return Ok(c);
    }
    let log_lambda = libm::log(lambda);
    let mut log_c = 0.0;
    for t in 1..n {
        let diff = log_pi[t] - log_mu[t];
        if !diff.is_finite() {
            return Err(Error::NonFiniteRatio { step: t });
        }
        log_c += log_lambda + diff.min(0.0).max(LOG_RATIO_FLOOR);
        c.push(libm::exp(log_c));
    }
    Ok(c)
}

/// Per-row `Q^H_ret(s0, a0)` over replayed segments with `H = seg.len()`
/// transitions. `v_noise[t - 1]` draws the value-sample action at `s_t`,
/// `t = 1..=H`.
#[allow(clippy::too_many_arguments)]
pub fn retrace_expansion(
    tape: &mut Tape,
    cfg: &ExpansionConfig,
    spec: &EnvSpec,
    policy: &dyn Actor,
    critic: &dyn Critic,
    seg: &SegmentBatch,
    h: usize,
    v_noise: &[Tensor],
) -> Result<Var> {
    if seg.len() < h {
        return Err(Error::ShortSegment {
            have: seg.len(),
            need: h,
        });
    }
    let s0 = tape.constant(seg.states[0].clone());
    let o0 = observe_taped(spec, tape, s0)?;
    let a0 = tape.constant(seg.actions[0].clone());
    if h == 0 {
        return critic.q_min(tape, o0, a0);
    }
    if v_noise.len() < h {
        return Err(Error::ShortSegment {
            have: v_noise.len(),
            need: h,
        });
    }
    let rows = seg.batch_size();
    let obs: Vec<Var> = (0..=h)
        .map(|t| {
            let s = tape.constant(seg.states[t].clone());
            observe_taped(spec, tape, s)
        })
        .collect::<Result<_>>()?;
    let acts: Vec<Var> = (0..h)
        .map(|t| tape.constant(seg.actions[t].clone()))
        .collect();

    // importance weights from current-policy densities of the replayed actions
    let mut log_pi = vec![vec![0.0; h]; rows];
    for t in 1..h {
        let lp = policy.log_prob(tape, obs[t], acts[t])?;
        for (i, row) in log_pi.iter_mut().enumerate() {
            row[t] = tape.value(lp).get(i, 0);
        }
    }
    let mut c = vec![Vec::with_capacity(rows); h];
    for (i, lp_row) in log_pi.iter().enumerate() {
        let lm_row: Vec<f64> = (0..h)
            .map(|t| if t == 0 { 0.0 } else { seg.log_mu[t].get(i, 0) })
            .collect();
        let w = retrace_weights(lp_row, &lm_row, cfg.lambda)?;
        for (t, ct) in w.into_iter().enumerate() {
            c[t].push(ct);
        }
    }
    let c: Vec<Var> = c
        .into_iter()
        .map(|col| tape.constant(Tensor::matrix(rows, 1, col)))
        .collect();

    let mut acc = tape.constant(seg.rewards[0].clone());
    let mut disc = 1.0;
    for t in 1..h {
        disc *= cfg.gamma;
        let r = tape.constant(seg.rewards[t].clone());
        let cr = tape.mul(c[t], r)?;
        let v = soft_value(tape, cfg.alpha, policy, critic, obs[t], &v_noise[t - 1])?;
        let cv = tape.mul(c[t - 1], v)?;
        let q = critic.q_min(tape, obs[t], acts[t])?;
        let cq = tape.mul(c[t], q)?;
        let term = tape.add(cr, cv)?;
        let term = tape.sub(term, cq)?;
        let term = tape.scale(term, disc)?;
        acc = tape.add(acc, term)?;
        check(tape, acc, t)?;
    }
    disc *= cfg.gamma;
    let v = soft_value(tape, cfg.alpha, policy, critic, obs[h], &v_noise[h - 1])?;
    let cv = tape.mul(c[h - 1], v)?;
    let cv = tape.scale(cv, disc)?;
    let out = tape.add(acc, cv)?;
    check(tape, out, h)?;
    Ok(out)
}

/// Detached copy of a model rollout as a segment batch whose behaviour
/// densities are the rolling-out policy's own, i.e. an on-policy segment.
pub fn rollout_segment(tape: &mut Tape, ro: &Rollout, policy: &dyn Actor) -> Result<SegmentBatch> {
    let h = ro.horizon();
    let rows = tape.value(ro.states[0]).rows();
    let mut log_mu = Vec::with_capacity(h);
    for t in 0..h {
        let lp = policy.log_prob(tape, ro.obs[t], ro.actions[t])?;
        log_mu.push(tape.value(lp).clone());
    }
    Ok(SegmentBatch {
        states: ro.states.iter().map(|&s| tape.value(s).clone()).collect(),
        actions: ro.actions[..h]
            .iter()
            .map(|&a| tape.value(a).clone())
            .collect(),
        rewards: ro.rewards.iter().map(|&r| tape.value(r).clone()).collect(),
        log_mu,
        start_steps: vec![0; rows],
    })
}

/// Row indices that stack `particles` copies of a `rows`-row batch,
/// particle-major.
pub fn particle_rows(rows: usize, particles: usize) -> Vec<usize> {
    (0..particles).flat_map(|_| 0..rows).collect()
}

/// Mean over particles of particle-major `[particles * rows, 1]` values.
pub fn particle_average(tape: &mut Tape, values: Var, particles: usize) -> Result<Var> {
    if particles == 1 {
        return Ok(values);
    }
    let n = tape.value(values).rows();
    let rows = n / particles;
    if rows * particles != n {
        return Err(Error::LengthMismatch {
            left: n,
            right: particles,
        });
    }
    let grid = tape.reshape(values, &[particles, rows])?;
    let mean = tape.mean_axis(grid, 0)?;
    tape.reshape(mean, &[rows, 1])
}

/// Detached target with the per-particle values it averages.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetBatch {
    /// `[rows, 1]`.
    pub values: Tensor,
    /// `[particles, rows]` raw particle values.
    pub particles: Tensor,
}

/// Critic regression target `r + g (mean_p Q^H_p(s', a') - alpha log pi(a'|s'))`
/// with `a' ~ pi(s')` drawn from `next_noise`, evaluated on a private tape.
/// `policy` and `critic` are expected to be bound to that tape as constants,
/// so the result carries no graph.
#[allow(clippy::too_many_arguments)]
pub fn critic_target(
    tape: &mut Tape,
    cfg: &ExpansionConfig,
    spec: &EnvSpec,
    model: Option<&BoundModel<'_>>,
    policy: &dyn Actor,
    critic: &dyn Critic,
    rewards: &Tensor,
    next_states: &Tensor,
    next_noise: &Tensor,
    rollout_noise: Option<&RolloutNoise>,
) -> Result<TargetBatch> {
    let rows = rewards.rows();
    let s1 = tape.constant(next_states.clone());
    let o1 = observe_taped(spec, tape, s1)?;
    let first = policy.sample(tape, o1, next_noise)?;
    let (qh, p) = if cfg.horizon == 0 {
        (critic.q_min(tape, o1, first.action)?, 1)
    } else {
        let model =
            model.ok_or_else(|| Error::Config("expansion requires a dynamics model".into()))?;
        let noise = rollout_noise
            .ok_or_else(|| Error::Config("expansion requires rollout noise".into()))?;
        let p = cfg.particles;
        let idx = particle_rows(rows, p);
        let sp = tape.gather_rows(s1, &idx)?;
        let ap = tape.gather_rows(first.action, &idx)?;
        let raw = q_h_expansion(tape, cfg, spec, model, policy, critic, sp, ap, noise)?;
        (raw, p)
    };
    let particles = tape.value(qh).clone().reshaped(&[p, rows])?;
    let q = particle_average(tape, qh, p)?;
    let v = soften(tape, cfg.alpha, q, first.log_prob)?;
    let v = tape.scale(v, cfg.gamma)?;
    let r = tape.constant(rewards.clone());
    let y = tape.add(r, v)?;
    check(tape, y, 0)?;
    Ok(TargetBatch {
        values: tape.value(y).clone(),
        particles,
    })
}
