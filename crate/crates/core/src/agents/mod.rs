//! SAC and DDPG agents with vanilla, critic-expansion (CE), actor-expansion
//! (AE) and Retrace targets, and the training loop that drives them.
//!
//! Every mode shares one code path with the vanilla update: a horizon of
//! zero skips the model and draws no extra noise, so H = 0 runs replay the
//! vanilla update sequence bit for bit.

mod train;

pub use train::{
    build, evaluate, train, MemorySink, Record, RecordKind, RunOutcome, Sink, Snapshot,
    Termination, TrainConfig, Value,
};

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::ParamMap;
use crate::diagnostics::{gradient_stats, per_sample_gradients, Aggregation, GradientStats};
use crate::envs::{observe_taped, EnvSpec};
use crate::error::{Error, Result};
use crate::expansion::{
    critic_target, particle_average, particle_rows, q_h_expansion, retrace_expansion,
    ExpansionConfig, TargetBatch,
};
use crate::models::{BoundModel, DynamicsModel, RolloutNoise};
use crate::nets::{
    collect_grads, Adam, BoundDoubleQ, BoundPolicy, Critic, DoubleQ, Module, Policy, PolicyKind,
    TargetPair, Temperature,
};
use crate::replay::{SegmentBatch, SequenceBuffer, TransitionBatch};
use crate::rng::{normal_tensor, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Sac,
    Ddpg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Vanilla,
    /// H-step targets in the critic regression.
    CriticExpansion,
    /// H-step returns differentiated through the model in the actor loss.
    ActorExpansion,
    /// Off-policy corrected targets on replayed segments.
    Retrace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    None,
    Oracle,
    Ensemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Critic,
    Actor,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Critic => "critic",
            Component::Actor => "actor",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentConfig {
    pub algorithm: Algorithm,
    pub mode: Mode,
    pub model: ModelKind,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub particles: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub initial_alpha: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub updates_per_step: usize,
    pub hidden: Vec<usize>,
    /// DDPG exploration noise on the squashed action.
    pub exploration_std: f64,
}

impl AgentConfig {
    /// Defaults for `algorithm` in `mode`. AE averages 10 particles, the
    /// other modes one.
    pub fn new(algorithm: Algorithm, mode: Mode, model: ModelKind) -> Self {
        AgentConfig {
            algorithm,
            mode,
            model,
            horizon: 0,
            gamma: 0.95,
            lambda: 1.0,
            particles: if mode == Mode::ActorExpansion { 10 } else { 1 },
            policy_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 5e-5,
            initial_alpha: 0.1,
            tau: 0.005,
            batch_size: 256,
            updates_per_step: 1,
            hidden: vec![256, 256],
            exploration_std: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        match (self.mode, self.model) {
            (Mode::Vanilla | Mode::Retrace, ModelKind::None) => {}
            (Mode::Vanilla | Mode::Retrace, _) => {
                return bad("vanilla and retrace modes take no dynamics model")
            }
            (Mode::CriticExpansion | Mode::ActorExpansion, ModelKind::None) => {
                return bad("expansion modes require a dynamics model")
            }
            _ => {}
        }
        if self.mode == Mode::Vanilla && self.horizon != 0 {
            return bad("vanilla mode has horizon 0");
        }
        self.expansion(self.horizon, None).validate()?;
        for (name, lr) in [
            ("policy_lr", self.policy_lr),
            ("critic_lr", self.critic_lr),
            ("alpha_lr", self.alpha_lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(alloc::format!("{name} must be positive")));
            }
        }
        if !(self.initial_alpha > 0.0 && self.initial_alpha.is_finite()) {
            return bad("initial_alpha must be positive");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.updates_per_step == 0 {
            return bad("batch_size and updates_per_step must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if !(self.exploration_std > 0.0 && self.exploration_std.is_finite()) {
            return bad("exploration_std must be positive");
        }
        Ok(())
    }

    fn expansion(&self, horizon: usize, alpha: Option<f64>) -> ExpansionConfig {
        ExpansionConfig {
            horizon,
            gamma: self.gamma,
            lambda: self.lambda,
            alpha,
            particles: self.particles,
        }
    }

    /// Model steps unrolled for critic targets.
    pub fn critic_horizon(&self) -> usize {
        if self.mode == Mode::CriticExpansion {
            self.horizon
        } else {
            0
        }
    }

    /// Model steps unrolled in the actor objective.
    pub fn actor_horizon(&self) -> usize {
        if self.mode == Mode::ActorExpansion {
            self.horizon
        } else {
            0
        }
    }
}

/// Gradient hook, called with the batch gradient of every update before
/// the optimizer step.
pub trait Observer {
    fn gradients(&mut self, _component: Component, _update: u64, _grads: &[Tensor]) {}
}

/// Ignores everything.
pub struct NoObserver;

impl Observer for NoObserver {}

/// Replay samples for the critic step with the noise its target consumes.
#[derive(Clone, Debug, PartialEq)]
pub enum CriticBatch {
    Transitions {
        batch: TransitionBatch,
        /// Draws `a' ~ pi(s')`.
        next_noise: Tensor,
        /// `batch * particles` rows, present when the target is expanded.
        rollout: Option<RolloutNoise>,
    },
    Segments {
        batch: SegmentBatch,
        /// Value-sample noise at `s_1 ..= s_{H+1}`.
        v_noise: Vec<Tensor>,
    },
}

impl CriticBatch {
    pub fn states(&self) -> &Tensor {
        match self {
            CriticBatch::Transitions { batch, .. } => &batch.states,
            CriticBatch::Segments { batch, .. } => &batch.states[0],
        }
    }

    pub fn actions(&self) -> &Tensor {
        match self {
            CriticBatch::Transitions { batch, .. } => &batch.actions,
            CriticBatch::Segments { batch, .. } => &batch.actions[0],
        }
    }
}

/// All random inputs of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateBatch {
    pub critic: CriticBatch,
    /// Reparametrization noise for actions at the critic batch states.
    pub actor_noise: Tensor,
    pub actor_rollout: Option<RolloutNoise>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha_loss: Option<f64>,
    /// Temperature used by this update.
    pub alpha: Option<f64>,
    pub target_mean: f64,
    pub critic_stats: Option<GradientStats>,
    pub actor_stats: Option<GradientStats>,
}

/// Policy, double critic with its target copy, temperature and optimizers.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    cfg: AgentConfig,
    spec: EnvSpec,
    policy: Policy,
    critic: DoubleQ,
    target: TargetPair<DoubleQ>,
    temperature: Option<Temperature>,
    policy_opt: Adam,
    critic_opt: Adam,
    updates: u64,
}

/// `mean((Q1 - y)^2) + mean((Q2 - y)^2)` with constant targets `y`.
pub fn critic_loss(
    tape: &mut Tape,
    spec: &EnvSpec,
    critic: &BoundDoubleQ,
    states: &Tensor,
    actions: &Tensor,
    targets: &Tensor,
) -> Result<Var> {
    let s = tape.constant(states.clone());
    let o = observe_taped(spec, tape, s)?;
    let a = tape.constant(actions.clone());
    let y = tape.constant(targets.clone());
    let (q1, q2) = critic.q_values(tape, o, a)?;
    let mut total = None;
    for q in [q1, q2] {
        let d = tape.sub(q, y)?;
        let d2 = tape.square(d)?;
        let m = tape.mean(d2)?;
        total = Some(match total {
            None => m,
            Some(t) => tape.add(t, m)?,
        });
    }
    Ok(total.expect("two heads"))
}

/// `mean(alpha log pi(a|s) - Q^H(s, a))` with `a ~ pi(s)` reparametrized from
/// `noise`, or `mean(-Q^H(s, mu(s)))` without entropy. `Q^0` is the critic
/// itself; longer horizons unroll `model` and average `cfg.particles`
/// rollouts per state. Returns the loss and the log-densities of `a`.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    tape: &mut Tape,
    cfg: &ExpansionConfig,
    spec: &EnvSpec,
    model: Option<&BoundModel<'_>>,
    policy: &BoundPolicy,
    critic: &dyn Critic,
    states: &Tensor,
    noise: &Tensor,
    rollout: Option<&RolloutNoise>,
) -> Result<(Var, Option<Var>)> {
    let s = tape.constant(states.clone());
    let o = observe_taped(spec, tape, s)?;
    let smp = policy.sample(tape, o, noise)?;
    let q = if cfg.horizon == 0 {
        critic.q_min(tape, o, smp.action)?
    } else {
        let model = model
            .ok_or_else(|| Error::Config("actor expansion requires a dynamics model".into()))?;
        let noise = rollout
            .ok_or_else(|| Error::Config("actor expansion requires rollout noise".into()))?;
        let idx = particle_rows(states.rows(), cfg.particles);
        let sp = tape.gather_rows(s, &idx)?;
        let ap = tape.gather_rows(smp.action, &idx)?;
        let qh = q_h_expansion(tape, cfg, spec, model, policy, critic, sp, ap, noise)?;
        particle_average(tape, qh, cfg.particles)?
    };
    let obj = match (cfg.alpha, smp.log_prob) {
        (Some(a), Some(lp)) => {
            let ent = tape.scale(lp, a)?;
            tape.sub(ent, q)?
        }
        _ => tape.neg(q)?,
    };
    Ok((tape.mean(obj)?, smp.log_prob))
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(Tensor::all_finite)
}

impl Agent {
    pub fn new(cfg: AgentConfig, spec: EnvSpec, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        spec.validate()?;
        let kind = match cfg.algorithm {
            Algorithm::Sac => PolicyKind::Gaussian,
            Algorithm::Ddpg => PolicyKind::Deterministic {
                exploration_std: cfg.exploration_std,
            },
        };
        let (od, ad) = (spec.obs_dim(), spec.act_dim());
        let policy = Policy::new(kind, od, ad, &cfg.hidden, rng);
        let critic = DoubleQ::new(od, ad, &cfg.hidden, rng);
        let target = TargetPair::new(&critic, cfg.tau);
        let temperature = match cfg.algorithm {
            Algorithm::Sac => Some(Temperature::new(
                cfg.initial_alpha,
                -(ad as f64),
                cfg.alpha_lr,
            )),
            Algorithm::Ddpg => None,
        };
        let policy_opt = Adam::for_module(cfg.policy_lr, &policy);
        let critic_opt = Adam::for_module(cfg.critic_lr, &critic);
        Ok(Agent {
            cfg,
            spec,
            policy,
            critic,
            target,
            temperature,
            policy_opt,
            critic_opt,
            updates: 0,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn critic(&self) -> &DoubleQ {
        &self.critic
    }

    pub fn target_critic(&self) -> &DoubleQ {
        self.target.net()
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Current temperature; `None` for DDPG.
    pub fn alpha(&self) -> Option<f64> {
        self.temperature.as_ref().map(Temperature::alpha)
    }

    pub fn critic_expansion(&self) -> ExpansionConfig {
        self.cfg.expansion(self.cfg.critic_horizon(), self.alpha())
    }

    pub fn actor_expansion(&self) -> ExpansionConfig {
        self.cfg.expansion(self.cfg.actor_horizon(), self.alpha())
    }

    /// Samples replay data and noise for one update. The draw order is the
    /// same in every mode; expanded targets append their rollout noise.
    pub fn draw_update(
        &self,
        buffer: &SequenceBuffer,
        num_members: usize,
        rng: &mut Rng,
    ) -> Result<UpdateBatch> {
        let (b, sd, ad) = (
            self.cfg.batch_size,
            self.spec.state_dim(),
            self.spec.act_dim(),
        );
        let p = self.cfg.particles;
        let critic = if self.cfg.mode == Mode::Retrace {
            let batch = buffer.sample_segments(b, self.cfg.horizon + 1, rng)?;
            let v_noise = (0..=self.cfg.horizon)
                .map(|_| normal_tensor(rng, b, ad))
                .collect();
            CriticBatch::Segments { batch, v_noise }
        } else {
            let batch = buffer.sample_transitions(b, rng)?;
            let next_noise = normal_tensor(rng, b, ad);
            let h = self.cfg.critic_horizon();
            let rollout = (h > 0).then(|| RolloutNoise::draw(rng, b * p, h, sd, ad, num_members));
            CriticBatch::Transitions {
                batch,
                next_noise,
                rollout,
            }
        };
        let actor_noise = normal_tensor(rng, b, ad);
        let h = self.cfg.actor_horizon();
        let actor_rollout = (h > 0).then(|| RolloutNoise::draw(rng, b * p, h, sd, ad, num_members));
        Ok(UpdateBatch {
            critic,
            actor_noise,
            actor_rollout,
        })
    }

    /// Detached critic targets for a batch: expanded targets through
    /// `model` for CE, `Q^{H+1}_ret` for Retrace. Bootstraps use the target
    /// critic and the online policy.
    pub fn critic_targets(
        &self,
        batch: &CriticBatch,
        model: Option<&DynamicsModel>,
    ) -> Result<TargetBatch> {
        let mut tape = Tape::new();
        let bp = self.policy.bind(&mut tape, false);
        let bq = self.target.net().bind(&mut tape, false);
        let cfg = self.critic_expansion();
        match batch {
            CriticBatch::Transitions {
                batch,
                next_noise,
                rollout,
            } => {
                let bm = model.map(|m| m.bind(&mut tape));
                critic_target(
                    &mut tape,
                    &cfg,
                    &self.spec,
                    bm.as_ref(),
                    &bp,
                    &bq,
                    &batch.rewards,
                    &batch.next_states,
                    next_noise,
                    rollout.as_ref(),
                )
            }
            CriticBatch::Segments { batch, v_noise } => {
                let cfg = ExpansionConfig {
                    horizon: self.cfg.horizon + 1,
                    ..cfg
                };
                let y = retrace_expansion(
                    &mut tape,
                    &cfg,
                    &self.spec,
                    &bp,
                    &bq,
                    batch,
                    cfg.horizon,
                    v_noise,
                )?;
                let values = tape.value(y).clone();
                let particles = values.clone().reshaped(&[1, values.rows()])?;
                Ok(TargetBatch { values, particles })
            }
        }
    }

    fn critic_grad_stats(
        &self,
        states: &Tensor,
        actions: &Tensor,
        targets: &Tensor,
        agg: Aggregation,
    ) -> Result<GradientStats> {
        let like = self.critic.params();
        let grads = per_sample_gradients(states.rows(), &like, |tape, i| {
            let bq = self.critic.bind(tape, true);
            let l = critic_loss(
                tape,
                &self.spec,
                &bq,
                &states.select_rows(&[i]),
                &actions.select_rows(&[i]),
                &targets.select_rows(&[i]),
            )?;
            Ok((l, bq.vars()))
        })?;
        gradient_stats(&grads, agg)
    }

    /// One critic step on `targets`, then the target-network update.
    pub fn critic_update(
        &mut self,
        states: &Tensor,
        actions: &Tensor,
        targets: &Tensor,
        observer: &mut dyn Observer,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bq = self.critic.bind(&mut tape, true);
        let loss = critic_loss(&mut tape, &self.spec, &bq, states, actions, targets)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "critic",
                update: self.updates,
            });
        }
        let grads = tape.backward(loss)?;
        let g = collect_grads(&grads, &bq.vars(), &self.critic.params());
        if !all_finite(&g) {
            return Err(Error::NonFiniteGradient {
                component: "critic",
                update: self.updates,
            });
        }
        observer.gradients(Component::Critic, self.updates, &g);
        self.critic_opt.step(self.critic.params_mut(), &g)?;
        self.target.soft_update(&self.critic);
        Ok(lv)
    }

    #[allow(clippy::too_many_arguments)]
    fn actor_grad_stats(
        &self,
        model: Option<&DynamicsModel>,
        states: &Tensor,
        noise: &Tensor,
        rollout: Option<&RolloutNoise>,
        agg: Aggregation,
    ) -> Result<GradientStats> {
        let cfg = self.actor_expansion();
        let rows = states.rows();
        let like = self.policy.params();
        let grads = per_sample_gradients(rows, &like, |tape, i| {
            let bp = self.policy.bind(tape, true);
            let bq = self.critic.bind(tape, false);
            let bm = model.map(|m| m.bind(tape));
            let picked: Option<RolloutNoise> = rollout.map(|r| {
                let idx: Vec<usize> = (0..cfg.particles).map(|p| p * rows + i).collect();
                r.select(&idx)
            });
            let (l, _) = actor_loss(
                tape,
                &cfg,
                &self.spec,
                bm.as_ref(),
                &bp,
                &bq,
                &states.select_rows(&[i]),
                &noise.select_rows(&[i]),
                picked.as_ref(),
            )?;
            Ok((l, bp.vars()))
        })?;
        gradient_stats(&grads, agg)
    }

    /// One actor step, vanilla when the actor horizon is zero. The online
    /// critic enters as a constant. Returns the loss and the log-densities
    /// of the sampled actions.
    pub fn actor_update(
        &mut self,
        model: Option<&DynamicsModel>,
        states: &Tensor,
        noise: &Tensor,
        rollout: Option<&RolloutNoise>,
        observer: &mut dyn Observer,
    ) -> Result<(f64, Option<Tensor>)> {
        let cfg = self.actor_expansion();
        let mut tape = Tape::new();
        let bp = self.policy.bind(&mut tape, true);
        let bq = self.critic.bind(&mut tape, false);
        let bm = model.map(|m| m.bind(&mut tape));
        let (loss, lp) = actor_loss(
            &mut tape,
            &cfg,
            &self.spec,
            bm.as_ref(),
            &bp,
            &bq,
            states,
            noise,
            rollout,
        )?;
        let lv = tape.value(loss).item();
        let lp = lp.map(|v| tape.value(v).clone());
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss {
                component: "actor",
                update: self.updates,
            });
        }
        let grads = tape.backward(loss)?;
        let g = collect_grads(&grads, &bp.vars(), &self.policy.params());
        if !all_finite(&g) {
            return Err(Error::NonFiniteGradient {
                component: "actor",
                update: self.updates,
            });
        }
        observer.gradients(Component::Actor, self.updates, &g);
        self.policy_opt.step(self.policy.params_mut(), &g)?;
        Ok((lv, lp))
    }

    /// Critic step, actor step and temperature step on one drawn batch.
    /// With `stats` set, per-sample gradient statistics of both losses are
    /// computed before the respective optimizer step.
    pub fn update(
        &mut self,
        batch: &UpdateBatch,
        model: Option<&DynamicsModel>,
        observer: &mut dyn Observer,
        stats: Option<Aggregation>,
    ) -> Result<UpdateReport> {
        let alpha = self.alpha();
        let targets = self.critic_targets(&batch.critic, model)?;
        let (states, actions) = (batch.critic.states(), batch.critic.actions());
        let critic_stats = match stats {
            Some(agg) => Some(self.critic_grad_stats(states, actions, &targets.values, agg)?),
            None => None,
        };
        let critic_loss = self.critic_update(states, actions, &targets.values, observer)?;
        let actor_stats = match stats {
            Some(agg) => Some(self.actor_grad_stats(
                model,
                states,
                &batch.actor_noise,
                batch.actor_rollout.as_ref(),
                agg,
            )?),
            None => None,
        };
        let (actor_loss, lp) = self.actor_update(
            model,
            states,
            &batch.actor_noise,
            batch.actor_rollout.as_ref(),
            observer,
        )?;
        let alpha_loss = match (&mut self.temperature, lp) {
            (Some(t), Some(lp)) => Some(t.update(lp.data())?),
            _ => None,
        };
        self.updates += 1;
        Ok(UpdateReport {
            critic_loss,
            actor_loss,
            alpha_loss,
            alpha,
            target_mean: targets.values.mean(),
            critic_stats,
            actor_stats,
        })
    }

    pub fn to_params(&self) -> ParamMap {
        let mut m = ParamMap::new();
        m.extend_prefixed("policy", self.policy.to_params());
        m.extend_prefixed("critic", self.critic.to_params());
        m.extend_prefixed("target", self.target.to_params());
        m.extend_prefixed("policy_opt", self.policy_opt.to_params());
        m.extend_prefixed("critic_opt", self.critic_opt.to_params());
        if let Some(t) = &self.temperature {
            m.extend_prefixed("temperature", t.to_params());
        }
        m.insert_scalar("updates", self.updates as f64);
        m
    }

    /// Restores parameters saved by [`Agent::to_params`] from an agent of the
    /// same configuration. Leaves `self` untouched on error.
    pub fn load_params(&mut self, map: &ParamMap) -> Result<()> {
        let mut next = self.clone();
        next.policy.load_params(&map.sub("policy"))?;
        next.critic.load_params(&map.sub("critic"))?;
        next.target.load_params(&map.sub("target"))?;
        next.policy_opt.load_params(&map.sub("policy_opt"))?;
        next.critic_opt.load_params(&map.sub("critic_opt"))?;
        if let Some(t) = &mut next.temperature {
            t.load_params(&map.sub("temperature"))?;
        }
        next.updates = map.scalar("updates")? as u64;
        *self = next;
        Ok(())
    }
}

macro_rules! names {
    ($ty:ident { $($var:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),*];

            /// Name used in configuration files and logs.
            pub fn as_str(self) -> &'static str {
                match self {
                    $($ty::$var => $name),*
                }
            }

            pub fn from_name(name: &str) -> Option<Self> {
                match name {
                    $($name => Some($ty::$var),)*
                    _ => None,
                }
            }
        }
    };
}

names!(Algorithm { Sac => "sac", Ddpg => "ddpg" });
names!(Mode {
    Vanilla => "vanilla",
    CriticExpansion => "ce",
    ActorExpansion => "ae",
    Retrace => "retrace",
});
names!(ModelKind { None => "none", Oracle => "oracle", Ensemble => "ensemble" });
