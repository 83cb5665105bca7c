use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{Agent, AgentConfig, ModelKind, Observer, UpdateReport};
use crate::autodiff::Tensor;
use crate::checkpoint::ParamMap;
use crate::diagnostics::Aggregation;
use crate::envs::{env_reset, env_step, observe, observe_batch, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::models::{DynamicsModel, EnsembleConfig, EnsembleModel};
use crate::replay::SequenceBuffer;
use crate::rng::{normal_tensor, stream, Rng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub agent: AgentConfig,
    pub env: EnvSpec,
    /// Agent steps; each repeats its action `env.action_repeat` times.
    pub total_steps: u64,
    pub min_replay: usize,
    pub replay_capacity: usize,
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Ensemble retraining cadence in agent steps.
    pub model_every: u64,
    pub model_batches: usize,
    pub model_batch_size: usize,
    pub ensemble: EnsembleConfig,
    /// Per-sample gradient statistics cadence in updates; 0 disables.
    pub grad_stats_every: u64,
    pub aggregation: Aggregation,
    /// Intermediate checkpoint cadence in agent steps; 0 keeps only the
    /// final one.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn new(agent: AgentConfig, env: EnvSpec, total_steps: u64) -> Self {
        TrainConfig {
            agent,
            env,
            total_steps,
            min_replay: 512,
            replay_capacity: crate::replay::DEFAULT_CAPACITY,
            eval_every: 1000,
            eval_episodes: 10,
            model_every: 1000,
            model_batches: 200,
            model_batch_size: 256,
            ensemble: EnsembleConfig::default(),
            grad_stats_every: 1000,
            aggregation: Aggregation::BatchThenDims,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.env.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return bad("eval_every and eval_episodes must be positive");
        }
        if self.replay_capacity == 0 || self.min_replay > self.replay_capacity {
            return bad("min_replay must not exceed a positive replay_capacity");
        }
        if self.agent.model == ModelKind::Ensemble {
            if self.model_every == 0 || self.model_batch_size == 0 || self.ensemble.members == 0 {
                return bad(
                    "ensemble training needs positive model_every, model_batch_size and members",
                );
            }
            if self.ensemble.hidden.contains(&0) {
                return bad("ensemble hidden widths must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RecordKind {
    EvalReturn,
    TrainLoss,
    GradStats,
    TargetAnalysis,
    RunMeta,
}

impl RecordKind {
    pub const ALL: [RecordKind; 5] = [
        RecordKind::EvalReturn,
        RecordKind::TrainLoss,
        RecordKind::GradStats,
        RecordKind::TargetAnalysis,
        RecordKind::RunMeta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::EvalReturn => "eval_return",
            RecordKind::TrainLoss => "train_loss",
            RecordKind::GradStats => "grad_stats",
            RecordKind::TargetAnalysis => "target_analysis",
            RecordKind::RunMeta => "run_meta",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Num(f64),
    Text(String),
}

/// One log row.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub kind: RecordKind,
    pub env_step: u64,
    pub update: u64,
    pub name: String,
    pub value: Value,
}

impl Record {
    pub fn num(
        kind: RecordKind,
        env_step: u64,
        update: u64,
        name: impl Into<String>,
        v: f64,
    ) -> Self {
        Record {
            kind,
            env_step,
            update,
            name: name.into(),
            value: Value::Num(v),
        }
    }

    pub fn text(
        kind: RecordKind,
        env_step: u64,
        update: u64,
        name: impl Into<String>,
        v: impl Into<String>,
    ) -> Self {
        Record {
            kind,
            env_step,
            update,
            name: name.into(),
            value: Value::Text(v.into()),
        }
    }

    pub fn as_num(&self) -> Option<f64> {
        match self.value {
            Value::Num(v) => Some(v),
            Value::Text(_) => None,
        }
    }
}

/// Destination of a run's records and checkpoints.
pub trait Sink: Observer {
    fn record(&mut self, rec: Record) -> Result<()>;
    fn checkpoint(&mut self, _env_step: u64, _snapshot: &ParamMap) -> Result<()> {
        Ok(())
    }
    fn flush(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct MemorySink {
    pub records: Vec<Record>,
    pub checkpoints: Vec<(u64, ParamMap)>,
    /// Gradient hook invocations.
    pub gradient_calls: u64,
}

impl Observer for MemorySink {
    fn gradients(&mut self, _c: super::Component, _u: u64, _g: &[Tensor]) {
        self.gradient_calls += 1;
    }
}

impl Sink for MemorySink {
    fn record(&mut self, rec: Record) -> Result<()> {
        self.records.push(rec);
        Ok(())
    }
    fn checkpoint(&mut self, env_step: u64, snapshot: &ParamMap) -> Result<()> {
        self.checkpoints.push((env_step, snapshot.clone()));
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Termination {
    Completed,
    /// A loss, gradient, rollout or environment state stopped being finite.
    NonFinite(String),
}

impl Termination {
    pub fn describe(&self) -> String {
        match self {
            Termination::Completed => "completed".into(),
            Termination::NonFinite(why) => format!("non-finite: {why}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub termination: Termination,
    pub env_steps: u64,
    pub updates: u64,
    /// `(env_step, mean return)` of every evaluation.
    pub evals: Vec<(u64, f64)>,
}

/// Everything needed to analyse a run after the fact.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub agent: Agent,
    pub buffer: SequenceBuffer,
    pub model: Option<DynamicsModel>,
    pub env_step: u64,
}

impl Snapshot {
    pub fn to_params(&self) -> ParamMap {
        let mut m = ParamMap::new();
        m.insert_scalar("env_step", self.env_step as f64);
        m.extend_prefixed("agent", self.agent.to_params());
        m.extend_prefixed("buffer", self.buffer.to_params());
        if let Some(DynamicsModel::Ensemble(e)) = &self.model {
            m.extend_prefixed("model", e.to_params());
        }
        m
    }

    /// Rebuilds a snapshot of a run trained with `cfg`.
    pub fn from_params(cfg: &TrainConfig, map: &ParamMap) -> Result<Self> {
        let (mut agent, model) = build(cfg, 0)?;
        agent.load_params(&map.sub("agent"))?;
        let model = match model {
            Some(DynamicsModel::Ensemble(mut e)) => {
                e.load_params(&map.sub("model"))?;
                Some(DynamicsModel::Ensemble(e))
            }
            other => other,
        };
        Ok(Snapshot {
            agent,
            buffer: SequenceBuffer::from_params(&map.sub("buffer"))?,
            model,
            env_step: map.scalar("env_step")? as u64,
        })
    }
}

/// Agent and model exactly as [`train`] initializes them for `seed`.
pub fn build(cfg: &TrainConfig, seed: u64) -> Result<(Agent, Option<DynamicsModel>)> {
    let mut init = stream(seed, Stream::Init);
    let agent = Agent::new(cfg.agent.clone(), cfg.env, &mut init)?;
    let model = match cfg.agent.model {
        ModelKind::None => None,
        ModelKind::Oracle => Some(DynamicsModel::oracle(cfg.env)),
        ModelKind::Ensemble => Some(DynamicsModel::Ensemble(EnsembleModel::new(
            cfg.env,
            cfg.ensemble.clone(),
            &mut init,
        ))),
    };
    Ok((agent, model))
}

/// Undiscounted returns of `episodes` parallel episodes under the mean
/// action.
pub fn evaluate(spec: &EnvSpec, agent: &Agent, episodes: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let mut states: Vec<EnvState> = (0..episodes).map(|_| env_reset(spec, rng)).collect();
    let mut returns = alloc::vec![0.0; episodes];
    for _ in 0..spec.episode_len {
        let flat: Vec<f64> = states.iter().flat_map(|s| s.x.iter().copied()).collect();
        let obs = observe_batch(spec, &Tensor::matrix(episodes, spec.state_dim(), flat));
        let act = agent.policy().mean_action(&obs)?;
        for (i, (s, r)) in states.iter_mut().zip(returns.iter_mut()).enumerate() {
            let (next, rew) = env_step(spec, s, act.row_slice(i))?;
            *r += rew;
            *s = next;
        }
    }
    Ok(returns)
}

fn is_non_finite(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite { .. }
            | Error::NonFiniteState { .. }
            | Error::NonFiniteRollout { .. }
            | Error::NonFiniteRatio { .. }
            | Error::NonFiniteGradient { .. }
            | Error::NonFiniteLoss { .. }
    )
}

#[derive(Default)]
struct Window {
    n: u64,
    critic: f64,
    actor: f64,
    alpha_loss: f64,
    target: f64,
}

impl Window {
    fn add(&mut self, r: &UpdateReport) {
        self.n += 1;
        self.critic += r.critic_loss;
        self.actor += r.actor_loss;
        self.alpha_loss += r.alpha_loss.unwrap_or(0.0);
        self.target += r.target_mean;
    }
}

struct Run<'a> {
    cfg: &'a TrainConfig,
    sink: &'a mut dyn Sink,
    agent: Agent,
    model: Option<DynamicsModel>,
    buffer: SequenceBuffer,
    reset_rng: Rng,
    explore_rng: Rng,
    update_rng: Rng,
    model_rng: Rng,
    eval_rng: Rng,
    state: EnvState,
    env_steps: u64,
    model_trained_at: Option<u64>,
    window: Window,
    evals: Vec<(u64, f64)>,
}

impl Run<'_> {
    fn record(&mut self, kind: RecordKind, name: &str, v: f64) -> Result<()> {
        let rec = Record::num(kind, self.env_steps, self.agent.updates(), name, v);
        self.sink.record(rec)
    }

    fn eval(&mut self) -> Result<()> {
        let rets = evaluate(
            &self.cfg.env,
            &self.agent,
            self.cfg.eval_episodes,
            &mut self.eval_rng,
        )?;
        let n = rets.len() as f64;
        let mean = rets.iter().sum::<f64>() / n;
        let var = rets.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        self.record(RecordKind::EvalReturn, "mean", mean)?;
        self.record(RecordKind::EvalReturn, "std", libm::sqrt(var))?;
        self.evals.push((self.env_steps, mean));
        if self.window.n > 0 {
            let w = core::mem::take(&mut self.window);
            let n = w.n as f64;
            self.record(RecordKind::TrainLoss, "critic", w.critic / n)?;
            self.record(RecordKind::TrainLoss, "actor", w.actor / n)?;
            self.record(RecordKind::TrainLoss, "target_mean", w.target / n)?;
            if let Some(a) = self.agent.alpha() {
                self.record(RecordKind::TrainLoss, "alpha_loss", w.alpha_loss / n)?;
                self.record(RecordKind::TrainLoss, "alpha", a)?;
            }
        }
        self.sink.flush()
    }

    fn snapshot(&self) -> ParamMap {
        Snapshot {
            agent: self.agent.clone(),
            buffer: self.buffer.clone(),
            model: self.model.clone(),
            env_step: self.env_steps,
        }
        .to_params()
    }

    fn act(&mut self) -> Result<()> {
        let spec = &self.cfg.env;
        let obs = Tensor::row(observe(spec, &self.state.x));
        let noise = normal_tensor(&mut self.explore_rng, 1, spec.act_dim());
        let (a, lp) = self.agent.policy().behaviour_action(&obs, &noise)?;
        let (next, r) = env_step(spec, &self.state, a.data())?;
        self.buffer.push_transition(a.data(), r, lp.item(), &next);
        self.state = next;
        self.env_steps += 1;
        if self.state.step >= spec.episode_len {
            self.buffer.close_episode(true);
            self.state = env_reset(spec, &mut self.reset_rng);
            self.buffer.begin_episode(&self.state);
        }
        Ok(())
    }

    fn train_model(&mut self) -> Result<()> {
        let due = match self.model_trained_at {
            None => true,
            Some(at) => self.env_steps - at >= self.cfg.model_every,
        };
        if !due {
            return Ok(());
        }
        if let Some(DynamicsModel::Ensemble(e)) = &mut self.model {
            let trace = e.train(
                &self.buffer,
                self.cfg.model_batches,
                self.cfg.model_batch_size,
                self.cfg.ensemble.lr,
                &mut self.model_rng,
            )?;
            if let Some(last) = trace.last() {
                let mean = last.iter().sum::<f64>() / last.len() as f64;
                self.record(RecordKind::TrainLoss, "model", mean)?;
            }
        }
        self.model_trained_at = Some(self.env_steps);
        Ok(())
    }

    fn update(&mut self) -> Result<()> {
        let members = self.model.as_ref().map_or(1, DynamicsModel::num_members);
        for _ in 0..self.cfg.agent.updates_per_step {
            let batch = self
                .agent
                .draw_update(&self.buffer, members, &mut self.update_rng)?;
            let every = self.cfg.grad_stats_every;
            let stats =
                (every > 0 && self.agent.updates() % every == 0).then_some(self.cfg.aggregation);
            let report = self
                .agent
                .update(&batch, self.model.as_ref(), &mut *self.sink, stats)?;
            self.window.add(&report);
            for (c, s) in [
                ("critic", report.critic_stats),
                ("actor", report.actor_stats),
            ] {
                if let Some(s) = s {
                    let upd = self.agent.updates() - 1;
                    self.sink.record(Record::num(
                        RecordKind::GradStats,
                        self.env_steps,
                        upd,
                        format!("{c}_mean"),
                        s.mean,
                    ))?;
                    self.sink.record(Record::num(
                        RecordKind::GradStats,
                        self.env_steps,
                        upd,
                        format!("{c}_std"),
                        s.std,
                    ))?;
                }
            }
        }
        Ok(())
    }

    fn body(&mut self) -> Result<()> {
        let cfg = self.cfg;
        while self.env_steps < cfg.total_steps {
            if self.env_steps % cfg.eval_every == 0 {
                self.eval()?;
            }
            if cfg.checkpoint_every > 0
                && self.env_steps > 0
                && self.env_steps % cfg.checkpoint_every == 0
            {
                let snap = self.snapshot();
                self.sink.checkpoint(self.env_steps, &snap)?;
            }
            self.act()?;
            if self.buffer.is_ready() {
                self.train_model()?;
                self.update()?;
            }
        }
        if self.env_steps % cfg.eval_every == 0 {
            self.eval()?;
        }
        Ok(())
    }
}

/// Runs one seeded training cell. Non-finite values end the run early with
/// a recorded reason; other errors are recorded and returned.
pub fn train(cfg: &TrainConfig, seed: u64, sink: &mut dyn Sink) -> Result<RunOutcome> {
    cfg.validate()?;
    let (agent, model) = build(cfg, seed)?;
    let mut reset_rng = stream(seed, Stream::EnvReset);
    let state = env_reset(&cfg.env, &mut reset_rng);
    let mut buffer = SequenceBuffer::new(
        cfg.env.state_dim(),
        cfg.env.act_dim(),
        cfg.replay_capacity,
        cfg.min_replay,
    );
    buffer.begin_episode(&state);
    let mut run = Run {
        cfg,
        sink,
        agent,
        model,
        buffer,
        reset_rng,
        explore_rng: stream(seed, Stream::Exploration),
        update_rng: stream(seed, Stream::Update),
        model_rng: stream(seed, Stream::Model),
        eval_rng: stream(seed, Stream::Eval),
        state,
        env_steps: 0,
        model_trained_at: None,
        window: Window::default(),
        evals: Vec::new(),
    };
    let result = run.body();
    let termination = match result {
        Ok(()) => Termination::Completed,
        Err(e) if is_non_finite(&e) => Termination::NonFinite(e.to_string()),
        Err(e) => {
            let rec = Record::text(
                RecordKind::RunMeta,
                run.env_steps,
                run.agent.updates(),
                "termination",
                format!("error: {e}"),
            );
            run.sink.record(rec)?;
            run.sink.flush()?;
            return Err(e);
        }
    };
    let rec = Record::text(
        RecordKind::RunMeta,
        run.env_steps,
        run.agent.updates(),
        "termination",
        termination.describe(),
    );
    run.sink.record(rec)?;
    let snap = run.snapshot();
    run.sink.checkpoint(run.env_steps, &snap)?;
    run.sink.flush()?;
    Ok(RunOutcome {
        termination,
        env_steps: run.env_steps,
        updates: run.agent.updates(),
        evals: run.evals,
    })
}
