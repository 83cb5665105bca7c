//! Run configuration: TOML files layered with command-line overrides.
//!
//! Every key of [`RunConfig`] may appear in a config file or as a
//! `--key value` flag. Unspecified keys take defaults that depend on the
//! environment (discount, action repeat, step budget) and on the mode
//! (particle count).

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use vexp_core::agents::{AgentConfig, Algorithm, Mode, ModelKind, TrainConfig};
use vexp_core::diagnostics::Aggregation;
use vexp_core::envs::EnvSpec;
use vexp_core::models::EnsembleConfig;
use vexp_core::rng::mix;

use crate::error::{LabError, Result};

/// Fully resolved configuration of one experiment cell family. A cell is a
/// config plus one of its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `pendulum` or `cartpole`.
    pub env: String,
    /// `sac` or `ddpg`.
    pub algorithm: String,
    /// `vanilla`, `ce`, `ae` or `retrace`.
    pub mode: String,
    /// `none`, `oracle` or `ensemble`.
    pub model: String,
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub particles: usize,
    pub seeds: Vec<u64>,
    /// Agent steps.
    pub total_steps: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub initial_alpha: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub updates_per_step: usize,
    /// Hidden widths of policy and critic networks.
    pub hidden: Vec<usize>,
    /// DDPG exploration noise.
    pub exploration_std: f64,
    pub min_replay: usize,
    pub replay_capacity: usize,
    pub action_repeat: usize,
    pub model_every: u64,
    pub model_batches: usize,
    pub model_batch_size: usize,
    pub ensemble_members: usize,
    pub ensemble_hidden: Vec<usize>,
    pub ensemble_lr: f64,
    pub logvar_penalty: f64,
    /// Updates between gradient statistics; 0 disables them.
    pub grad_stats_every: u64,
    /// `batch_then_dims` or `dims_then_batch`.
    pub grad_aggregation: String,
    /// Agent steps between intermediate checkpoints; 0 keeps the final one
    /// only.
    pub checkpoint_every: u64,
}

pub const ENVS: [&str; 2] = ["pendulum", "cartpole"];
pub const AGGREGATIONS: [&str; 2] = ["batch_then_dims", "dims_then_batch"];

fn aggregation_name(a: Aggregation) -> &'static str {
    match a {
        Aggregation::BatchThenDims => AGGREGATIONS[0],
        Aggregation::DimsThenBatch => AGGREGATIONS[1],
    }
}

impl RunConfig {
    /// Defaults for `env` and `mode`. Network widths are desk-scale.
    pub fn defaults(env: &str, mode: &str) -> Result<Self> {
        let (gamma, action_repeat, total_steps) = match env {
            "pendulum" => (0.95, 4, 30_000),
            "cartpole" => (0.99, 2, 100_000),
            other => {
                return Err(LabError::config(
                    "env",
                    format!("unknown environment `{other}`, expected one of {ENVS:?}"),
                ))
            }
        };
        let m = Mode::from_name(mode)
            .ok_or_else(|| LabError::config("mode", format!("unknown mode `{mode}`")))?;
        let model = if matches!(m, Mode::CriticExpansion | Mode::ActorExpansion) {
            ModelKind::Oracle
        } else {
            ModelKind::None
        };
        let a = AgentConfig::new(Algorithm::Sac, m, model);
        let t = TrainConfig::new(a.clone(), EnvSpec::pendulum(), total_steps);
        Ok(RunConfig {
            env: env.into(),
            algorithm: Algorithm::Sac.as_str().into(),
            mode: mode.into(),
            model: model.as_str().into(),
            horizon: a.horizon,
            gamma,
            lambda: a.lambda,
            particles: a.particles,
            seeds: (0..5).collect(),
            total_steps,
            eval_every: t.eval_every,
            eval_episodes: t.eval_episodes,
            policy_lr: a.policy_lr,
            critic_lr: a.critic_lr,
            alpha_lr: a.alpha_lr,
            initial_alpha: a.initial_alpha,
            tau: a.tau,
            batch_size: a.batch_size,
            updates_per_step: a.updates_per_step,
            hidden: vec![64, 64],
            exploration_std: a.exploration_std,
            min_replay: t.min_replay,
            replay_capacity: t.replay_capacity,
            action_repeat,
            model_every: t.model_every,
            model_batches: t.model_batches,
            model_batch_size: t.model_batch_size,
            ensemble_members: t.ensemble.members,
            ensemble_hidden: vec![64; 4],
            ensemble_lr: t.ensemble.lr,
            logvar_penalty: t.ensemble.logvar_penalty,
            grad_stats_every: t.grad_stats_every,
            grad_aggregation: aggregation_name(t.aggregation).into(),
            checkpoint_every: t.checkpoint_every,
        })
    }

    /// Names of all keys, in declaration order.
    pub fn keys() -> Vec<String> {
        let d = Self::defaults("pendulum", "vanilla").expect("built-in defaults");
        let text = toml::to_string(&d).expect("config serializes");
        text.lines()
            .filter_map(|l| l.split_once(" = ").map(|(k, _)| k.trim().to_string()))
            .collect()
    }

    /// Resolves layered key/value tables, later layers winning, onto the
    /// defaults and validates the result.
    pub fn resolve(layers: &[Table]) -> Result<Self> {
        let mut user = Table::new();
        for layer in layers {
            for (k, v) in layer {
                user.insert(k.clone(), v.clone());
            }
        }
        let env = string_key(&user, "env")?.unwrap_or("pendulum").to_string();
        let mode = string_key(&user, "mode")?.unwrap_or("vanilla").to_string();
        let defaults = Self::defaults(&env, &mode)?;
        let mut table = Table::try_from(&defaults).map_err(|e| LabError::Parse(e.to_string()))?;
        for (k, v) in user {
            let Some(default) = table.get(&k) else {
                return Err(LabError::config(&k, "unknown key"));
            };
            let v = conform(&k, default, v)?;
            table.insert(k, v);
        }
        let text = toml::to_string(&table).map_err(|e| LabError::Parse(e.to_string()))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| LabError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file, then applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Table) -> Result<Self> {
        let mut layers = Vec::new();
        if let Some(p) = path {
            layers.push(read_table(p)?);
        }
        layers.push(overrides.clone());
        Self::resolve(&layers)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| LabError::Parse(e.to_string()))?;
        Self::resolve(&[table])
    }

    pub fn algorithm(&self) -> Algorithm {
        Algorithm::from_name(&self.algorithm).expect("validated")
    }

    pub fn mode_kind(&self) -> Mode {
        Mode::from_name(&self.mode).expect("validated")
    }

    pub fn model_kind(&self) -> ModelKind {
        ModelKind::from_name(&self.model).expect("validated")
    }

    pub fn env_spec(&self) -> EnvSpec {
        let mut spec = match self.env.as_str() {
            "cartpole" => EnvSpec::cartpole(),
            _ => EnvSpec::pendulum(),
        };
        spec.action_repeat = self.action_repeat;
        spec
    }

    /// Best achievable undiscounted episode return.
    pub fn max_return(&self) -> f64 {
        let spec = self.env_spec();
        spec.max_reward() * spec.episode_len as f64
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut a = AgentConfig::new(self.algorithm(), self.mode_kind(), self.model_kind());
        a.horizon = self.horizon;
        a.gamma = self.gamma;
        a.lambda = self.lambda;
        a.particles = self.particles;
        a.policy_lr = self.policy_lr;
        a.critic_lr = self.critic_lr;
        a.alpha_lr = self.alpha_lr;
        a.initial_alpha = self.initial_alpha;
        a.tau = self.tau;
        a.batch_size = self.batch_size;
        a.updates_per_step = self.updates_per_step;
        a.hidden = self.hidden.clone();
        a.exploration_std = self.exploration_std;
        let mut t = TrainConfig::new(a, self.env_spec(), self.total_steps);
        t.min_replay = self.min_replay;
        t.replay_capacity = self.replay_capacity;
        t.eval_every = self.eval_every;
        t.eval_episodes = self.eval_episodes;
        t.model_every = self.model_every;
        t.model_batches = self.model_batches;
        t.model_batch_size = self.model_batch_size;
        t.ensemble = EnsembleConfig {
            members: self.ensemble_members,
            hidden: self.ensemble_hidden.clone(),
            lr: self.ensemble_lr,
            logvar_penalty: self.logvar_penalty,
        };
        t.grad_stats_every = self.grad_stats_every;
        t.aggregation = if self.grad_aggregation == AGGREGATIONS[1] {
            Aggregation::DimsThenBatch
        } else {
            Aggregation::BatchThenDims
        };
        t.checkpoint_every = self.checkpoint_every;
        t
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(LabError::config(k, m));
        if !ENVS.contains(&self.env.as_str()) {
            return err("env", "unknown environment");
        }
        if Algorithm::from_name(&self.algorithm).is_none() {
            return err("algorithm", "expected `sac` or `ddpg`");
        }
        if Mode::from_name(&self.mode).is_none() {
            return err("mode", "expected `vanilla`, `ce`, `ae` or `retrace`");
        }
        if ModelKind::from_name(&self.model).is_none() {
            return err("model", "expected `none`, `oracle` or `ensemble`");
        }
        if !AGGREGATIONS.contains(&self.grad_aggregation.as_str()) {
            return err(
                "grad_aggregation",
                "expected `batch_then_dims` or `dims_then_batch`",
            );
        }
        let in_unit = |v: f64| (0.0..1.0).contains(&v);
        if !in_unit(self.gamma) {
            return err("gamma", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return err("lambda", "must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return err("tau", "must lie in (0, 1]");
        }
        for (k, v) in [
            ("policy_lr", self.policy_lr),
            ("critic_lr", self.critic_lr),
            ("alpha_lr", self.alpha_lr),
            ("initial_alpha", self.initial_alpha),
            ("ensemble_lr", self.ensemble_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return err(k, "must be positive");
            }
        }
        if !(self.exploration_std >= 0.0 && self.exploration_std.is_finite()) {
            return err("exploration_std", "must be non-negative");
        }
        if !(self.logvar_penalty >= 0.0 && self.logvar_penalty.is_finite()) {
            return err("logvar_penalty", "must be non-negative");
        }
        for (k, v) in [
            ("particles", self.particles as u64),
            ("total_steps", self.total_steps),
            ("eval_every", self.eval_every),
            ("eval_episodes", self.eval_episodes as u64),
            ("batch_size", self.batch_size as u64),
            ("updates_per_step", self.updates_per_step as u64),
            ("replay_capacity", self.replay_capacity as u64),
            ("action_repeat", self.action_repeat as u64),
            ("model_every", self.model_every),
            ("model_batch_size", self.model_batch_size as u64),
            ("ensemble_members", self.ensemble_members as u64),
        ] {
            if v == 0 {
                return err(k, "must be positive");
            }
        }
        if self.seeds.is_empty() {
            return err("seeds", "must list at least one seed");
        }
        if self.seeds.iter().any(|&s| s > i64::MAX as u64) {
            return err("seeds", "seeds must fit a TOML integer (at most 2^63 - 1)");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return err("hidden", "needs at least one positive width");
        }
        if self.ensemble_hidden.is_empty() || self.ensemble_hidden.contains(&0) {
            return err("ensemble_hidden", "needs at least one positive width");
        }
        if self.min_replay > self.replay_capacity {
            return err("min_replay", "exceeds replay_capacity");
        }
        if self.min_replay < self.batch_size.max(1) {
            return err("min_replay", "must hold at least one batch");
        }
        let (mode, model) = (self.mode_kind(), self.model_kind());
        match mode {
            Mode::Vanilla | Mode::Retrace if model != ModelKind::None => {
                return Err(LabError::Combination(format!(
                    "mode `{}` uses no model, got model `{}`",
                    self.mode, self.model
                )))
            }
            Mode::CriticExpansion | Mode::ActorExpansion if model == ModelKind::None => {
                return Err(LabError::Combination(format!(
                    "mode `{}` needs a model",
                    self.mode
                )))
            }
            Mode::Vanilla if self.horizon > 0 => {
                return Err(LabError::Combination("mode `vanilla` has horizon 0".into()));
            }
            _ => {}
        }
        self.train_config()
            .validate()
            .map_err(|e| LabError::Combination(e.to_string()))
    }

    /// SHA-256 of the configuration without its seed list, hex encoded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        Sha256::digest(c.to_toml().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Seed actually fed to the training run for `seed`.
    pub fn cell_seed(&self, seed: u64) -> u64 {
        let h = self.hash();
        let word = u64::from_str_radix(&h[..16], 16).expect("hex digest");
        mix(word, seed)
    }
}

fn string_key<'a>(t: &'a Table, key: &str) -> Result<Option<&'a str>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(LabError::config(
            key,
            format!("expected a string, got {}", other.type_str()),
        )),
    }
}

/// Checks `v` against the type of the default for `key`, widening
/// integers to floats where a float is expected.
fn conform(key: &str, default: &Value, v: Value) -> Result<Value> {
    let mismatch = |got: &Value| {
        LabError::config(
            key,
            format!("expected {}, got {}", default.type_str(), got.type_str()),
        )
    };
    match (default, v) {
        (Value::Float(_), Value::Integer(i)) => Ok(Value::Float(i as f64)),
        (Value::Integer(_), Value::Integer(i)) if i < 0 => {
            Err(LabError::config(key, "must be non-negative"))
        }
        (Value::Array(_), v) if !v.is_array() => conform(key, default, Value::Array(vec![v])),
        (Value::Array(d), Value::Array(items)) => {
            let proto = d.first().cloned().unwrap_or(Value::Integer(0));
            items
                .into_iter()
                .map(|x| conform(key, &proto, x))
                .collect::<Result<Vec<_>>>()
                .map(Value::Array)
        }
        (d, v) if d.same_type(&v) => Ok(v),
        (_, v) => Err(mismatch(&v)),
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    text.parse()
        .map_err(|e: toml::de::Error| LabError::Parse(format!("{}: {e}", path.display())))
}

/// Parses command-line overrides of the form `--key value` or
/// `--key=value`. Values are read as TOML where possible (so `0.9`, `3`,
/// `[64, 64]` keep their types), comma lists become arrays, and anything
/// else is a string.
pub fn parse_overrides(args: &[String]) -> Result<Table> {
    let mut out = Table::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            return Err(LabError::Usage(format!("unexpected argument `{a}`")));
        };
        let (key, raw) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| LabError::config(flag, "missing value"))?;
                (flag.to_string(), v.clone())
            }
        };
        out.insert(key.replace('-', "_"), parse_value(&raw));
    }
    Ok(out)
}

fn parse_value(raw: &str) -> Value {
    let attempt = |s: &str| s.parse::<Table>().ok().and_then(|mut t| t.remove("v"));
    if let Some(v) = attempt(&format!("v = {raw}")) {
        return v;
    }
    if raw.contains(',') {
        let items: Vec<Value> = raw.split(',').map(|p| parse_value(p.trim())).collect();
        return Value::Array(items);
    }
    Value::String(raw.to_string())
}
