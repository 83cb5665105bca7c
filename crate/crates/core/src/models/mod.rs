//! Dynamics models used for value-expansion rollouts: the true simulator
//! and a learned probabilistic ensemble. Both predict physical states and
//! are differentiable with respect to state and action.

mod ensemble;

pub use ensemble::{EnsembleConfig, EnsembleModel, Normalizer};

use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::{Tape, Tensor, Var};
use crate::envs::{observe_taped, reward_taped, step_taped, EnvSpec};
use crate::error::{Error, Result};
use crate::nets::Actor;
use crate::rng::{normal_tensor, Rng};

/// The environment's own differentiable step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleModel {
    pub spec: EnvSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DynamicsModel {
    Oracle(OracleModel),
    Ensemble(EnsembleModel),
}

impl DynamicsModel {
    pub fn oracle(spec: EnvSpec) -> Self {
        DynamicsModel::Oracle(OracleModel { spec })
    }

    pub fn spec(&self) -> &EnvSpec {
        match self {
            DynamicsModel::Oracle(o) => &o.spec,
            DynamicsModel::Ensemble(e) => e.spec(),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, DynamicsModel::Ensemble(_))
    }

    pub fn num_members(&self) -> usize {
        match self {
            DynamicsModel::Oracle(_) => 1,
            DynamicsModel::Ensemble(e) => e.num_members(),
        }
    }

    /// Places model parameters on `tape` as constants.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel<'_> {
        match self {
            DynamicsModel::Oracle(o) => BoundModel::Oracle(o.spec),
            DynamicsModel::Ensemble(e) => BoundModel::Ensemble(e.bind(tape)),
        }
    }
}

pub enum BoundModel<'a> {
    Oracle(EnvSpec),
    Ensemble(ensemble::BoundEnsemble<'a>),
}

impl BoundModel<'_> {
    /// Next states for `[batch, state_dim]` states and `[batch, act_dim]`
    /// actions. `noise` (`[batch, state_dim]`) and `members` (one per row)
    /// are ignored by the oracle.
    pub fn predict(
        &self,
        tape: &mut Tape,
        state: Var,
        action: Var,
        noise: &Tensor,
        members: &[usize],
    ) -> Result<Var> {
        match self {
            BoundModel::Oracle(spec) => Ok(step_taped(spec, tape, state, action)?.0),
            BoundModel::Ensemble(e) => e.predict(tape, state, action, noise, members),
        }
    }
}

/// Tape-free prediction.
pub fn model_predict(
    model: &DynamicsModel,
    state: &Tensor,
    action: &Tensor,
    noise: &Tensor,
    members: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bm = model.bind(&mut tape);
    let (s, a) = (tape.constant(state.clone()), tape.constant(action.clone()));
    let n = bm.predict(&mut tape, s, a, noise, members)?;
    Ok(tape.value(n).clone())
}

/// Externally drawn randomness for one rollout of `batch` start states and
/// `h` model steps: `policy[t]` for the action at state `t` (`t = 0..=h`),
/// `model[t]` and `members[t]` for transition `t` (`t = 0..h`).
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutNoise {
    pub policy: Vec<Tensor>,
    pub model: Vec<Tensor>,
    pub members: Vec<Vec<usize>>,
}

impl RolloutNoise {
    pub fn draw(
        rng: &mut Rng,
        batch: usize,
        h: usize,
        state_dim: usize,
        act_dim: usize,
        num_members: usize,
    ) -> Self {
        let policy = (0..=h)
            .map(|_| normal_tensor(rng, batch, act_dim))
            .collect();
        let mut model = Vec::with_capacity(h);
        let mut members = Vec::with_capacity(h);
        for _ in 0..h {
            model.push(normal_tensor(rng, batch, state_dim));
            members.push(
                (0..batch)
                    .map(|_| rng.random_range(0..num_members))
                    .collect(),
            );
        }
        RolloutNoise {
            policy,
            model,
            members,
        }
    }

    /// The given rows of every noise tensor, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        RolloutNoise {
            policy: self.policy.iter().map(|t| t.select_rows(rows)).collect(),
            model: self.model.iter().map(|t| t.select_rows(rows)).collect(),
            members: self
                .members
                .iter()
                .map(|m| rows.iter().map(|&r| m[r]).collect())
                .collect(),
        }
    }
}

/// On-policy model rollout kept on the tape. `states` has `h + 1` entries;
/// `actions`, `log_probs` and `rewards` have `h + 1` entries too, where the
/// last action is drawn at `s_h` for bootstrapping and its reward is absent.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub states: Vec<Var>,
    pub obs: Vec<Var>,
    pub actions: Vec<Var>,
    pub log_probs: Vec<Option<Var>>,
    pub rewards: Vec<Var>,
}

impl Rollout {
    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }
}

/// Unrolls `h` model steps from `start` states. The first action is
/// `first` when given, otherwise drawn from the policy with `noise.policy[0]`.
/// Rewards come from the true reward function.
#[allow(clippy::too_many_arguments)]
pub fn model_rollout(
    tape: &mut Tape,
    model: &BoundModel<'_>,
    spec: &EnvSpec,
    policy: &dyn Actor,
    start: Var,
    first: Option<(Var, Option<Var>)>,
    h: usize,
    noise: &RolloutNoise,
) -> Result<Rollout> {
    if noise.policy.len() < h + 1 || noise.model.len() < h || noise.members.len() < h {
        return Err(Error::ShortSegment {
            have: noise.policy.len(),
            need: h + 1,
        });
    }
    let mut out = Rollout {
        states: Vec::with_capacity(h + 1),
        obs: Vec::with_capacity(h + 1),
        actions: Vec::with_capacity(h + 1),
        log_probs: Vec::with_capacity(h + 1),
        rewards: Vec::with_capacity(h),
    };
    let mut s = start;
    for t in 0..=h {
        let o = observe_taped(spec, tape, s)?;
        let (a, lp) = match (t, first) {
            (0, Some(f)) => f,
            _ => {
                let smp = policy.sample(tape, o, &noise.policy[t])?;
                (smp.action, smp.log_prob)
            }
        };
        out.states.push(s);
        out.obs.push(o);
        out.actions.push(a);
        out.log_probs.push(lp);
        if t == h {
            break;
        }
        let r = reward_taped(spec, tape, s, a)?;
        let next = model
            .predict(tape, s, a, &noise.model[t], &noise.members[t])
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteRollout {
                    what: "state",
                    step: t + 1,
                },
                other => other,
            })?;
        out.rewards.push(r);
        s = next;
    }
    Ok(out)
}
