//! Episode-structured replay storage with uniform transition and segment
//! sampling. Stored states are physical environment states.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::autodiff::Tensor;
use crate::checkpoint::ParamMap;
use crate::envs::{EnvState, Trajectory};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_CAPACITY: usize = 1_000_000;

/// Column-stacked transitions; every field has one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionBatch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Tensor,
    pub next_states: Tensor,
    pub log_mu: Tensor,
    pub truncated: Vec<bool>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.rewards.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Time-major batch of contiguous segments: `states[t]` is `[n, state_dim]`
/// for `t = 0..=len`, the other fields have `len` entries of `[n, _]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    pub states: Vec<Tensor>,
    pub actions: Vec<Tensor>,
    pub rewards: Vec<Tensor>,
    pub log_mu: Vec<Tensor>,
    /// Episode step index of each segment's first state.
    pub start_steps: Vec<usize>,
}

impl SegmentBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.start_steps.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBuffer {
    episodes: VecDeque<Trajectory>,
    capacity: usize,
    min_fill: usize,
    total: usize,
    /// The newest episode is still receiving transitions.
    open: bool,
    state_dim: usize,
    act_dim: usize,
}

impl SequenceBuffer {
    pub fn new(state_dim: usize, act_dim: usize, capacity: usize, min_fill: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        SequenceBuffer {
            episodes: VecDeque::new(),
            capacity,
            min_fill,
            total: 0,
            open: false,
            state_dim,
            act_dim,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn min_fill(&self) -> usize {
        self.min_fill
    }

    pub fn is_ready(&self) -> bool {
        self.total >= self.min_fill.max(1)
    }

    pub fn episodes(&self) -> impl Iterator<Item = &Trajectory> {
        self.episodes.iter()
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    /// Stores a finished episode piece. Closes any open episode first.
    pub fn push_episode(&mut self, episode: Trajectory) {
        self.open = false;
        if episode.is_empty() {
            return;
        }
        self.total += episode.len();
        self.episodes.push_back(episode);
        self.evict();
    }

    /// Starts an episode that grows through [`SequenceBuffer::push_transition`].
    pub fn begin_episode(&mut self, first: &EnvState) {
        self.close_episode(false);
        self.episodes
            .push_back(Trajectory::new(self.state_dim, self.act_dim, first));
        self.open = true;
    }

    pub fn push_transition(&mut self, action: &[f64], reward: f64, log_mu: f64, next: &EnvState) {
        assert!(self.open, "push_transition requires an open episode");
        let ep = self.episodes.back_mut().expect("open episode exists");
        ep.push(action, reward, log_mu, &next.x);
        self.total += 1;
        self.evict();
    }

    /// Closes the open episode, marking whether it reached the horizon.
    pub fn close_episode(&mut self, truncated: bool) {
        if !self.open {
            return;
        }
        self.open = false;
        if let Some(ep) = self.episodes.back_mut() {
            ep.truncated = truncated;
            if ep.is_empty() {
                self.episodes.pop_back();
            }
        }
    }

    /// Drops whole episodes oldest first; a lone oversized episode loses its
    /// oldest transitions instead.
    fn evict(&mut self) {
        while self.total > self.capacity {
            if self.episodes.len() > 1 {
                let gone = self.episodes.pop_front().expect("non-empty");
                self.total -= gone.len();
            } else {
                let ep = self.episodes.front_mut().expect("non-empty");
                let drop = self.total - self.capacity;
                let (sd, ad) = (ep.state_dim, ep.act_dim);
                ep.states.drain(..drop * sd);
                ep.actions.drain(..drop * ad);
                ep.rewards.drain(..drop);
                ep.log_mu.drain(..drop);
                ep.start_step += drop;
                self.total -= drop;
            }
        }
    }

    fn check_fill(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::EmptyBuffer);
        }
        if self.total < self.min_fill {
            return Err(Error::Underfilled {
                have: self.total,
                need: self.min_fill,
            });
        }
        Ok(())
    }

    /// Maps a global index over valid starts of `len`-step windows to
    /// `(episode, offset)`.
    fn locate(&self, mut idx: usize, len: usize) -> (usize, usize) {
        for (e, ep) in self.episodes.iter().enumerate() {
            let valid = (ep.len() + 1).saturating_sub(len);
            if idx < valid {
                return (e, idx);
            }
            idx -= valid;
        }
        unreachable!("index within the number of valid starts")
    }

    fn valid_starts(&self, len: usize) -> usize {
        self.episodes
            .iter()
            .map(|ep| (ep.len() + 1).saturating_sub(len))
            .sum()
    }

    /// `n` transitions uniformly with replacement.
    pub fn sample_transitions(&self, n: usize, rng: &mut Rng) -> Result<TransitionBatch> {
        self.check_fill()?;
        let (sd, ad) = (self.state_dim, self.act_dim);
        let mut s = Vec::with_capacity(n * sd);
        let mut a = Vec::with_capacity(n * ad);
        let mut r = Vec::with_capacity(n);
        let mut s2 = Vec::with_capacity(n * sd);
        let mut lm = Vec::with_capacity(n);
        let mut tr = Vec::with_capacity(n);
        for _ in 0..n {
            let (e, t) = self.locate(rng.random_range(0..self.total), 1);
            let ep = &self.episodes[e];
            s.extend_from_slice(ep.state(t));
            a.extend_from_slice(ep.action(t));
            r.push(ep.rewards[t]);
            s2.extend_from_slice(ep.state(t + 1));
            lm.push(ep.log_mu[t]);
            tr.push(ep.truncated && t + 1 == ep.len());
        }
        Ok(TransitionBatch {
            states: Tensor::matrix(n, sd, s),
            actions: Tensor::matrix(n, ad, a),
            rewards: Tensor::matrix(n, 1, r),
            next_states: Tensor::matrix(n, sd, s2),
            log_mu: Tensor::matrix(n, 1, lm),
            truncated: tr,
        })
    }

    /// `n` segments of `len` transitions, uniform over start offsets that
    /// keep the segment inside one episode. With `len = 1` the draws match
    /// [`SequenceBuffer::sample_transitions`] exactly.
    pub fn sample_segments(&self, n: usize, len: usize, rng: &mut Rng) -> Result<SegmentBatch> {
        self.check_fill()?;
        if len == 0 {
            return Err(Error::NoValidSegments { len });
        }
        let valid = self.valid_starts(len);
        if valid == 0 {
            return Err(Error::NoValidSegments { len });
        }
        let (sd, ad) = (self.state_dim, self.act_dim);
        let mut states = alloc::vec![Vec::with_capacity(n * sd); len + 1];
        let mut actions = alloc::vec![Vec::with_capacity(n * ad); len];
        let mut rewards = alloc::vec![Vec::with_capacity(n); len];
        let mut log_mu = alloc::vec![Vec::with_capacity(n); len];
        let mut start_steps = Vec::with_capacity(n);
        for _ in 0..n {
            let (e, off) = self.locate(rng.random_range(0..valid), len);
            let ep = &self.episodes[e];
            for t in 0..len {
                states[t].extend_from_slice(ep.state(off + t));
                actions[t].extend_from_slice(ep.action(off + t));
                rewards[t].push(ep.rewards[off + t]);
                log_mu[t].push(ep.log_mu[off + t]);
            }
            states[len].extend_from_slice(ep.state(off + len));
            start_steps.push(ep.start_step + off);
        }
        let mat = |cols: usize| move |v: Vec<f64>| Tensor::matrix(n, cols, v);
        Ok(SegmentBatch {
            states: states.into_iter().map(mat(sd)).collect(),
            actions: actions.into_iter().map(mat(ad)).collect(),
            rewards: rewards.into_iter().map(mat(1)).collect(),
            log_mu: log_mu.into_iter().map(mat(1)).collect(),
            start_steps,
        })
    }

    pub fn to_params(&self) -> ParamMap {
        let mut m = ParamMap::new();
        let dims = [
            self.state_dim,
            self.act_dim,
            self.capacity,
            self.min_fill,
            self.open as usize,
        ];
        m.insert(
            "meta",
            Tensor::row(dims.iter().map(|&d| d as f64).collect()),
        );
        for (i, ep) in self.episodes.iter().enumerate() {
            let n = ep.len();
            m.insert(
                format!("ep{i}.states"),
                Tensor::matrix(n + 1, ep.state_dim, ep.states.clone()),
            );
            m.insert(
                format!("ep{i}.actions"),
                Tensor::matrix(n, ep.act_dim, ep.actions.clone()),
            );
            m.insert(
                format!("ep{i}.rewards"),
                Tensor::matrix(n, 1, ep.rewards.clone()),
            );
            m.insert(
                format!("ep{i}.log_mu"),
                Tensor::matrix(n, 1, ep.log_mu.clone()),
            );
            m.insert(
                format!("ep{i}.info"),
                Tensor::row(alloc::vec![ep.start_step as f64, ep.truncated as u8 as f64]),
            );
        }
        m
    }

    pub fn from_params(map: &ParamMap) -> Result<Self> {
        let meta = map.require_shaped("meta", &[1, 5])?;
        let d = |i: usize| meta.data()[i] as usize;
        let mut buf = SequenceBuffer::new(d(0), d(1), d(2).max(1), d(3));
        let mut i = 0;
        while map.get(&format!("ep{i}.info")).is_some() {
            let info = map.require_shaped(&format!("ep{i}.info"), &[1, 2])?;
            let rewards = map.require(&format!("ep{i}.rewards"))?.clone();
            let n = rewards.len();
            let ep = Trajectory {
                state_dim: buf.state_dim,
                act_dim: buf.act_dim,
                states: map
                    .require_shaped(&format!("ep{i}.states"), &[n + 1, buf.state_dim])?
                    .into_data(),
                actions: map
                    .require_shaped(&format!("ep{i}.actions"), &[n, buf.act_dim])?
                    .into_data(),
                rewards: rewards.into_data(),
                log_mu: map
                    .require_shaped(&format!("ep{i}.log_mu"), &[n, 1])?
                    .into_data(),
                start_step: info.data()[0] as usize,
                truncated: info.data()[1] != 0.0,
            };
            buf.total += ep.len();
            buf.episodes.push_back(ep);
            i += 1;
        }
        buf.open = d(4) != 0 && !buf.episodes.is_empty();
        Ok(buf)
    }
}
