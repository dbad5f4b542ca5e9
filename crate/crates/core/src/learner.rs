//! Episode replay, TD targets, the joint-value loss and the gradient step.
//!
//! A batch is unrolled time-major. Episodes are sorted longest first so
//! that at every timestep the episodes still running form a prefix of
//! the batch; rows past an episode's end are never read, which is what
//! keeps padding out of the loss and the gradients.

use std::cmp::Reverse;
use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{masked_argmax, AgentNet};
use crate::error::{Error, Result};
use crate::mixers::Mixer;
use crate::tensor::{ParamStore, RmsProp, Tape, Tensor, Var};

/// One complete episode. Observation-like fields hold `len + 1` entries:
/// the last one is the observation after the final action.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Per step, `[n_agents, obs_dim]` flat.
    pub obs: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
    /// Per step, `[n_agents, n_actions]` flat.
    pub avail: Vec<Vec<bool>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if t == 0 {
            return Err(Error::Contract("empty episode".into()));
        }
        if self.obs.len() != t + 1 || self.states.len() != t + 1 || self.avail.len() != t + 1 {
            return Err(Error::Contract(format!(
                "episode of {t} steps needs {} observations, states and masks",
                t + 1
            )));
        }
        if self.rewards.len() != t || self.terminated.len() != t {
            return Err(Error::Contract("rewards and flags must match actions".into()));
        }
        if self.terminated[..t - 1].iter().any(|&x| x) {
            return Err(Error::Contract("termination before the last step".into()));
        }
        Ok(())
    }
}

/// Ring of the most recent episodes, sampled uniformly with replacement.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    max_len: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, max_len: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("buffer_size", "must be at least 1"));
        }
        Ok(Self {
            capacity,
            max_len,
            episodes: VecDeque::with_capacity(capacity.min(1024)),
        })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    pub fn store(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if episode.len() > self.max_len {
            return Err(Error::Contract(format!(
                "episode of {} steps exceeds the limit {}",
                episode.len(),
                self.max_len
            )));
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<EpisodeBatch> {
        if self.episodes.is_empty() {
            return Err(Error::Contract("sampling from an empty replay buffer".into()));
        }
        let picked: Vec<&Episode> = (0..batch_size)
            .map(|_| &self.episodes[rng.random_range(0..self.episodes.len())])
            .collect();
        EpisodeBatch::from_episodes(&picked)
    }
}

/// `B` episodes padded to the longest one, stored time-major.
///
/// Episodes are ordered by decreasing length. Padding entries are zero
/// (masks: unavailable) and are never read by the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub batch_size: usize,
    pub max_len: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub lengths: Vec<usize>,
    /// `[max_len + 1][B][n][obs_dim]`.
    pub obs: Vec<f64>,
    /// `[max_len + 1][B][state_dim]`.
    pub states: Vec<f64>,
    /// `[max_len + 1][B][n][n_actions]`.
    pub avail: Vec<bool>,
    /// `[max_len][B][n]`.
    pub actions: Vec<usize>,
    /// `[max_len][B]`.
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub filled: Vec<bool>,
}

impl EpisodeBatch {
    pub fn from_episodes(episodes: &[&Episode]) -> Result<Self> {
        let first = episodes
            .first()
            .ok_or_else(|| Error::Contract("empty batch".into()))?;
        let mut order: Vec<&Episode> = episodes.to_vec();
        order.sort_by_key(|e| Reverse(e.len()));
        let b = order.len();
        let n = first.actions[0].len();
        let obs_dim = first.obs[0].len() / n;
        let n_actions = first.avail[0].len() / n;
        let state_dim = first.states[0].len();
        let max_len = order[0].len();
        let mut batch = Self {
            batch_size: b,
            max_len,
            n_agents: n,
            n_actions,
            obs_dim,
            state_dim,
            lengths: order.iter().map(|e| e.len()).collect(),
            obs: vec![0.0; (max_len + 1) * b * n * obs_dim],
            states: vec![0.0; (max_len + 1) * b * state_dim],
            avail: vec![false; (max_len + 1) * b * n * n_actions],
            actions: vec![0; max_len * b * n],
            rewards: vec![0.0; max_len * b],
            terminated: vec![false; max_len * b],
            filled: vec![false; max_len * b],
        };
        for (j, e) in order.iter().enumerate() {
            e.validate()?;
            for t in 0..=e.len() {
                let (o, s, m) = (&e.obs[t], &e.states[t], &e.avail[t]);
                if o.len() != n * obs_dim || s.len() != state_dim || m.len() != n * n_actions {
                    return Err(Error::shape("episode step", &[n * obs_dim, state_dim], &[o.len(), s.len()]));
                }
                let ob = (t * b + j) * n * obs_dim;
                batch.obs[ob..ob + o.len()].copy_from_slice(o);
                let sb = (t * b + j) * state_dim;
                batch.states[sb..sb + s.len()].copy_from_slice(s);
                let mb = (t * b + j) * n * n_actions;
                batch.avail[mb..mb + m.len()].copy_from_slice(m);
                if t < e.len() {
                    let ab = (t * b + j) * n;
                    batch.actions[ab..ab + n].copy_from_slice(&e.actions[t]);
                    batch.rewards[t * b + j] = e.rewards[t];
                    batch.terminated[t * b + j] = e.terminated[t];
                    batch.filled[t * b + j] = true;
                }
            }
        }
        Ok(batch)
    }

    /// Episodes with a filled step `t`: a prefix of the batch.
    pub fn active_at(&self, t: usize) -> usize {
        self.lengths.iter().take_while(|&&l| l > t).count()
    }

    /// Episodes whose observation `t` exists (`t ≤ len`).
    fn observed_at(&self, t: usize) -> usize {
        self.lengths.iter().take_while(|&&l| l >= t).count()
    }

    pub fn filled_steps(&self) -> usize {
        self.lengths.iter().sum()
    }

    fn obs_rows(&self, t: usize, k: usize) -> &[f64] {
        let w = self.n_agents * self.obs_dim;
        &self.obs[t * self.batch_size * w..(t * self.batch_size + k) * w]
    }

    fn action_rows(&self, t: usize, k: usize) -> &[usize] {
        let n = self.n_agents;
        &self.actions[t * self.batch_size * n..(t * self.batch_size + k) * n]
    }

    fn state_rows(&self, t: usize, k: usize) -> &[f64] {
        let s = self.state_dim;
        &self.states[t * self.batch_size * s..(t * self.batch_size + k) * s]
    }

    fn avail_rows(&self, t: usize, k: usize) -> &[bool] {
        let w = self.n_agents * self.n_actions;
        &self.avail[t * self.batch_size * w..(t * self.batch_size + k) * w]
    }
}

/// Agent network plus mixer, sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct QLearner {
    pub agent: AgentNet,
    pub mixer: Mixer,
}

/// Keeps rows `0..keep` of `[rows, cols]`.
fn prefix_rows(tape: &mut Tape<'_>, x: Var, keep: usize) -> Result<Var> {
    let (r, c) = tape.shape(x);
    if keep == r {
        return Ok(x);
    }
    let flat = tape.reshape(x, 1, r * c)?;
    let cut = tape.slice_cols(flat, 0, keep * c)?;
    tape.reshape(cut, keep, c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One structured record per gradient step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub episode: u64,
    pub env_steps: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub epsilon: f64,
}

impl QLearner {
    /// Utilities for every observed step: entry `t` is `[k_t · n, n_actions]`
    /// with `k_t = observed_at(t)` for `t ≤ last`.
    fn unroll(&self, tape: &mut Tape<'_>, bound: &[Var], batch: &EpisodeBatch, steps: usize, rows_at: impl Fn(usize) -> usize) -> Result<Vec<Var>> {
        let n = batch.n_agents;
        let mut hidden: Option<Var> = None;
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let k = rows_at(t);
            let rows = k * n;
            let last = (t > 0 && self.agent.is_recurrent()).then(|| batch.action_rows(t - 1, k));
            let inputs = self.agent.build_inputs(batch.obs_rows(t, k), last, rows)?;
            let x = tape.constant(inputs, rows, self.agent.input_dim())?;
            let h = match hidden {
                _ if !self.agent.is_recurrent() => None,
                None => Some(tape.constant(vec![0.0; rows * self.agent.hidden], rows, self.agent.hidden)?),
                Some(h) => Some(prefix_rows(tape, h, rows)?),
            };
            let (q, next) = self.agent.forward(tape, bound, x, h)?;
            hidden = next;
            out.push(q);
        }
        Ok(out)
    }

    /// Bootstrapped targets for every filled step, in learner row order
    /// (time-major, then batch): `[filled, out_cols]` flat.
    pub fn compute_targets(&self, target: &ParamStore, batch: &EpisodeBatch, gamma: f64) -> Result<Vec<f64>> {
        let n = batch.n_agents;
        let na = batch.n_actions;
        let cols = self.mixer.out_cols(n);
        let mut tape = Tape::new();
        let bound = tape.bind(target);
        let qs = self.unroll(&mut tape, &bound, batch, batch.max_len + 1, |t| batch.observed_at(t))?;

        let filled = batch.filled_steps();
        let mut chosen = Vec::with_capacity(filled * n);
        let mut states = Vec::with_capacity(filled * batch.state_dim);
        for t in 0..batch.max_len {
            let k = batch.active_at(t);
            let q = tape.value(qs[t + 1]);
            let masks = batch.avail_rows(t + 1, k);
            for row in 0..k * n {
                let m = &masks[row * na..(row + 1) * na];
                let values = &q[row * na..(row + 1) * na];
                let u = masked_argmax(values, m)?;
                chosen.push(values[u]);
            }
            states.extend_from_slice(batch.state_rows(t + 1, k));
        }
        let next = if filled == 0 {
            Vec::new()
        } else {
            let q = tape.constant(chosen, filled, n)?;
            let s = tape.constant(states, filled, batch.state_dim)?;
            let y = self.mixer.forward(&mut tape, &bound, q, s)?;
            tape.value(y).to_vec()
        };

        let mut targets = Vec::with_capacity(filled * cols);
        let mut row = 0;
        for t in 0..batch.max_len {
            for j in 0..batch.active_at(t) {
                let i = t * batch.batch_size + j;
                let cont = if batch.terminated[i] { 0.0 } else { gamma };
                for c in 0..cols {
                    targets.push(batch.rewards[i] + cont * next[row * cols + c]);
                }
                row += 1;
            }
        }
        Ok(targets)
    }

    /// Mean squared TD error over filled steps (and agents, for
    /// independent learners) with its parameter gradients.
    pub fn loss_and_grads(&self, params: &ParamStore, batch: &EpisodeBatch, targets: &[f64]) -> Result<(f64, Vec<Tensor>)> {
        let n = batch.n_agents;
        let cols = self.mixer.out_cols(n);
        let filled = batch.filled_steps();
        if targets.len() != filled * cols {
            return Err(Error::shape("targets", &[filled, cols], &[targets.len()]));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(params);
        let qs = self.unroll(&mut tape, &bound, batch, batch.max_len, |t| batch.active_at(t))?;
        let mut chosen = Vec::with_capacity(batch.max_len);
        let mut states = Vec::with_capacity(filled * batch.state_dim);
        for (t, q) in qs.into_iter().enumerate() {
            let k = batch.active_at(t);
            let g = tape.gather(q, batch.action_rows(t, k).to_vec())?;
            chosen.push(tape.reshape(g, k, n)?);
            states.extend_from_slice(batch.state_rows(t, k));
        }
        let q = tape.concat_rows(&chosen)?;
        let s = tape.constant(states, filled, batch.state_dim)?;
        let y = self.mixer.forward(&mut tape, &bound, q, s)?;
        let target = tape.constant(targets.to_vec(), filled, cols)?;
        let d = tape.sub(y, target)?;
        let sq = tape.mul(d, d)?;
        let total = tape.sum_all(sq)?;
        let loss = tape.affine(total, 1.0 / (filled * cols) as f64, 0.0)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::Divergence(format!("loss is {value} on a batch of {filled} steps")));
        }
        let grads = tape.backward(loss)?.collect(&bound, params);
        Ok((value, grads))
    }

    /// Targets, loss, backward pass and one optimiser update.
    pub fn train_on_batch(
        &self,
        params: &mut ParamStore,
        target: &ParamStore,
        opt: &mut RmsProp,
        batch: &EpisodeBatch,
        gamma: f64,
    ) -> Result<TrainMetrics> {
        let targets = self.compute_targets(target, batch, gamma)?;
        let (loss, grads) = self.loss_and_grads(params, batch, &targets)?;
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence(format!("gradient norm is {grad_norm} at loss {loss}")));
        }
        opt.step(params, &grads)?;
        Ok(TrainMetrics { loss, grad_norm })
    }
}

/// Hard copy of the online parameters every `period` episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSync {
    pub period: u64,
    last: u64,
}

impl TargetSync {
    pub fn new(period: u64) -> Result<Self> {
        if period == 0 {
            return Err(Error::config("target_update_episodes", "must be at least 1"));
        }
        Ok(Self { period, last: 0 })
    }

    /// Copies when `episode` has moved at least one period past the last
    /// sync; returns whether it did.
    pub fn maybe_sync(&mut self, episode: u64, params: &ParamStore, target: &mut ParamStore) -> Result<bool> {
        if episode >= self.last + self.period {
            target.copy_from(params)?;
            self.last = episode - episode % self.period;
            return Ok(true);
        }
        Ok(false)
    }
}
