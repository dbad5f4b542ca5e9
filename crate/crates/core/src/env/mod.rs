//! The decentralised multi-agent environment contract.
//!
//! Agents share one team reward, draw their own observations, and pick
//! actions from per-agent availability masks. A global state vector is
//! exposed for centralised training only.

mod trace;
mod two_step;

pub use trace::{read_trace, write_trace, StepRecord};
pub use two_step::{Phase, TwoStepGame, ACTION_A, ACTION_B};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_agents", self.n_agents),
            ("n_actions", self.n_actions),
            ("obs_dim", self.obs_dim),
            ("state_dim", self.state_dim),
            ("episode_limit", self.episode_limit),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    /// Team reward shared by every agent.
    pub reward: f64,
    pub terminated: bool,
    /// The step limit ended the episode; never set together with
    /// `terminated`.
    pub truncated: bool,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait MultiAgentEnv {
    fn spec(&self) -> EnvSpec;

    /// Restarts the episode; returns per-agent observations and the state.
    fn reset(&mut self, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>);

    fn observations(&self) -> Vec<Vec<f64>>;

    fn state(&self) -> Vec<f64>;

    fn available_actions(&self, agent: usize) -> Vec<bool>;

    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;

    /// Steps taken since the last reset.
    fn steps(&self) -> usize;

    /// Whether the episode ended in a victory; environments without a
    /// notion of winning report `false`.
    fn won(&self) -> bool {
        false
    }

    fn all_available_actions(&self) -> Vec<Vec<bool>> {
        (0..self.spec().n_agents)
            .map(|a| self.available_actions(a))
            .collect()
    }
}

/// Rejects joint actions of the wrong arity or containing masked actions.
pub(crate) fn check_joint_action<E: MultiAgentEnv + ?Sized>(env: &E, actions: &[usize]) -> Result<()> {
    let spec = env.spec();
    if actions.len() != spec.n_agents {
        return Err(Error::Contract(format!(
            "expected {} actions, got {}",
            spec.n_agents,
            actions.len()
        )));
    }
    for (agent, &a) in actions.iter().enumerate() {
        let mask = env.available_actions(agent);
        if !mask.get(a).copied().unwrap_or(false) {
            return Err(Error::Contract(format!(
                "agent {agent} chose unavailable action {a}"
            )));
        }
    }
    Ok(())
}

pub(crate) fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}
