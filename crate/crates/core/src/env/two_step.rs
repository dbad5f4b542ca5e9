//! Two-agent, two-step cooperative matrix game.
//!
//! In the first step agent 0 picks which payoff matrix is played next and
//! agent 1's action is ignored. In the second step both agents act and
//! receive the payoff of the selected matrix:
//!
//! ```text
//!   state 2A        state 2B
//!      A  B            A  B
//!   A  7  7         A  0  1
//!   B  7  7         B  1  8
//! ```

use super::{check_joint_action, one_hot, EnvSpec, MultiAgentEnv, StepResult};
use crate::error::{Error, Result};

pub const ACTION_A: usize = 0;
pub const ACTION_B: usize = 1;

const PAYOFF_2A: [[f64; 2]; 2] = [[7.0, 7.0], [7.0, 7.0]];
const PAYOFF_2B: [[f64; 2]; 2] = [[0.0, 1.0], [1.0, 8.0]];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    State1,
    State2A,
    State2B,
    Terminal,
}

impl Phase {
    /// Slot in the one-hot encoding; the terminal phase has none.
    pub fn slot(self) -> Option<usize> {
        match self {
            Phase::State1 => Some(0),
            Phase::State2A => Some(1),
            Phase::State2B => Some(2),
            Phase::Terminal => None,
        }
    }

    pub fn encode(self) -> Vec<f64> {
        match self.slot() {
            Some(i) => one_hot(i, 3),
            None => vec![0.0; 3],
        }
    }
}

#[derive(Clone, Debug)]
pub struct TwoStepGame {
    phase: Phase,
    steps: usize,
    gamma: f64,
}

impl Default for TwoStepGame {
    fn default() -> Self {
        Self::new(0.99)
    }
}

impl TwoStepGame {
    pub fn new(gamma: f64) -> Self {
        Self {
            phase: Phase::State1,
            steps: 0,
            gamma,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Puts the game directly into `phase`, as if the preceding steps had
    /// been played.
    pub fn set_phase(&mut self, phase: Phase) {
        self.steps = match phase {
            Phase::State1 => 0,
            Phase::State2A | Phase::State2B => 1,
            Phase::Terminal => 2,
        };
        self.phase = phase;
    }

    pub fn payoff(phase: Phase, a0: usize, a1: usize) -> Option<f64> {
        match phase {
            Phase::State2A => Some(PAYOFF_2A[a0][a1]),
            Phase::State2B => Some(PAYOFF_2B[a0][a1]),
            _ => None,
        }
    }
}

impl MultiAgentEnv for TwoStepGame {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_agents: 2,
            n_actions: 2,
            obs_dim: 3,
            state_dim: 3,
            episode_limit: 2,
            gamma: self.gamma,
        }
    }

    fn reset(&mut self, _seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.phase = Phase::State1;
        self.steps = 0;
        (self.observations(), self.state())
    }

    /// Each agent sees the full one-hot state.
    fn observations(&self) -> Vec<Vec<f64>> {
        vec![self.phase.encode(); 2]
    }

    fn state(&self) -> Vec<f64> {
        self.phase.encode()
    }

    fn available_actions(&self, _agent: usize) -> Vec<bool> {
        vec![true, true]
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        check_joint_action(self, actions)?;
        let (reward, next) = match self.phase {
            Phase::State1 => {
                let next = if actions[0] == ACTION_A {
                    Phase::State2A
                } else {
                    Phase::State2B
                };
                (0.0, next)
            }
            Phase::State2A | Phase::State2B => (
                Self::payoff(self.phase, actions[0], actions[1]).unwrap_or_default(),
                Phase::Terminal,
            ),
            Phase::Terminal => {
                return Err(Error::Contract("step called on a finished episode".into()))
            }
        };
        self.phase = next;
        self.steps += 1;
        Ok(StepResult {
            reward,
            terminated: next == Phase::Terminal,
            truncated: false,
        })
    }

    fn steps(&self) -> usize {
        self.steps
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reset_starts_in_state_one() {
        let mut g = TwoStepGame::default();
        let (obs, state) = g.reset(3);
        assert_eq!(g.phase(), Phase::State1);
        assert_eq!(state, vec![1.0, 0.0, 0.0]);
        let spec = g.spec();
        assert!(obs.iter().all(|o| o.len() == spec.obs_dim));
        assert_eq!(g.reset(3), g.reset(3));
    }

    #[test]
    fn payoffs_follow_the_matrices() {
        let mut g = TwoStepGame::default();
        for a0 in 0..2 {
            for a1 in 0..2 {
                g.set_phase(Phase::State2A);
                let r = g.step(&[a0, a1]).unwrap();
                assert_eq!(r.reward, 7.0);
                assert!(r.terminated);
            }
        }
        g.set_phase(Phase::State2B);
        assert_eq!(g.step(&[ACTION_B, ACTION_B]).unwrap().reward, 8.0);
        g.set_phase(Phase::State2B);
        assert_eq!(g.step(&[ACTION_A, ACTION_A]).unwrap().reward, 0.0);
    }

    #[test]
    fn agent_two_does_not_steer_the_first_step() {
        for a1 in 0..2 {
            let mut g = TwoStepGame::default();
            g.reset(0);
            let r = g.step(&[ACTION_B, a1]).unwrap();
            assert_eq!(r.reward, 0.0);
            assert!(!r.done());
            assert_eq!(g.phase(), Phase::State2B);
        }
    }

    #[test]
    fn optimum_is_eight_via_b_then_bb() {
        let mut best = (f64::MIN, vec![]);
        for first in 0..2 {
            for a0 in 0..2 {
                for a1 in 0..2 {
                    let mut g = TwoStepGame::default();
                    g.reset(0);
                    let mut ret = g.step(&[first, 0]).unwrap().reward;
                    let r = g.step(&[a0, a1]).unwrap();
                    ret += r.reward;
                    assert!(r.terminated);
                    assert_eq!(g.steps(), 2);
                    if ret > best.0 {
                        best = (ret, vec![(first, a0, a1)]);
                    } else if ret == best.0 {
                        best.1.push((first, a0, a1));
                    }
                }
            }
        }
        assert_eq!(best.0, 8.0);
        assert_eq!(best.1, vec![(ACTION_B, ACTION_B, ACTION_B)]);
    }

    #[test]
    fn masks_are_all_true() {
        let g = TwoStepGame::default();
        for agent in 0..2 {
            let m = g.available_actions(agent);
            assert_eq!(m.len(), g.spec().n_actions);
            assert_eq!(m, vec![true, true]);
        }
    }

    #[test]
    fn invalid_action_and_finished_episode_are_errors() {
        let mut g = TwoStepGame::default();
        g.reset(0);
        let err = g.step(&[0, 2]).unwrap_err().to_string();
        assert!(err.contains("agent 1") && err.contains("action 2"), "{err}");
        g.step(&[0, 0]).unwrap();
        g.step(&[0, 0]).unwrap();
        assert!(g.step(&[0, 0]).is_err());
    }
}
