//! Shared per-agent utility networks and decentralised ε-greedy selection.
//!
//! One parameter set serves every agent. Rows fed to the network are
//! ordered `episode · n_agents + agent`, so the agent id of a row is
//! `row % n_agents`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{one_hot, EnvSpec};
use crate::error::{Error, Result};
use crate::tensor::{GruCell, Linear, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentArch {
    /// fc → ReLU → GRU → fc, fed the previous action as well.
    Recurrent,
    /// fc → ReLU → fc, no memory and no previous action.
    FeedForward,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub arch: AgentArch,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentNet {
    pub fc1: Linear,
    pub gru: Option<GruCell>,
    pub fc2: Linear,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub hidden: usize,
}

impl AgentNet {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        spec: &EnvSpec,
        cfg: &AgentConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::config("agent.hidden", "must be at least 1"));
        }
        let recurrent = cfg.arch == AgentArch::Recurrent;
        let input = spec.obs_dim + spec.n_agents + if recurrent { spec.n_actions } else { 0 };
        let fc1 = store.register_linear("agent.fc1", input, cfg.hidden, rng);
        let gru = recurrent.then(|| GruCell::register(store, "agent.gru", cfg.hidden, cfg.hidden, rng));
        let fc2 = store.register_linear("agent.fc2", cfg.hidden, spec.n_actions, rng);
        Ok(Self {
            fc1,
            gru,
            fc2,
            n_agents: spec.n_agents,
            n_actions: spec.n_actions,
            obs_dim: spec.obs_dim,
            hidden: cfg.hidden,
        })
    }

    pub fn is_recurrent(&self) -> bool {
        self.gru.is_some()
    }

    pub fn input_dim(&self) -> usize {
        self.fc1.fan_in
    }

    /// Width of the per-row hidden state; zero for feed-forward nets.
    pub fn state_width(&self) -> usize {
        if self.is_recurrent() {
            self.hidden
        } else {
            0
        }
    }

    /// Network inputs for `rows` rows of observations.
    ///
    /// `last_actions` is `None` at the first step of an episode, which
    /// encodes as an all-zero action block.
    pub fn build_inputs(&self, obs: &[f64], last_actions: Option<&[usize]>, rows: usize) -> Result<Vec<f64>> {
        if obs.len() != rows * self.obs_dim {
            return Err(Error::shape("agent observations", &[rows, self.obs_dim], &[obs.len()]));
        }
        if let Some(la) = last_actions {
            if la.len() != rows {
                return Err(Error::shape("agent last actions", &[rows], &[la.len()]));
            }
        }
        let width = self.input_dim();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&obs[r * self.obs_dim..(r + 1) * self.obs_dim]);
            if self.is_recurrent() {
                match last_actions {
                    Some(la) => out.extend(one_hot(la[r], self.n_actions)),
                    None => out.extend(std::iter::repeat_n(0.0, self.n_actions)),
                }
            }
            out.extend(one_hot(r % self.n_agents, self.n_agents));
        }
        Ok(out)
    }

    /// One step on the tape: `inputs: [R, input_dim]`, `hidden: [R, H]`.
    /// Returns utilities `[R, n_actions]` and the next hidden state.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        bound: &[Var],
        inputs: Var,
        hidden: Option<Var>,
    ) -> Result<(Var, Option<Var>)> {
        let x = self.fc1.forward(tape, bound, inputs)?;
        let x = tape.relu(x)?;
        let (feat, next) = match (&self.gru, hidden) {
            (Some(gru), Some(h)) => {
                let h = gru.forward(tape, bound, x, h)?;
                (h, Some(h))
            }
            (Some(_), None) => {
                return Err(Error::Contract("recurrent agent needs a hidden state".into()))
            }
            (None, _) => (x, None),
        };
        let q = self.fc2.forward(tape, bound, feat)?;
        Ok((q, next))
    }

    /// Tape-free convenience for rollouts: returns flat `[R, n_actions]`
    /// utilities and the next flat hidden state.
    pub fn step(
        &self,
        store: &ParamStore,
        inputs: &[f64],
        hidden: &[f64],
        rows: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        let x = tape.constant(inputs.to_vec(), rows, self.input_dim())?;
        let h = if self.is_recurrent() {
            Some(tape.constant(hidden.to_vec(), rows, self.hidden)?)
        } else {
            None
        };
        let (q, h) = self.forward(&mut tape, &bound, x, h)?;
        let next = h.map(|h| tape.value(h).to_vec()).unwrap_or_default();
        Ok((tape.value(q).to_vec(), next))
    }
}

/// Index of the largest available entry; ties go to the lowest index.
pub fn masked_argmax(q: &[f64], mask: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (a, (&v, &ok)) in q.iter().zip(mask).enumerate() {
        if ok && best.is_none_or(|b| v > q[b]) {
            best = Some(a);
        }
    }
    best.ok_or_else(|| Error::Contract("no available action".into()))
}

/// Independent ε-greedy choice per agent. `q` is `[n, n_actions]` flat.
pub fn select_actions<R: Rng + ?Sized>(
    q: &[f64],
    masks: &[Vec<bool>],
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let n = masks.len();
    if n == 0 || q.len() % n != 0 {
        return Err(Error::shape("select_actions", &[q.len()], &[n]));
    }
    let width = q.len() / n;
    masks
        .iter()
        .enumerate()
        .map(|(agent, mask)| {
            if mask.len() != width {
                return Err(Error::shape("action mask", &[width], &[mask.len()]));
            }
            let avail: Vec<usize> = (0..width).filter(|&a| mask[a]).collect();
            if avail.is_empty() {
                return Err(Error::Contract(format!("agent {agent} has no available action")));
            }
            if rng.random::<f64>() < epsilon {
                Ok(avail[rng.random_range(0..avail.len())])
            } else {
                masked_argmax(&q[agent * width..(agent + 1) * width], mask)
            }
        })
        .collect()
}

/// Linear decay from `start` to `end` over `anneal_steps` environment
/// steps, flat afterwards.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl EpsilonSchedule {
    pub fn constant(value: f64) -> Self {
        Self {
            start: value,
            end: value,
            anneal_steps: 0,
        }
    }

    pub fn value(&self, t: u64) -> f64 {
        if self.anneal_steps == 0 || t >= self.anneal_steps {
            return self.end;
        }
        let frac = t as f64 / self.anneal_steps as f64;
        self.start + frac * (self.end - self.start)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> EnvSpec {
        EnvSpec {
            n_agents: 2,
            n_actions: 3,
            obs_dim: 4,
            state_dim: 5,
            episode_limit: 10,
            gamma: 0.99,
        }
    }

    fn net(arch: AgentArch) -> (ParamStore, AgentNet) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let net = AgentNet::register(&mut store, &spec(), &AgentConfig { arch, hidden: 8 }, &mut rng).unwrap();
        (store, net)
    }

    #[test]
    fn zero_params_output_bias() {
        let (mut store, net) = net(AgentArch::Recurrent);
        for t in store.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        store.get_mut(net.fc2.bias).data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let x = net.build_inputs(&[0.3; 8], None, 2).unwrap();
        let (q, _) = net.step(&store, &x, &[0.0; 16], 2).unwrap();
        assert_eq!(q, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn inputs_carry_last_action_and_id() {
        let (_, net) = net(AgentArch::Recurrent);
        let x = net.build_inputs(&[1.0; 8], Some(&[2, 0]), 2).unwrap();
        assert_eq!(net.input_dim(), 9);
        assert_eq!(&x[..9], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        assert_eq!(&x[9..], &[1.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let (_, ff) = self::net(AgentArch::FeedForward);
        assert_eq!(ff.input_dim(), 6);
        assert!(ff.build_inputs(&[0.0; 7], None, 2).is_err());
    }

    #[test]
    fn history_changes_utilities() {
        let (store, net) = net(AgentArch::Recurrent);
        let run = |first: f64| {
            let mut h = vec![0.0; 16];
            let mut q = Vec::new();
            for obs in [first, 0.5] {
                let x = net.build_inputs(&[obs; 8], None, 2).unwrap();
                (q, h) = net.step(&store, &x, &h, 2).unwrap();
            }
            q
        };
        assert_ne!(run(-1.0), run(1.0));
        assert_eq!(run(1.0), run(1.0));
    }

    #[test]
    fn agent_id_separates_shared_outputs() {
        let (store, net) = net(AgentArch::FeedForward);
        let x = net.build_inputs(&[0.2; 8], None, 2).unwrap();
        let (q, h) = net.step(&store, &x, &[], 2).unwrap();
        assert!(h.is_empty());
        assert_ne!(&q[..3], &q[3..]);
    }

    #[test]
    fn argmax_ties_and_masks() {
        assert_eq!(masked_argmax(&[1.0, 3.0, 3.0], &[true; 3]).unwrap(), 1);
        assert_eq!(masked_argmax(&[1.0, 3.0, 2.0], &[true, false, true]).unwrap(), 2);
        assert!(masked_argmax(&[1.0], &[false]).is_err());
    }

    #[test]
    fn greedy_and_uniform_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = [0.0, 5.0, 1.0, 9.0, 0.0, 0.0];
        let masks = vec![vec![true; 3], vec![false, true, true]];
        assert_eq!(select_actions(&q, &masks, 0.0, &mut rng).unwrap(), vec![1, 1]);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            let a = select_actions(&q, &masks, 1.0, &mut rng).unwrap();
            assert_ne!(a[1], 0);
            counts[a[0]] += 1;
        }
        assert!(counts.iter().all(|&c| (900..1100).contains(&c)), "{counts:?}");
        let dead = vec![vec![false; 3], vec![true; 3]];
        assert!(select_actions(&q, &dead, 0.5, &mut rng).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = EpsilonSchedule {
            start: 1.0,
            end: 0.05,
            anneal_steps: 50_000,
        };
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(25_000) - 0.525).abs() < 1e-12);
        assert_eq!(s.value(50_000), 0.05);
        assert_eq!(s.value(1_000_000), 0.05);
        assert_eq!(EpsilonSchedule::constant(1.0).value(7), 1.0);
    }
}
