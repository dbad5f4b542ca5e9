use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Algorithm, EnvKind, ExperimentConfig};
use crate::agents::{select_actions, AgentNet};
use crate::combat::{heuristic_ally_policy, CombatEnv};
use crate::env::{EnvSpec, MultiAgentEnv, StepRecord, StepResult, TwoStepGame};
use crate::error::{Error, Result};
use crate::learner::{Episode, QLearner, ReplayBuffer, TargetSync, TrainRecord};
use crate::mixers::Mixer;
use crate::tensor::{ParamStore, RmsProp};

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Init = 0,
    Explore = 1,
    Replay = 2,
    EnvSeeds = 3,
    Eval = 4,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Either environment behind one concrete type.
#[derive(Clone, Debug)]
pub enum AnyEnv {
    TwoStep(TwoStepGame),
    Combat(Box<CombatEnv>),
}

impl AnyEnv {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.env {
            EnvKind::TwoStep => AnyEnv::TwoStep(TwoStepGame::new(cfg.train.gamma)),
            EnvKind::MicroCombat => AnyEnv::Combat(Box::new(CombatEnv::new(cfg.map.clone())?)),
        })
    }

    fn inner(&self) -> &dyn MultiAgentEnv {
        match self {
            AnyEnv::TwoStep(e) => e,
            AnyEnv::Combat(e) => e.as_ref(),
        }
    }

    fn inner_mut(&mut self) -> &mut dyn MultiAgentEnv {
        match self {
            AnyEnv::TwoStep(e) => e,
            AnyEnv::Combat(e) => e.as_mut(),
        }
    }
}

impl MultiAgentEnv for AnyEnv {
    fn spec(&self) -> EnvSpec {
        self.inner().spec()
    }

    fn reset(&mut self, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        self.inner_mut().reset(seed)
    }

    fn observations(&self) -> Vec<Vec<f64>> {
        self.inner().observations()
    }

    fn state(&self) -> Vec<f64> {
        self.inner().state()
    }

    fn available_actions(&self, agent: usize) -> Vec<bool> {
        self.inner().available_actions(agent)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        self.inner_mut().step(actions)
    }

    fn steps(&self) -> usize {
        self.inner().steps()
    }

    fn won(&self) -> bool {
        self.inner().won()
    }
}

/// Builds the learner layout for `cfg` and initialises its parameters.
pub fn build_learner(cfg: &ExperimentConfig, spec: &EnvSpec) -> Result<(QLearner, ParamStore)> {
    let kind = cfg
        .algorithm
        .mixer()
        .ok_or_else(|| Error::config("algorithm", "the heuristic has no learner"))?;
    let mut rng = stream_rng(cfg.seed, Stream::Init);
    let mut store = ParamStore::new();
    let agent = AgentNet::register(&mut store, spec, &cfg.agent_config(), &mut rng)?;
    let mixer = Mixer::register(&mut store, kind, spec.n_agents, spec.state_dim, &cfg.mixer_config(), &mut rng)?;
    Ok((QLearner { agent, mixer }, store))
}

/// How joint actions are picked during a rollout.
pub enum Controller<'a, R: Rng> {
    Learned {
        learner: &'a QLearner,
        params: &'a ParamStore,
        epsilon: f64,
        rng: &'a mut R,
    },
    Heuristic,
}

/// Outcome of one episode.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub episode: Episode,
    pub won: bool,
    pub trace: Vec<StepRecord>,
}

impl Rollout {
    pub fn total_reward(&self) -> f64 {
        self.episode.total_reward()
    }
}

pub fn rollout<R: Rng>(env: &mut AnyEnv, ctl: &mut Controller<'_, R>, env_seed: u64, keep_trace: bool) -> Result<Rollout> {
    let spec = env.spec();
    let n = spec.n_agents;
    let (mut obs, mut state) = env.reset(env_seed);
    let mut ep = Episode::default();
    let mut trace = Vec::new();
    let mut hidden = match ctl {
        Controller::Learned { learner, .. } => vec![0.0; n * learner.agent.state_width()],
        Controller::Heuristic => Vec::new(),
    };
    let mut last: Option<Vec<usize>> = None;
    loop {
        let masks = env.all_available_actions();
        let flat_obs: Vec<f64> = obs.concat();
        let actions = match ctl {
            Controller::Learned {
                learner,
                params,
                epsilon,
                rng,
            } => {
                let inputs = learner.agent.build_inputs(&flat_obs, last.as_deref(), n)?;
                let (q, h) = learner.agent.step(params, &inputs, &hidden, n)?;
                hidden = h;
                select_actions(&q, &masks, *epsilon, *rng)?
            }
            Controller::Heuristic => match env {
                AnyEnv::Combat(c) => heuristic_ally_policy(c),
                AnyEnv::TwoStep(_) => {
                    return Err(Error::Contract("the heuristic needs the micro-combat environment".into()))
                }
            },
        };
        ep.obs.push(flat_obs);
        ep.states.push(state.clone());
        ep.avail.push(masks.concat());
        let t = env.steps();
        let res = env.step(&actions)?;
        if keep_trace {
            trace.push(StepRecord {
                t,
                state: state.clone(),
                observations: obs.clone(),
                actions: actions.clone(),
                reward: res.reward,
                terminated: res.terminated,
                truncated: res.truncated,
                won: env.won(),
            });
        }
        ep.actions.push(actions.clone());
        ep.rewards.push(res.reward);
        ep.terminated.push(res.terminated);
        obs = env.observations();
        state = env.state();
        last = Some(actions);
        if res.done() {
            break;
        }
    }
    ep.obs.push(obs.concat());
    ep.states.push(state);
    ep.avail.push(env.all_available_actions().concat());
    Ok(Rollout {
        episode: ep,
        won: env.won(),
        trace,
    })
}

/// One evaluation checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub episode: u64,
    pub env_steps: u64,
    /// Fraction of won episodes; `None` where winning is undefined.
    pub win_rate: Option<f64>,
    pub mean_return: f64,
    pub returns: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub points: Vec<EvalPoint>,
}

impl EvalReport {
    pub fn last(&self) -> Option<&EvalPoint> {
        self.points.last()
    }

    pub fn first(&self) -> Option<&EvalPoint> {
        self.points.first()
    }
}

/// Greedy rollouts on the given environment seeds. Parameters are only
/// read.
pub fn evaluate(
    cfg: &ExperimentConfig,
    learner: Option<(&QLearner, &ParamStore)>,
    seeds: &[u64],
    mut traces: Option<&mut Vec<Vec<StepRecord>>>,
) -> Result<(Option<f64>, f64, Vec<f64>)> {
    if seeds.is_empty() {
        return Err(Error::Contract("evaluation needs at least one episode".into()));
    }
    let mut env = AnyEnv::from_config(cfg)?;
    let mut dummy = ChaCha8Rng::seed_from_u64(0);
    let mut wins = 0usize;
    let mut returns = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut ctl = match learner {
            Some((learner, params)) => Controller::Learned {
                learner,
                params,
                epsilon: 0.0,
                rng: &mut dummy,
            },
            None => Controller::Heuristic,
        };
        let r = rollout(&mut env, &mut ctl, s, traces.is_some())?;
        wins += usize::from(r.won);
        returns.push(r.total_reward());
        if let Some(t) = traces.as_deref_mut() {
            t.push(r.trace);
        }
    }
    let win_rate = (cfg.env == EnvKind::MicroCombat).then(|| wins as f64 / seeds.len() as f64);
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    Ok((win_rate, mean, returns))
}

/// Everything a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub report: EvalReport,
    pub learner: Option<QLearner>,
    pub params: ParamStore,
    pub train_log: Vec<TrainRecord>,
    pub episodes: u64,
    pub env_steps: u64,
}

fn draw_seeds(rng: &mut ChaCha8Rng, k: usize) -> Vec<u64> {
    (0..k).map(|_| rng.random()).collect()
}

/// Trains per `cfg`, evaluating greedily every `eval.every_episodes`
/// episodes (starting before any training) and once more at the end.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut eval_rng = stream_rng(cfg.seed, Stream::Eval);
    if cfg.algorithm == Algorithm::Heuristic {
        let seeds = draw_seeds(&mut eval_rng, cfg.eval.episodes);
        let (win_rate, mean_return, returns) = evaluate(cfg, None, &seeds, None)?;
        return Ok(RunOutput {
            config: cfg.clone(),
            report: EvalReport {
                points: vec![EvalPoint {
                    episode: 0,
                    env_steps: 0,
                    win_rate,
                    mean_return,
                    returns,
                }],
            },
            learner: None,
            params: ParamStore::new(),
            train_log: Vec::new(),
            episodes: 0,
            env_steps: 0,
        });
    }

    let mut env = AnyEnv::from_config(cfg)?;
    let spec = env.spec();
    let (learner, mut params) = build_learner(cfg, &spec)?;
    let mut target = params.clone();
    let mut opt = RmsProp::new(cfg.train.lr, cfg.train.rms_alpha, cfg.train.rms_eps);
    let mut buffer = ReplayBuffer::new(cfg.train.buffer_size, spec.episode_limit)?;
    let mut sync = TargetSync::new(cfg.train.target_update_episodes)?;
    let mut explore = stream_rng(cfg.seed, Stream::Explore);
    let mut replay = stream_rng(cfg.seed, Stream::Replay);
    let mut env_seeds = stream_rng(cfg.seed, Stream::EnvSeeds);
    let schedule = cfg.epsilon();

    let mut report = EvalReport::default();
    let mut log = Vec::new();
    let mut episode: u64 = 0;
    let mut env_steps: u64 = 0;
    let eval_point = |episode: u64, env_steps: u64, params: &ParamStore, rng: &mut ChaCha8Rng| -> Result<EvalPoint> {
        let seeds = draw_seeds(rng, cfg.eval.episodes);
        let (win_rate, mean_return, returns) = evaluate(cfg, Some((&learner, params)), &seeds, None)?;
        Ok(EvalPoint {
            episode,
            env_steps,
            win_rate,
            mean_return,
            returns,
        })
    };

    while env_steps < cfg.train.total_env_steps {
        if episode % cfg.eval.every_episodes == 0 {
            report.points.push(eval_point(episode, env_steps, &params, &mut eval_rng)?);
        }
        let epsilon = schedule.value(env_steps);
        let mut ctl = Controller::Learned {
            learner: &learner,
            params: &params,
            epsilon,
            rng: &mut explore,
        };
        let seed = env_seeds.random();
        let r = rollout(&mut env, &mut ctl, seed, false)?;
        env_steps += r.episode.len() as u64;
        episode += 1;
        buffer.store(r.episode)?;

        if buffer.len() >= cfg.train.batch_size {
            for _ in 0..cfg.train.train_steps_per_episode {
                let batch = buffer.sample(cfg.train.batch_size, &mut replay)?;
                let m = learner
                    .train_on_batch(&mut params, &target, &mut opt, &batch, cfg.train.gamma)
                    .map_err(|e| match e {
                        Error::Divergence(msg) => Error::Divergence(format!(
                            "{msg} (seed {}, episode {episode}, env step {env_steps})",
                            cfg.seed
                        )),
                        other => other,
                    })?;
                log.push(TrainRecord {
                    episode,
                    env_steps,
                    loss: m.loss,
                    grad_norm: m.grad_norm,
                    epsilon,
                });
            }
        }
        sync.maybe_sync(episode, &params, &mut target)?;
    }
    if report.last().is_none_or(|p| p.episode != episode) {
        report.points.push(eval_point(episode, env_steps, &params, &mut eval_rng)?);
    }
    Ok(RunOutput {
        config: cfg.clone(),
        report,
        learner: Some(learner),
        params,
        train_log: log,
        episodes: episode,
        env_steps,
    })
}
