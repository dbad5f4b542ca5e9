//! Joint-value heads that combine the chosen per-agent utilities.
//!
//! Every mixer maps `qs: [R, n]` and `states: [R, state_dim]` to
//! `[R, 1]`, except the independent learner which passes `qs` through
//! unchanged so each agent keeps its own TD target. All mixing weights
//! are taken through `abs`, so the output is non-decreasing in every
//! agent's utility.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::masked_argmax;
use crate::error::{Error, Result};
use crate::tensor::{Linear, ParamId, ParamStore, RmsProp, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    /// No mixing: independent Q-learning on the team reward.
    Independent,
    Vdn,
    /// Sum plus a learned state-dependent bias.
    VdnS,
    Qmix,
    /// Hypernetwork mixing without the hidden layer.
    QmixLin,
    /// Two-layer monotone mixing with state-independent weights.
    QmixNs,
}

impl MixerKind {
    pub const ALL: [MixerKind; 6] = [
        MixerKind::Independent,
        MixerKind::Vdn,
        MixerKind::VdnS,
        MixerKind::Qmix,
        MixerKind::QmixLin,
        MixerKind::QmixNs,
    ];

    pub fn is_factored(self) -> bool {
        self != MixerKind::Independent
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixerConfig {
    /// Width of the mixing hidden layer.
    pub embed: usize,
    /// Hidden width of the two-layer bias networks.
    pub hyper_hidden: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            hyper_hidden: 32,
        }
    }
}

/// state → ReLU hidden → scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StateBias {
    pub hidden: Linear,
    pub out: Linear,
}

impl StateBias {
    fn register<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, state_dim: usize, width: usize, rng: &mut R) -> Self {
        Self {
            hidden: store.register_linear(&format!("{name}.0"), state_dim, width, rng),
            out: store.register_linear(&format!("{name}.1"), width, 1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], states: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, bound, states)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, bound, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mixer {
    Independent,
    Vdn,
    VdnS {
        bias: StateBias,
    },
    Qmix {
        hyper_w1: Linear,
        hyper_b1: Linear,
        hyper_w2: Linear,
        hyper_b2: StateBias,
    },
    QmixLin {
        hyper_w: Linear,
        hyper_b: StateBias,
    },
    /// Weights are stored as column vectors (`[k, 1]`) so that a linear map
    /// of a constant column of ones broadcasts them across rows.
    QmixNs {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

impl Mixer {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        kind: MixerKind,
        n_agents: usize,
        state_dim: usize,
        cfg: &MixerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.embed == 0 || cfg.hyper_hidden == 0 {
            return Err(Error::config("mixer", "widths must be at least 1"));
        }
        let h = cfg.embed;
        Ok(match kind {
            MixerKind::Independent => Mixer::Independent,
            MixerKind::Vdn => Mixer::Vdn,
            MixerKind::VdnS => Mixer::VdnS {
                bias: StateBias::register(store, "mixer.bias", state_dim, cfg.hyper_hidden, rng),
            },
            MixerKind::Qmix => Mixer::Qmix {
                hyper_w1: store.register_linear("mixer.hyper_w1", state_dim, n_agents * h, rng),
                hyper_b1: store.register_linear("mixer.hyper_b1", state_dim, h, rng),
                hyper_w2: store.register_linear("mixer.hyper_w2", state_dim, h, rng),
                hyper_b2: StateBias::register(store, "mixer.hyper_b2", state_dim, cfg.hyper_hidden, rng),
            },
            MixerKind::QmixLin => Mixer::QmixLin {
                hyper_w: store.register_linear("mixer.hyper_w", state_dim, n_agents, rng),
                hyper_b: StateBias::register(store, "mixer.hyper_b", state_dim, cfg.hyper_hidden, rng),
            },
            MixerKind::QmixNs => {
                let b_in = 1.0 / (n_agents as f64).sqrt();
                let b_hid = 1.0 / (h as f64).sqrt();
                let mut reg = |name: &str, len: usize, bound: f64| {
                    store.register(name, Tensor::uniform(vec![len, 1], bound, rng))
                };
                Mixer::QmixNs {
                    w1: reg("mixer.w1", n_agents * h, b_in),
                    b1: reg("mixer.b1", h, b_in),
                    w2: reg("mixer.w2", h, b_hid),
                    b2: reg("mixer.b2", 1, b_hid),
                }
            }
        })
    }

    pub fn kind(&self) -> MixerKind {
        match self {
            Mixer::Independent => MixerKind::Independent,
            Mixer::Vdn => MixerKind::Vdn,
            Mixer::VdnS { .. } => MixerKind::VdnS,
            Mixer::Qmix { .. } => MixerKind::Qmix,
            Mixer::QmixLin { .. } => MixerKind::QmixLin,
            Mixer::QmixNs { .. } => MixerKind::QmixNs,
        }
    }

    /// Columns of the mixer output: `n` for independent learners, else 1.
    pub fn out_cols(&self, n_agents: usize) -> usize {
        if self.kind().is_factored() {
            1
        } else {
            n_agents
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, bound: &[Var], qs: Var, states: Var) -> Result<Var> {
        let (r, n) = tape.shape(qs);
        let (sr, _) = tape.shape(states);
        if sr != r {
            return Err(Error::shape("mixer rows", &[r, n], &[sr]));
        }
        match self {
            Mixer::Independent => Ok(qs),
            Mixer::Vdn => tape.sum_cols(qs),
            Mixer::VdnS { bias } => {
                let s = tape.sum_cols(qs)?;
                let b = bias.forward(tape, bound, states)?;
                tape.add(s, b)
            }
            Mixer::Qmix {
                hyper_w1,
                hyper_b1,
                hyper_w2,
                hyper_b2,
            } => {
                if hyper_w1.fan_out % n != 0 {
                    return Err(Error::shape("qmix agents", &[n], &[hyper_w1.fan_out]));
                }
                let w1 = hyper_w1.forward(tape, bound, states)?;
                let w1 = tape.abs(w1)?;
                let b1 = hyper_b1.forward(tape, bound, states)?;
                let hid = tape.row_vecmat(qs, w1)?;
                let hid = tape.add(hid, b1)?;
                let hid = tape.elu(hid)?;
                let w2 = hyper_w2.forward(tape, bound, states)?;
                let w2 = tape.abs(w2)?;
                let y = tape.row_vecmat(hid, w2)?;
                let b2 = hyper_b2.forward(tape, bound, states)?;
                tape.add(y, b2)
            }
            Mixer::QmixLin { hyper_w, hyper_b } => {
                let w = hyper_w.forward(tape, bound, states)?;
                let w = tape.abs(w)?;
                let y = tape.row_vecmat(qs, w)?;
                let b = hyper_b.forward(tape, bound, states)?;
                tape.add(y, b)
            }
            Mixer::QmixNs { w1, b1, w2, b2 } => {
                let ones = tape.constant(vec![1.0; r], r, 1)?;
                let w1 = tape.linear(ones, bound[w1.0], None)?;
                let w1 = tape.abs(w1)?;
                let b1 = tape.linear(ones, bound[b1.0], None)?;
                let hid = tape.row_vecmat(qs, w1)?;
                let hid = tape.add(hid, b1)?;
                let hid = tape.elu(hid)?;
                let w2 = tape.linear(ones, bound[w2.0], None)?;
                let w2 = tape.abs(w2)?;
                let y = tape.row_vecmat(hid, w2)?;
                let b2 = tape.linear(ones, bound[b2.0], None)?;
                tape.add(y, b2)
            }
        }
    }

    /// Forward-only evaluation on flat `[rows, n]` utilities and
    /// `[rows, state_dim]` states.
    pub fn evaluate(&self, store: &ParamStore, qs: &[f64], states: &[f64], rows: usize) -> Result<Vec<f64>> {
        if rows == 0 || qs.len() % rows != 0 || states.len() % rows != 0 {
            return Err(Error::shape("mixer evaluate", &[rows], &[qs.len(), states.len()]));
        }
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        let q = tape.constant(qs.to_vec(), rows, qs.len() / rows)?;
        let s = tape.constant(states.to_vec(), rows, states.len() / rows)?;
        let y = self.forward(&mut tape, &bound, q, s)?;
        Ok(tape.value(y).to_vec())
    }
}

/// Decentralised greedy joint action and the joint value at that action.
///
/// `agent_qs` is `[n, n_actions]` flat.
pub fn joint_greedy_value(
    mixer: &Mixer,
    store: &ParamStore,
    agent_qs: &[f64],
    masks: &[Vec<bool>],
    state: &[f64],
) -> Result<(Vec<usize>, f64)> {
    let n = masks.len();
    if n == 0 || agent_qs.len() % n != 0 {
        return Err(Error::shape("joint_greedy_value", &[agent_qs.len()], &[n]));
    }
    let width = agent_qs.len() / n;
    let mut actions = Vec::with_capacity(n);
    let mut chosen = Vec::with_capacity(n);
    for (a, mask) in masks.iter().enumerate() {
        let row = &agent_qs[a * width..(a + 1) * width];
        let u = masked_argmax(row, mask)?;
        actions.push(u);
        chosen.push(row[u]);
    }
    let v = mixer.evaluate(store, &chosen, state, 1)?;
    if v.len() != 1 {
        return Err(Error::Contract("joint value needs a factored mixer".into()));
    }
    Ok((actions, v[0]))
}

/// Result of fitting a mixer over free per-agent utilities to a payoff
/// matrix of a two-agent one-shot game.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PayoffFit {
    /// Row-major fitted joint values, same layout as the payoff.
    pub fitted: Vec<f64>,
    pub mse: f64,
    /// Agent utilities, `[agent][action]`.
    pub utilities: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub mixer: MixerConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr_start: 1e-2,
            lr_end: 1e-6,
            mixer: MixerConfig::default(),
        }
    }
}

/// Full-batch RMSprop fit of `mixer(q1[u1], q2[u2])` to `payoff`
/// (`[k, k]` row-major, rows indexed by the first agent). The state is a
/// fixed scalar one, so state-conditioned mixers act as fixed monotone
/// functions. The learning rate decays geometrically.
pub fn fit_payoff_matrix<R: Rng + ?Sized>(
    kind: MixerKind,
    payoff: &[f64],
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<PayoffFit> {
    let k = (payoff.len() as f64).sqrt() as usize;
    if k * k != payoff.len() || k == 0 {
        return Err(Error::shape("payoff matrix", &[k, k], &[payoff.len()]));
    }
    if !kind.is_factored() {
        return Err(Error::Contract("payoff fit needs a factored mixer".into()));
    }
    let mut store = ParamStore::new();
    let q1 = store.register("fit.q1", Tensor::uniform(vec![k, 1], 1.0, rng));
    let q2 = store.register("fit.q2", Tensor::uniform(vec![k, 1], 1.0, rng));
    let mixer = Mixer::register(&mut store, kind, 2, 1, &cfg.mixer, rng)?;
    let mut opt = RmsProp::new(cfg.lr_start, 0.99, 1e-8);
    let decay = if cfg.steps > 1 {
        (cfg.lr_end / cfg.lr_start).powf(1.0 / (cfg.steps - 1) as f64)
    } else {
        1.0
    };
    let rows = k * k;
    let idx1: Vec<usize> = (0..rows).map(|r| r / k).collect();
    let idx2: Vec<usize> = (0..rows).map(|r| r % k).collect();

    let pass = |store: &ParamStore, want_grads: bool| -> Result<(Vec<f64>, f64, Option<Vec<Tensor>>)> {
        let mut tape = Tape::new();
        let bound = tape.bind(store);
        // spread each agent's column of utilities over the k×k joint grid
        let a = tape.reshape(bound[q1.0], 1, k)?;
        let b = tape.reshape(bound[q2.0], 1, k)?;
        let a = tape.concat_rows(&vec![a; rows])?;
        let b = tape.concat_rows(&vec![b; rows])?;
        let a = tape.gather(a, idx1.clone())?;
        let b = tape.gather(b, idx2.clone())?;
        let ab = tape.concat_rows(&[a, b])?;
        let ab = tape.reshape(ab, 2, rows)?;
        let qs = transpose(&mut tape, ab, 2, rows)?;
        let states = tape.constant(vec![1.0; rows], rows, 1)?;
        let y = mixer.forward(&mut tape, &bound, qs, states)?;
        let target = tape.constant(payoff.to_vec(), rows, 1)?;
        let d = tape.sub(y, target)?;
        let sq = tape.mul(d, d)?;
        let s = tape.sum_all(sq)?;
        let loss = tape.affine(s, 1.0 / rows as f64, 0.0)?;
        let grads = if want_grads {
            Some(tape.backward(loss)?.collect(&bound, store))
        } else {
            None
        };
        Ok((tape.value(y).to_vec(), tape.value(loss)[0], grads))
    };

    for _ in 0..cfg.steps {
        let (_, _, grads) = pass(&store, true)?;
        opt.step(&mut store, &grads.expect("requested"))?;
        opt.lr *= decay;
    }
    let (fitted, mse, _) = pass(&store, false)?;
    let utilities = [q1, q2].iter().map(|id| store.get(*id).data().to_vec()).collect();
    Ok(PayoffFit {
        fitted,
        mse,
        utilities,
    })
}

/// `[r, c] -> [c, r]` assembled from single-column slices.
fn transpose(tape: &mut Tape<'_>, x: Var, r: usize, c: usize) -> Result<Var> {
    let flat = tape.reshape(x, r * c, 1)?;
    let cols: Vec<Var> = (0..c)
        .map(|j| {
            let idx: Vec<usize> = (0..r).map(|i| i * c + j).collect();
            let rows_of_flat = tape.reshape(flat, 1, r * c)?;
            let picked = tape.concat_rows(&vec![rows_of_flat; r])?;
            let g = tape.gather(picked, idx)?;
            tape.reshape(g, 1, r)
        })
        .collect::<Result<_>>()?;
    tape.concat_rows(&cols)
}
