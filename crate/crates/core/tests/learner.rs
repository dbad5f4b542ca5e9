//! TD targets, loss, gradients and masking of the episode learner.

use qmix::agents::{AgentArch, AgentConfig, AgentNet};
use qmix::env::EnvSpec;
use qmix::learner::{Episode, EpisodeBatch, QLearner};
use qmix::mixers::{Mixer, MixerConfig, MixerKind};
use qmix::tensor::{ParamStore, RmsProp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 2;
const ACTIONS: usize = 3;
const OBS: usize = 4;
const STATE: usize = 5;

fn learner(kind: MixerKind, arch: AgentArch, n: usize, seed: u64) -> (QLearner, ParamStore) {
    let spec = EnvSpec {
        n_agents: n,
        n_actions: ACTIONS,
        obs_dim: OBS,
        state_dim: STATE,
        episode_limit: 10,
        gamma: 0.99,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let agent = AgentNet::register(&mut store, &spec, &AgentConfig { arch, hidden: 6 }, &mut rng).unwrap();
    let cfg = MixerConfig {
        embed: 4,
        hyper_hidden: 3,
    };
    let mixer = Mixer::register(&mut store, kind, n, STATE, &cfg, &mut rng).unwrap();
    (QLearner { agent, mixer }, store)
}

fn episode(rng: &mut ChaCha8Rng, n: usize, len: usize, terminated: bool) -> Episode {
    let steps = len + 1;
    let avail: Vec<Vec<bool>> = (0..steps)
        .map(|_| {
            (0..n)
                .flat_map(|_| {
                    let mut m: Vec<bool> = (0..ACTIONS).map(|_| rng.random_bool(0.6)).collect();
                    m[0] = true;
                    m
                })
                .collect()
        })
        .collect();
    let actions = (0..len)
        .map(|t| {
            (0..n)
                .map(|a| loop {
                    let u = rng.random_range(0..ACTIONS);
                    if avail[t][a * ACTIONS + u] {
                        break u;
                    }
                })
                .collect()
        })
        .collect();
    Episode {
        obs: (0..steps).map(|_| (0..n * OBS).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        states: (0..steps).map(|_| (0..STATE).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        avail,
        actions,
        rewards: (0..len).map(|_| rng.random_range(-1.0..2.0)).collect(),
        terminated: (0..len).map(|t| terminated && t + 1 == len).collect(),
    }
}

/// Makes every utility equal to `value` by zeroing the output weights.
fn flatten_utilities(learner: &QLearner, store: &mut ParamStore, value: f64) {
    store.get_mut(learner.agent.fc2.weight).data_mut().fill(0.0);
    store.get_mut(learner.agent.fc2.bias).data_mut().fill(value);
}

fn batch(episodes: &[Episode]) -> EpisodeBatch {
    let refs: Vec<&Episode> = episodes.iter().collect();
    EpisodeBatch::from_episodes(&refs).unwrap()
}

#[test]
fn targets_bootstrap_through_the_target_mixer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (l, mut store) = learner(MixerKind::Vdn, AgentArch::FeedForward, N, 0);
    flatten_utilities(&l, &mut store, 4.0);

    let mut terminal = episode(&mut rng, N, 1, true);
    terminal.rewards[0] = 8.0;
    assert_eq!(l.compute_targets(&store, &batch(&[terminal]), 0.99).unwrap(), vec![8.0]);

    let mut open = episode(&mut rng, N, 2, false);
    open.rewards = vec![0.0, 0.0];
    let y = l.compute_targets(&store, &batch(std::slice::from_ref(&open)), 0.99).unwrap();
    for v in &y {
        assert!((v - 7.92).abs() < 1e-12, "{y:?}");
    }
    open.rewards = vec![1.5, -0.5];
    assert_eq!(l.compute_targets(&store, &batch(&[open]), 0.0).unwrap(), vec![1.5, -0.5]);
}

#[test]
fn independent_targets_keep_one_column_per_agent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (l, mut store) = learner(MixerKind::Independent, AgentArch::FeedForward, N, 0);
    flatten_utilities(&l, &mut store, 2.0);
    let mut e = episode(&mut rng, N, 2, true);
    e.rewards = vec![1.0, 3.0];
    assert_eq!(l.compute_targets(&store, &batch(&[e]), 0.5).unwrap(), vec![2.0, 2.0, 3.0, 3.0]);
}

#[test]
fn loss_is_mean_squared_td_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (l, mut store) = learner(MixerKind::Vdn, AgentArch::FeedForward, N, 0);
    flatten_utilities(&l, &mut store, 3.0);
    let b = batch(&[episode(&mut rng, N, 1, true)]);
    assert_eq!(l.loss_and_grads(&store, &b, &[8.0]).unwrap().0, 4.0);
    assert_eq!(l.loss_and_grads(&store, &b, &[6.0]).unwrap().0, 0.0);
    assert!(l.loss_and_grads(&store, &b, &[6.0, 1.0]).is_err());
}

#[test]
fn padded_entries_never_reach_the_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (l, store) = learner(MixerKind::Qmix, AgentArch::Recurrent, N, 1);
    let episodes = vec![
        episode(&mut rng, N, 2, true),
        episode(&mut rng, N, 5, false),
        episode(&mut rng, N, 3, true),
    ];
    let clean = batch(&episodes);
    let mut noisy = clean.clone();
    let b = noisy.batch_size;
    for t in 0..=noisy.max_len {
        for j in 0..b {
            if t <= noisy.lengths[j] {
                continue;
            }
            let o = (t * b + j) * N * OBS;
            noisy.obs[o..o + N * OBS].fill(1e6);
            let s = (t * b + j) * STATE;
            noisy.states[s..s + STATE].fill(-1e6);
            let m = (t * b + j) * N * ACTIONS;
            noisy.avail[m..m + N * ACTIONS].fill(true);
        }
    }
    for i in 0..noisy.filled.len() {
        if !noisy.filled[i] {
            noisy.rewards[i] = 1e9;
            noisy.terminated[i] = true;
            noisy.actions[i * N..(i + 1) * N].fill(ACTIONS - 1);
        }
    }
    assert_ne!(clean, noisy);

    let step = |b: &EpisodeBatch| {
        let mut params = store.clone();
        let mut opt = RmsProp::new(5e-4, 0.99, 1e-5);
        l.train_on_batch(&mut params, &store, &mut opt, b, 0.99).unwrap();
        params
    };
    let (a, z) = (step(&clean), step(&noisy));
    for (x, y) in a.tensors().iter().zip(z.tensors()) {
        let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
    assert_ne!(a.fingerprint(), store.fingerprint());
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (l, store) = learner(MixerKind::Qmix, AgentArch::Recurrent, N, 2);
    let b = batch(&[episode(&mut rng, N, 3, true), episode(&mut rng, N, 2, true)]);
    let mut params = store.clone();
    let mut opt = RmsProp::new(0.0, 0.99, 1e-5);
    let m = l.train_on_batch(&mut params, &store, &mut opt, &b, 0.99).unwrap();
    assert!(m.loss > 0.0 && m.grad_norm > 0.0);
    assert_eq!(params, store);
}

#[test]
fn repeated_updates_fit_a_fixed_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (l, store) = learner(MixerKind::Qmix, AgentArch::Recurrent, N, 3);
    let b = batch(&[episode(&mut rng, N, 3, true), episode(&mut rng, N, 4, true)]);
    let targets = l.compute_targets(&store, &b, 0.9).unwrap();
    let mut params = store.clone();
    let mut opt = RmsProp::new(5e-3, 0.99, 1e-5);
    let first = l.loss_and_grads(&params, &b, &targets).unwrap().0;
    let mut last = first;
    for _ in 0..400 {
        let (loss, grads) = l.loss_and_grads(&params, &b, &targets).unwrap();
        opt.step(&mut params, &grads).unwrap();
        last = loss;
    }
    assert!(last < first * 0.01, "{first} -> {last}");
}

/// Central differences over every parameter entry of the loss with fixed
/// targets; returns the worst relative error.
fn worst_gradient_error(l: &QLearner, store: &ParamStore, b: &EpisodeBatch, targets: &[f64]) -> f64 {
    let (_, grads) = l.loss_and_grads(store, b, targets).unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let mut plus = store.clone();
            plus.tensors_mut()[p].data_mut()[i] += h;
            let mut minus = store.clone();
            minus.tensors_mut()[p].data_mut()[i] -= h;
            let fd = (l.loss_and_grads(&plus, b, targets).unwrap().0 - l.loss_and_grads(&minus, b, targets).unwrap().0)
                / (2.0 * h);
            let an = g.data()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_for_each_mixer() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let episodes = [episode(&mut rng, N, 2, true), episode(&mut rng, N, 1, true)];
    let b = batch(&episodes);
    for kind in [MixerKind::Independent, MixerKind::Vdn, MixerKind::VdnS, MixerKind::QmixLin, MixerKind::QmixNs] {
        let (l, store) = learner(kind, AgentArch::Recurrent, N, 10);
        let targets = l.compute_targets(&store, &b, 0.99).unwrap();
        let worst = worst_gradient_error(&l, &store, &b, &targets);
        assert!(worst < 1e-4, "{kind:?}: {worst}");
    }
}

#[test]
fn single_agent_vdn_is_independent_learning() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (iql, store) = learner(MixerKind::Independent, AgentArch::Recurrent, 1, 12);
    let (vdn, store2) = learner(MixerKind::Vdn, AgentArch::Recurrent, 1, 12);
    assert_eq!(store, store2);
    let b = batch(&[episode(&mut rng, 1, 3, true), episode(&mut rng, 1, 2, false)]);
    let ti = iql.compute_targets(&store, &b, 0.99).unwrap();
    let tv = vdn.compute_targets(&store, &b, 0.99).unwrap();
    assert_eq!(ti, tv);
    let (li, gi) = iql.loss_and_grads(&store, &b, &ti).unwrap();
    let (lv, gv) = vdn.loss_and_grads(&store, &b, &tv).unwrap();
    assert_eq!(li, lv);
    assert_eq!(gi, gv);
}

#[test]
fn every_hypernetwork_parameter_receives_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (l, store) = learner(MixerKind::Qmix, AgentArch::Recurrent, N, 14);
    let b = batch(&[episode(&mut rng, N, 3, true), episode(&mut rng, N, 4, false)]);
    let targets = vec![5.0; b.filled_steps()];
    let (_, grads) = l.loss_and_grads(&store, &b, &targets).unwrap();
    for (id, name, _) in store.iter() {
        if name.starts_with("mixer.") {
            let g = &grads[id.0];
            assert!(g.data().iter().any(|&v| v != 0.0), "{name} has no gradient");
        }
    }
}
