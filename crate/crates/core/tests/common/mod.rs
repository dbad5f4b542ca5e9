//! Reference computations shared by the integration tests. Each one is
//! written independently of the library code it checks.

#![allow(dead_code)]

use qmix::mixers::Mixer;
use qmix::tensor::{Linear, ParamId, ParamStore};

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// `W·x + b` for a layer stored as `[out, in]` plus `[out]`.
pub fn dense(store: &ParamStore, layer: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(layer.weight).data();
    let b = store.get(layer.bias).data();
    (0..layer.fan_out)
        .map(|o| b[o] + (0..layer.fan_in).map(|i| w[o * layer.fan_in + i] * x[i]).sum::<f64>())
        .collect()
}

fn column(store: &ParamStore, id: ParamId) -> Vec<f64> {
    store.get(id).data().to_vec()
}

fn two_layer_bias(store: &ParamStore, hidden: &Linear, out: &Linear, s: &[f64]) -> f64 {
    let h: Vec<f64> = dense(store, hidden, s).into_iter().map(|v| v.max(0.0)).collect();
    dense(store, out, &h)[0]
}

/// Scalar walk through every mixer's equations for a single input.
pub fn mixer_oracle(mixer: &Mixer, store: &ParamStore, qs: &[f64], s: &[f64]) -> Vec<f64> {
    let n = qs.len();
    match mixer {
        Mixer::Independent => qs.to_vec(),
        Mixer::Vdn => vec![qs.iter().sum()],
        Mixer::VdnS { bias } => vec![qs.iter().sum::<f64>() + two_layer_bias(store, &bias.hidden, &bias.out, s)],
        Mixer::Qmix {
            hyper_w1,
            hyper_b1,
            hyper_w2,
            hyper_b2,
        } => {
            let w1: Vec<f64> = dense(store, hyper_w1, s).iter().map(|v| v.abs()).collect();
            let b1 = dense(store, hyper_b1, s);
            let h = b1.len();
            let hidden: Vec<f64> = (0..h)
                .map(|j| elu(b1[j] + (0..n).map(|a| qs[a] * w1[a * h + j]).sum::<f64>()))
                .collect();
            let w2: Vec<f64> = dense(store, hyper_w2, s).iter().map(|v| v.abs()).collect();
            let b2 = two_layer_bias(store, &hyper_b2.hidden, &hyper_b2.out, s);
            vec![hidden.iter().zip(&w2).map(|(x, w)| x * w).sum::<f64>() + b2]
        }
        Mixer::QmixLin { hyper_w, hyper_b } => {
            let w = dense(store, hyper_w, s);
            let b = two_layer_bias(store, &hyper_b.hidden, &hyper_b.out, s);
            vec![qs.iter().zip(&w).map(|(q, w)| q * w.abs()).sum::<f64>() + b]
        }
        Mixer::QmixNs { w1, b1, w2, b2 } => {
            let (w1, b1, w2, b2) = (column(store, *w1), column(store, *b1), column(store, *w2), column(store, *b2));
            let h = b1.len();
            let hidden: Vec<f64> = (0..h)
                .map(|j| elu(b1[j] + (0..n).map(|a| qs[a] * w1[a * h + j].abs()).sum::<f64>()))
                .collect();
            vec![hidden.iter().zip(&w2).map(|(x, w)| x * w.abs()).sum::<f64>() + b2[0]]
        }
    }
}

/// Every joint action over `n` agents with `k` actions each, in
/// lexicographic order.
pub fn joint_actions(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |u| {
                    let mut q = p.clone();
                    q.push(u);
                    q
                })
            })
            .collect();
    }
    out
}

/// Exhaustive joint argmax of `mixer` over available joint actions; the
/// first maximiser in lexicographic order wins ties.
pub fn brute_force_argmax(
    mixer: &Mixer,
    store: &ParamStore,
    agent_qs: &[Vec<f64>],
    masks: &[Vec<bool>],
    s: &[f64],
) -> (Vec<usize>, f64) {
    let n = agent_qs.len();
    let k = agent_qs[0].len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for u in joint_actions(n, k) {
        if (0..n).any(|a| !masks[a][u[a]]) {
            continue;
        }
        let chosen: Vec<f64> = (0..n).map(|a| agent_qs[a][u[a]]).collect();
        let v = mixer_oracle(mixer, store, &chosen, s)[0];
        if best.as_ref().is_none_or(|(_, bv)| v > *bv) {
            best = Some((u, v));
        }
    }
    best.expect("some joint action is available")
}

/// Mean squared error of the best additive fit `a_i + b_j` to a square
/// matrix: the residual is the doubly centred matrix.
pub fn additive_fit_mse(m: &[f64], k: usize) -> f64 {
    let grand = m.iter().sum::<f64>() / (k * k) as f64;
    let row = |i: usize| (0..k).map(|j| m[i * k + j]).sum::<f64>() / k as f64;
    let col = |j: usize| (0..k).map(|i| m[i * k + j]).sum::<f64>() / k as f64;
    let mut sse = 0.0;
    for i in 0..k {
        for j in 0..k {
            let r = m[i * k + j] - row(i) - col(j) + grand;
            sse += r * r;
        }
    }
    sse / (k * k) as f64
}

/// All set partitions of `0..n` as block labels.
fn partitions(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut labels = vec![0; n];
    fn go(i: usize, next: usize, labels: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if i == labels.len() {
            out.push(labels.clone());
            return;
        }
        for l in 0..=next {
            labels[i] = l;
            go(i + 1, next.max(l + 1), labels, out);
        }
    }
    go(0, 0, &mut labels, &mut out);
    out
}

#[derive(Clone, Copy, Debug)]
enum Order {
    Less,
    Greater,
    Equal,
}

/// Smallest MSE any function `f(q1(u1), q2(u2))` monotone in both
/// arguments can reach on a 2×2 payoff (row = first agent).
///
/// For each pair of per-agent orderings of the two actions the fit is an
/// isotonic regression on the four cells; its optimum is piecewise
/// constant at block means, so enumerating the 15 partitions of the cells
/// finds it exactly.
pub fn monotone_fit_mse_2x2(m: &[f64]) -> f64 {
    let cell = |i: usize, j: usize| i * 2 + j;
    let mut best = f64::INFINITY;
    let orders = [Order::Less, Order::Greater, Order::Equal];
    let parts = partitions(4);
    for o1 in orders {
        for o2 in orders {
            // constraints (lo, hi, strict_equal)
            let mut cons: Vec<(usize, usize, bool)> = Vec::new();
            for j in 0..2 {
                match o1 {
                    Order::Less => cons.push((cell(0, j), cell(1, j), false)),
                    Order::Greater => cons.push((cell(1, j), cell(0, j), false)),
                    Order::Equal => cons.push((cell(0, j), cell(1, j), true)),
                }
            }
            for i in 0..2 {
                match o2 {
                    Order::Less => cons.push((cell(i, 0), cell(i, 1), false)),
                    Order::Greater => cons.push((cell(i, 1), cell(i, 0), false)),
                    Order::Equal => cons.push((cell(i, 0), cell(i, 1), true)),
                }
            }
            for p in &parts {
                let blocks = p.iter().max().unwrap() + 1;
                let mut sum = vec![0.0; blocks];
                let mut cnt = vec![0.0; blocks];
                for (c, &b) in p.iter().enumerate() {
                    sum[b] += m[c];
                    cnt[b] += 1.0;
                }
                let fit: Vec<f64> = p.iter().map(|&b| sum[b] / cnt[b]).collect();
                let ok = cons.iter().all(|&(lo, hi, eq)| {
                    if eq {
                        fit[lo] == fit[hi]
                    } else {
                        fit[lo] <= fit[hi]
                    }
                });
                if ok {
                    let mse = fit.iter().zip(m).map(|(f, v)| (f - v).powi(2)).sum::<f64>() / 4.0;
                    best = best.min(mse);
                }
            }
        }
    }
    best
}

#[test]
fn oracle_self_checks() {
    assert_eq!(partitions(4).len(), 15);
    assert_eq!(additive_fit_mse(&[0.0, 1.0, 1.0, 8.0], 2), 2.25);
    assert_eq!(additive_fit_mse(&[1.0, 2.0, 3.0, 4.0], 2), 0.0);
    assert_eq!(monotone_fit_mse_2x2(&[0.0, 1.0, 1.0, 8.0]), 0.0);
    assert!((monotone_fit_mse_2x2(&[2.0, 1.0, 1.0, 8.0]) - 1.0 / 6.0).abs() < 1e-12);
    assert_eq!(joint_actions(2, 3).len(), 9);
}
