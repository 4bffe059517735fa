//! Independent scalar oracles shared by the integration tests. Nothing here
//! calls into the crate's forward or backward code paths.
#![allow(dead_code)]

use nais_core::autograd::{Backprop, LossConfig};
use nais_core::dataio::ItemId;
use nais_core::model::{AttentionNet, AttentionVariant, Embeddings, FismParams, NaisParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn naive_logit(net: &AttentionNet, p: &[f64], q: &[f64]) -> (f64, Vec<f64>) {
    let input: Vec<f64> = match net.variant {
        AttentionVariant::Concat => p.iter().chain(q).copied().collect(),
        AttentionVariant::Prod => p.iter().zip(q).map(|(a, b)| a * b).collect(),
    };
    let d = input.len();
    let mut pre = Vec::new();
    let mut f = 0.0;
    for r in 0..net.b.len() {
        let mut z = net.b[r];
        for c in 0..d {
            z += net.w[r * d + c] * input[c];
        }
        pre.push(z);
        f += net.h[r] * if z > 0.0 { z } else { 0.0 };
    }
    (f, pre)
}

fn dotp(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn sq(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum()
}

fn log_loss(score: f64, label: u8) -> f64 {
    let p = 1.0 / (1.0 + (-score).exp());
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// NAIS score evaluated term by term, recomputing the denominator each time.
pub fn naive_nais_score(params: &NaisParams, history: &[ItemId], target: ItemId) -> f64 {
    let p = params.p.row(target as usize);
    let eff: Vec<ItemId> = history.iter().copied().filter(|&j| j != target).collect();
    let mut score = 0.0;
    for &j in &eff {
        let mut denom = 0.0;
        for &l in &eff {
            denom += naive_logit(&params.net, p, params.q.row(l as usize)).0.exp();
        }
        let f = naive_logit(&params.net, p, params.q.row(j as usize)).0;
        score += f.exp() / denom.powf(params.beta) * dotp(p, params.q.row(j as usize));
    }
    score
}

pub fn naive_fism_score(params: &FismParams, history: &[ItemId], target: ItemId) -> f64 {
    let eff: Vec<ItemId> = history.iter().copied().filter(|&j| j != target).collect();
    if eff.is_empty() {
        return 0.0;
    }
    let p = params.p.row(target as usize);
    let mut s = 0.0;
    for &j in &eff {
        s += dotp(p, params.q.row(j as usize));
    }
    s / (eff.len() as f64).powf(params.alpha)
}

pub fn naive_nais_objective(
    params: &NaisParams,
    history: &[ItemId],
    target: ItemId,
    label: u8,
    cfg: &LossConfig,
) -> f64 {
    let score = naive_nais_score(params, history, target);
    let mut reg = sq(params.p.row(target as usize)) + sq(&params.net.w) + sq(&params.net.b) + sq(&params.net.h);
    for &j in history.iter().filter(|&&j| j != target) {
        reg += sq(params.q.row(j as usize));
    }
    log_loss(score, label) / cfg.n as f64 + cfg.lambda * reg
}

pub fn naive_fism_objective(
    params: &FismParams,
    history: &[ItemId],
    target: ItemId,
    label: u8,
    cfg: &LossConfig,
) -> f64 {
    let score = naive_fism_score(params, history, target);
    let mut reg = sq(params.p.row(target as usize));
    for &j in history.iter().filter(|&&j| j != target) {
        reg += sq(params.q.row(j as usize));
    }
    log_loss(score, label) / cfg.n as f64 + cfg.lambda * reg
}

pub struct GradCase {
    pub params: NaisParams,
    pub history: Vec<ItemId>,
    pub target: ItemId,
    pub label: u8,
    pub cfg: LossConfig,
}

/// Draws a random NAIS instance whose ReLU pre-activations all stay at
/// least 1e-6 away from the kink.
pub fn random_case(rng: &mut ChaCha8Rng, variant: AttentionVariant, beta: f64) -> GradCase {
    loop {
        let k = rng.random_range(1..=8);
        let a = rng.random_range(1..=8);
        let num_items = 10;
        let d = variant.input_dim(k);
        let mut gen = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let params = NaisParams {
            p: Embeddings::from_vec(num_items, k, gen(num_items * k)).unwrap(),
            q: Embeddings::from_vec(num_items, k, gen(num_items * k)).unwrap(),
            net: AttentionNet {
                variant,
                w: gen(a * d),
                b: gen(a),
                h: gen(a),
            },
            beta,
        };
        let len = rng.random_range(1..=6);
        let mut items: Vec<ItemId> = (0..num_items as ItemId).collect();
        for n in 0..len {
            let swap = rng.random_range(n..items.len());
            items.swap(n, swap);
        }
        let history = items[..len].to_vec();
        // Occasionally aim at an item inside the history to exercise exclusion.
        let target = if rng.random_bool(0.2) { history[0] } else { items[len] };
        let label = rng.random_range(0..2u8);
        let lambda = if rng.random_bool(0.5) { 0.0 } else { 0.01 };
        let n = if rng.random_bool(0.5) { 1 } else { 7 };
        let p = params.p.row(target as usize);
        let near_kink = history.iter().filter(|&&j| j != target).any(|&j| {
            naive_logit(&params.net, p, params.q.row(j as usize))
                .1
                .iter()
                .any(|z| z.abs() < 1e-6)
        });
        if !near_kink {
            return GradCase {
                params,
                history,
                target,
                label,
                cfg: LossConfig::new(lambda, n),
            };
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Max relative error between the analytic NAIS gradient and central
/// differences over every parameter coordinate.
pub fn nais_max_rel_error(case: &GradCase, h: f64) -> f64 {
    let mut bp = Backprop::new();
    bp.nais(&case.params, &case.history, case.target, case.label, &case.cfg);
    let grads = bp.grads().clone();
    let objective = |p: &NaisParams| naive_nais_objective(p, &case.history, case.target, case.label, &case.cfg);
    let mut worst: f64 = 0.0;
    let num_items = case.params.num_items();
    let k = case.params.k();

    for item in 0..num_items as ItemId {
        for c in 0..k {
            let analytic_p = grads.dp.get(item).map_or(0.0, |row| row[c]);
            let numeric = central(&case.params, &objective, h, |p| &mut p.p.row_mut(item as usize)[c]);
            worst = worst.max(rel_err(analytic_p, numeric));
            let analytic_q = grads.dq.get(item).map_or(0.0, |row| row[c]);
            let numeric = central(&case.params, &objective, h, |p| &mut p.q.row_mut(item as usize)[c]);
            worst = worst.max(rel_err(analytic_q, numeric));
        }
    }
    let dense = grads.dense.as_ref().expect("NAIS gradients carry dense parts");
    for idx in 0..case.params.net.w.len() {
        let numeric = central(&case.params, &objective, h, |p| &mut p.net.w[idx]);
        worst = worst.max(rel_err(dense.w[idx], numeric));
    }
    for idx in 0..case.params.net.b.len() {
        let numeric = central(&case.params, &objective, h, |p| &mut p.net.b[idx]);
        worst = worst.max(rel_err(dense.b[idx], numeric));
        let numeric = central(&case.params, &objective, h, |p| &mut p.net.h[idx]);
        worst = worst.max(rel_err(dense.h[idx], numeric));
    }
    worst
}

pub fn fism_max_rel_error(
    params: &FismParams,
    history: &[ItemId],
    target: ItemId,
    label: u8,
    cfg: &LossConfig,
    h: f64,
) -> f64 {
    let mut bp = Backprop::new();
    bp.fism(params, history, target, label, cfg);
    let grads = bp.grads().clone();
    let objective = |p: &FismParams| naive_fism_objective(p, history, target, label, cfg);
    let mut worst: f64 = 0.0;
    for item in 0..params.num_items() as ItemId {
        for c in 0..params.k() {
            let analytic_p = grads.dp.get(item).map_or(0.0, |row| row[c]);
            let numeric = central(params, &objective, h, |p| &mut p.p.row_mut(item as usize)[c]);
            worst = worst.max(rel_err(analytic_p, numeric));
            let analytic_q = grads.dq.get(item).map_or(0.0, |row| row[c]);
            let numeric = central(params, &objective, h, |p| &mut p.q.row_mut(item as usize)[c]);
            worst = worst.max(rel_err(analytic_q, numeric));
        }
    }
    worst
}

fn central<P: Clone>(params: &P, objective: &impl Fn(&P) -> f64, h: f64, coord: impl Fn(&mut P) -> &mut f64) -> f64 {
    let mut plus = params.clone();
    *coord(&mut plus) += h;
    let mut minus = params.clone();
    *coord(&mut minus) -= h;
    (objective(&plus) - objective(&minus)) / (2.0 * h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rank of `positive` under a full descending sort by score with ties broken
/// by smaller item id.
pub fn brute_force_rank(scores: &[(ItemId, f64)], positive: ItemId) -> usize {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    sorted.iter().position(|(i, _)| *i == positive).unwrap() + 1
}

/// All permutations of `xs` (Heap's algorithm).
pub fn permutations<T: Clone>(xs: &[T]) -> Vec<Vec<T>> {
    fn heap<T: Clone>(k: usize, a: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if k == 1 {
            out.push(a.clone());
            return;
        }
        heap(k - 1, a, out);
        for i in 0..k - 1 {
            if k.is_multiple_of(2) {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
            heap(k - 1, a, out);
        }
    }
    let mut a = xs.to_vec();
    let mut out = Vec::new();
    if !a.is_empty() {
        heap(a.len(), &mut a, &mut out);
    }
    out
}
