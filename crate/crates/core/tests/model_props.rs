mod common;

use common::{naive_fism_score, naive_nais_score, rng};
use nais_core::dataio::ItemId;
use nais_core::model::{
    attention_weights, fism_predict, nais_predict, nais_score, refresh_prediction, AttentionNet, AttentionVariant,
    Embeddings, FismParams, NaisParams,
};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_params(r: &mut ChaCha8Rng, n: usize, k: usize, a: usize, variant: AttentionVariant, beta: f64) -> NaisParams {
    let d = variant.input_dim(k);
    let mut gen = |len: usize| -> Vec<f64> { (0..len).map(|_| r.random_range(-1.0..1.0)).collect() };
    NaisParams {
        p: Embeddings::from_vec(n, k, gen(n * k)).unwrap(),
        q: Embeddings::from_vec(n, k, gen(n * k)).unwrap(),
        net: AttentionNet {
            variant,
            w: gen(a * d),
            b: gen(a),
            h: gen(a),
        },
        beta,
    }
}

fn random_history(r: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<ItemId> {
    let mut items: Vec<ItemId> = (0..n as ItemId).collect();
    items.shuffle(r);
    items.truncate(len);
    items
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

#[test]
fn nais_matches_quadratic_oracle() {
    let mut r = rng(11);
    for variant in [AttentionVariant::Prod, AttentionVariant::Concat] {
        for _ in 0..200 {
            let beta = r.random_range(0.0..=1.0);
            let params = random_params(&mut r, 30, 4, 5, variant, beta);
            let len = r.random_range(0..12);
            let history = random_history(&mut r, 30, len);
            let target = r.random_range(0..30);
            let (score, cache) = nais_predict(&params, &history, target).unwrap();
            let oracle = naive_nais_score(&params, &history, target);
            assert!(close(score, oracle, 1e-12), "{score} vs {oracle}");
            assert!(close(cache.score(), oracle, 1e-12));
            assert_eq!(nais_score(&params, &history, target).unwrap(), score);
        }
    }
}

#[test]
fn fism_matches_scalar_oracle() {
    let mut r = rng(12);
    for _ in 0..200 {
        let nais = random_params(&mut r, 25, 3, 1, AttentionVariant::Prod, 0.0);
        let fism = FismParams {
            p: nais.p,
            q: nais.q,
            alpha: r.random_range(0.0..=1.0),
        };
        let len = r.random_range(0..10);
        let history = random_history(&mut r, 25, len);
        let target = r.random_range(0..25);
        let got = fism_predict(&fism, &history, target).unwrap();
        assert!(close(got, naive_fism_score(&fism, &history, target), 1e-12));
    }
}

#[test]
fn score_ignores_history_order() {
    let mut r = rng(13);
    for variant in [AttentionVariant::Prod, AttentionVariant::Concat] {
        let params = random_params(&mut r, 40, 6, 4, variant, 0.5);
        let mut history = random_history(&mut r, 40, 15);
        let target = 39;
        let base = nais_score(&params, &history, target).unwrap();
        for _ in 0..20 {
            history.shuffle(&mut r);
            assert!(close(nais_score(&params, &history, target).unwrap(), base, 1e-12));
        }
    }
}

#[test]
fn attention_weights_follow_smoothing() {
    let mut r = rng(14);
    let params = random_params(&mut r, 20, 4, 4, AttentionVariant::Prod, 1.0);
    let history = random_history(&mut r, 20, 8);
    let target = history[0];
    let w = attention_weights(&params, &history, target).unwrap();
    // The target is never its own neighbour.
    assert_eq!(w.items.len(), 7);
    assert!(!w.items.contains(&target));
    assert!(close(w.weights.iter().sum::<f64>(), 1.0, 1e-14));

    let zero = NaisParams {
        beta: 0.0,
        ..params.clone()
    };
    let w0 = attention_weights(&zero, &history, target).unwrap();
    for (a, f) in w0.weights.iter().zip(&w0.logits) {
        assert!(close(*a, f.exp(), 1e-14));
    }
}

#[test]
fn refresh_tracks_recomputation_over_long_streams() {
    let mut r = rng(15);
    for variant in [AttentionVariant::Prod, AttentionVariant::Concat] {
        let n = 1200;
        let params = random_params(&mut r, n, 8, 8, variant, 0.5);
        let order = random_history(&mut r, n, n);
        let target = order[0];
        let mut history = order[1..21].to_vec();
        let (_, mut cache) = nais_predict(&params, &history, target).unwrap();
        for &item in &order[21..1021] {
            let refreshed = refresh_prediction(&params, &mut cache, item).unwrap();
            history.push(item);
            if history.len().is_multiple_of(50) {
                let full = naive_or_fast(&params, &history, target);
                assert!(close(refreshed, full, 1e-8), "{refreshed} vs {full}");
            }
        }
        let full = nais_score(&params, &history, target).unwrap();
        assert!(close(cache.score(), full, 1e-8));
    }
}

fn naive_or_fast(params: &NaisParams, history: &[ItemId], target: ItemId) -> f64 {
    if history.len() <= 60 {
        naive_nais_score(params, history, target)
    } else {
        nais_score(params, history, target).unwrap()
    }
}

#[test]
fn out_of_range_items_are_rejected() {
    let mut r = rng(16);
    let params = random_params(&mut r, 10, 2, 2, AttentionVariant::Prod, 0.5);
    assert!(nais_score(&params, &[1, 2], 10).is_err());
    assert!(nais_score(&params, &[1, 12], 3).is_err());
    let (_, mut cache) = nais_predict(&params, &[1, 2], 3).unwrap();
    assert!(refresh_prediction(&params, &mut cache, 2).is_err());
    assert!(refresh_prediction(&params, &mut cache, 3).is_err());
    assert!(refresh_prediction(&params, &mut cache, 99).is_err());
}
