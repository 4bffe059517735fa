//! Seeded synthetic implicit-feedback data with topical structure and
//! heavy-tailed history lengths, laid out exactly like a loaded dataset.
//!
//! Items belong to topics. Each user follows a few topics with skewed
//! preferences and consumes items topic by topic, favouring popular items
//! within a topic; a fraction of interactions are uniform noise. The last
//! generated interaction of every user is held out as the test item and 99
//! unseen items are drawn as evaluation negatives.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, LogNormal};

use crate::dataio::{sample_eval_negatives, DataError, Dataset, ItemId, EVAL_NEGATIVES};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_topics: usize,
    /// Inclusive range of topics a user follows.
    pub topics_per_user: (usize, usize),
    /// Median history length; lengths are log-normal around it.
    pub median_history: f64,
    /// Log-normal shape; larger values give longer tails.
    pub history_spread: f64,
    pub min_history: usize,
    pub max_history: usize,
    /// Probability that an interaction ignores the user's topics.
    pub noise: f64,
    /// Zipf exponent of item popularity within a topic.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 600,
            num_items: 800,
            num_topics: 40,
            topics_per_user: (2, 5),
            median_history: 25.0,
            history_spread: 0.8,
            min_history: 4,
            max_history: 300,
            noise: 0.1,
            popularity_skew: 0.8,
            seed: 7,
        }
    }
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64], total: f64) -> usize {
    let mut x = rng.random::<f64>() * total;
    for (idx, w) in weights.iter().enumerate() {
        if x < *w {
            return idx;
        }
        x -= w;
    }
    weights.len() - 1
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Dataset, DataError> {
    assert!(cfg.num_topics >= 1 && cfg.num_items >= cfg.num_topics);
    assert!(cfg.min_history + EVAL_NEGATIVES + 2 <= cfg.num_items);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Shuffled topic assignment so ids carry no structure.
    let mut order: Vec<ItemId> = (0..cfg.num_items as ItemId).collect();
    order.shuffle(&mut rng);
    let mut topics: Vec<Vec<ItemId>> = vec![Vec::new(); cfg.num_topics];
    for (pos, &item) in order.iter().enumerate() {
        topics[pos % cfg.num_topics].push(item);
    }
    let popularity: Vec<Vec<f64>> = topics
        .iter()
        .map(|items| {
            (0..items.len())
                .map(|rank| 1.0 / ((rank + 1) as f64).powf(cfg.popularity_skew))
                .collect()
        })
        .collect();
    let pop_totals: Vec<f64> = popularity.iter().map(|w| w.iter().sum()).collect();

    let lengths = LogNormal::new(cfg.median_history.ln(), cfg.history_spread).expect("valid log-normal");
    let mut histories = Vec::with_capacity(cfg.num_users);
    let mut test_pairs = Vec::with_capacity(cfg.num_users);
    let mut seen = vec![false; cfg.num_items];
    for user in 0..cfg.num_users {
        let (lo, hi) = cfg.topics_per_user;
        let n_topics = rng.random_range(lo..=hi).min(cfg.num_topics);
        let mut all: Vec<usize> = (0..cfg.num_topics).collect();
        all.shuffle(&mut rng);
        let followed = &all[..n_topics];
        let prefs: Vec<f64> = (0..n_topics).map(|_| Exp1.sample(&mut rng)).collect();
        let pref_total: f64 = prefs.iter().sum();
        let followed_size: usize = followed.iter().map(|&t| topics[t].len()).sum();

        let len = (lengths.sample(&mut rng).round() as usize)
            .clamp(cfg.min_history, cfg.max_history)
            .min(followed_size.saturating_sub(1).max(cfg.min_history));
        let mut sequence: Vec<ItemId> = Vec::with_capacity(len + 1);
        let mut attempts = 0;
        while sequence.len() < len + 1 && attempts < 100 * (len + 1) {
            attempts += 1;
            let item = if rng.random_bool(cfg.noise) {
                rng.random_range(0..cfg.num_items as ItemId)
            } else {
                let t = followed[sample_weighted(&mut rng, &prefs, pref_total)];
                topics[t][sample_weighted(&mut rng, &popularity[t], pop_totals[t])]
            };
            if !seen[item as usize] {
                seen[item as usize] = true;
                sequence.push(item);
            }
        }
        for &i in &sequence {
            seen[i as usize] = false;
        }
        let test = sequence.pop().expect("at least one generated item");
        histories.push(sequence);
        test_pairs.push((user as u32, test));
    }

    let mut dataset = Dataset {
        num_users: cfg.num_users,
        num_items: cfg.num_items,
        histories,
        test_pairs,
        eval_negatives: Vec::new(),
    };
    dataset.eval_negatives = sample_eval_negatives(&dataset, EVAL_NEGATIVES, cfg.seed ^ 0xa5a5_a5a5)?;
    dataset.validate()?;
    Ok(dataset)
}

/// Training histories with an exact shape: `num_users` users, `num_items`
/// items and `train_interactions` distinct (user, item) pairs spread as evenly
/// as possible over users. No test pairs are attached.
pub fn with_shape(num_users: usize, num_items: usize, train_interactions: usize, seed: u64) -> Dataset {
    assert!(num_users > 0 && train_interactions <= num_users * num_items);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (base, extra) = (train_interactions / num_users, train_interactions % num_users);
    let histories = (0..num_users)
        .map(|u| {
            let len = base + usize::from(u < extra);
            rand::seq::index::sample(&mut rng, num_items, len)
                .into_iter()
                .map(|i| i as ItemId)
                .collect()
        })
        .collect();
    Dataset {
        num_users,
        num_items,
        histories,
        test_pairs: Vec::new(),
        eval_negatives: Vec::new(),
    }
}

/// Keeps a seeded uniform fraction of users (renumbered densely, in original
/// order) along with their histories, test pairs and negatives.
pub fn subsample_users(dataset: &Dataset, fraction: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: Vec<bool> = (0..dataset.num_users).map(|_| rng.random_bool(fraction)).collect();
    let mut new_id = vec![u32::MAX; dataset.num_users];
    let mut histories = Vec::new();
    for (u, hist) in dataset.histories.iter().enumerate() {
        if keep[u] {
            new_id[u] = histories.len() as u32;
            histories.push(hist.clone());
        }
    }
    let mut test_pairs = Vec::new();
    let mut eval_negatives = Vec::new();
    for (idx, &(u, i)) in dataset.test_pairs.iter().enumerate() {
        if keep[u as usize] {
            test_pairs.push((new_id[u as usize], i));
            if let Some(n) = dataset.eval_negatives.get(idx) {
                eval_negatives.push(n.clone());
            }
        }
    }
    Dataset {
        num_users: histories.len(),
        num_items: dataset.num_items,
        histories,
        test_pairs,
        eval_negatives,
    }
}
