//! Non-learned reference recommenders: popularity and cosine ItemKNN.

use crate::dataio::{Dataset, ItemId, UserId};
use crate::evaluator::Scorer;
use crate::model::ModelError;

/// Number of training histories containing each item.
pub fn pop_scores(dataset: &Dataset) -> Vec<f64> {
    let mut counts = vec![0.0; dataset.num_items];
    for hist in &dataset.histories {
        for &j in hist {
            counts[j as usize] += 1.0;
        }
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct Popularity {
    pub scores: Vec<f64>,
}

impl Popularity {
    pub fn fit(dataset: &Dataset) -> Self {
        Popularity {
            scores: pop_scores(dataset),
        }
    }
}

impl Scorer for Popularity {
    fn score_candidates(
        &self,
        _user: UserId,
        _history: &[ItemId],
        candidates: &[ItemId],
    ) -> Result<Vec<f64>, ModelError> {
        candidates
            .iter()
            .map(|&i| {
                self.scores.get(i as usize).copied().ok_or(ModelError::ItemOutOfRange {
                    item: i,
                    num_items: self.scores.len(),
                })
            })
            .collect()
    }
}

/// Sparse item-item cosine similarities in compressed-row form. Each row
/// lists its neighbours in ascending id order; the diagonal is never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemSimMatrix {
    offsets: Vec<usize>,
    neighbors: Vec<ItemId>,
    values: Vec<f64>,
}

impl ItemSimMatrix {
    pub fn num_items(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.neighbors.len()
    }

    pub fn row(&self, i: ItemId) -> (&[ItemId], &[f64]) {
        let (lo, hi) = (self.offsets[i as usize], self.offsets[i as usize + 1]);
        (&self.neighbors[lo..hi], &self.values[lo..hi])
    }

    /// `s_ij`, zero when the pair never co-occurs.
    pub fn get(&self, i: ItemId, j: ItemId) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |pos| vals[pos])
    }
}

/// Cosine similarity `|U_i ∩ U_j| / sqrt(|U_i| |U_j|)` between the binary
/// user columns of each item pair, accumulated from co-occurrence counts.
/// With `max_neighbors`, each row keeps only its strongest entries (ties to
/// the smaller id), which breaks symmetry.
pub fn itemknn_similarities(dataset: &Dataset, max_neighbors: Option<usize>) -> ItemSimMatrix {
    let n = dataset.num_items;
    let mut users_of: Vec<Vec<UserId>> = vec![Vec::new(); n];
    for (u, hist) in dataset.histories.iter().enumerate() {
        for &j in hist {
            users_of[j as usize].push(u as UserId);
        }
    }
    let norms: Vec<f64> = users_of.iter().map(|us| (us.len() as f64).sqrt()).collect();

    let mut counts = vec![0u32; n];
    let mut touched: Vec<ItemId> = Vec::new();
    let mut offsets = Vec::with_capacity(n + 1);
    let mut neighbors = Vec::new();
    let mut values = Vec::new();
    offsets.push(0);
    for i in 0..n {
        for &u in &users_of[i] {
            for &j in &dataset.histories[u as usize] {
                if j as usize == i {
                    continue;
                }
                if counts[j as usize] == 0 {
                    touched.push(j);
                }
                counts[j as usize] += 1;
            }
        }
        touched.sort_unstable();
        let mut row: Vec<(ItemId, f64)> = touched
            .iter()
            .map(|&j| {
                let c = counts[j as usize] as f64;
                counts[j as usize] = 0;
                (j, c / (norms[i] * norms[j as usize]))
            })
            .collect();
        touched.clear();
        if let Some(limit) = max_neighbors {
            if row.len() > limit {
                row.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                row.truncate(limit);
                row.sort_unstable_by_key(|(j, _)| *j);
            }
        }
        for (j, s) in row {
            neighbors.push(j);
            values.push(s);
        }
        offsets.push(neighbors.len());
    }
    ItemSimMatrix {
        offsets,
        neighbors,
        values,
    }
}

/// `Σ_{j ∈ H \ {target}} s_target,j`.
pub fn itemknn_predict(sims: &ItemSimMatrix, history: &[ItemId], target: ItemId) -> f64 {
    history
        .iter()
        .filter(|&&j| j != target)
        .map(|&j| sims.get(target, j))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemKnn {
    pub sims: ItemSimMatrix,
}

impl ItemKnn {
    pub fn fit(dataset: &Dataset, max_neighbors: Option<usize>) -> Self {
        ItemKnn {
            sims: itemknn_similarities(dataset, max_neighbors),
        }
    }
}

impl Scorer for ItemKnn {
    fn score_candidates(
        &self,
        _user: UserId,
        history: &[ItemId],
        candidates: &[ItemId],
    ) -> Result<Vec<f64>, ModelError> {
        let n = self.sims.num_items();
        if let Some(&bad) = history.iter().chain(candidates).find(|&&i| i as usize >= n) {
            return Err(ModelError::ItemOutOfRange {
                item: bad,
                num_items: n,
            });
        }
        Ok(candidates
            .iter()
            .map(|&i| itemknn_predict(&self.sims, history, i))
            .collect())
    }
}
