//! Leave-one-out top-K evaluation, significance testing and the attention
//! interpretability analyses.

use std::collections::HashSet;
use std::fmt;

use rayon::prelude::*;
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::autograd::sigmoid;
use crate::dataio::{Dataset, ItemId, UserId};
use crate::model::{attention_weights, dot, fism_predict, nais_score, FismParams, ModelError, ModelParams, NaisParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("item {0} is not among the ranked candidates")]
    PositiveMissing(ItemId),
    #[error("user {0} has no evaluation negatives")]
    MissingNegatives(UserId),
    #[error("user {0} has no training history")]
    EmptyHistory(UserId),
    #[error("unknown user {0}")]
    UnknownUser(UserId),
    #[error("t-test needs two equal-length samples of at least 2 values (got {0} and {1})")]
    SampleSize(usize, usize),
    #[error("t-test is undefined: all paired differences are identical")]
    Degenerate,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that scores candidate items for a user given their history.
pub trait Scorer: Sync {
    fn score_candidates(&self, user: UserId, history: &[ItemId], candidates: &[ItemId])
        -> Result<Vec<f64>, ModelError>;
}

impl Scorer for FismParams {
    fn score_candidates(
        &self,
        _user: UserId,
        history: &[ItemId],
        candidates: &[ItemId],
    ) -> Result<Vec<f64>, ModelError> {
        let n = self.num_items();
        if let Some(&bad) = history.iter().chain(candidates).find(|&&i| i as usize >= n) {
            return Err(ModelError::ItemOutOfRange {
                item: bad,
                num_items: n,
            });
        }
        let mut sum = vec![0.0; self.k()];
        for &j in history {
            for (s, x) in sum.iter_mut().zip(self.q.row(j as usize)) {
                *s += x;
            }
        }
        let members: HashSet<ItemId> = history.iter().copied().collect();
        candidates
            .iter()
            .map(|&i| {
                if members.contains(&i) {
                    fism_predict(self, history, i)
                } else if history.is_empty() {
                    Ok(0.0)
                } else {
                    let norm = (history.len() as f64).powf(-self.alpha);
                    Ok(norm * dot(self.p.row(i as usize), &sum))
                }
            })
            .collect()
    }
}

impl Scorer for NaisParams {
    fn score_candidates(
        &self,
        _user: UserId,
        history: &[ItemId],
        candidates: &[ItemId],
    ) -> Result<Vec<f64>, ModelError> {
        candidates.iter().map(|&i| nais_score(self, history, i)).collect()
    }
}

impl Scorer for ModelParams {
    fn score_candidates(
        &self,
        user: UserId,
        history: &[ItemId],
        candidates: &[ItemId],
    ) -> Result<Vec<f64>, ModelError> {
        match self {
            ModelParams::Fism(m) => m.score_candidates(user, history, candidates),
            ModelParams::Nais(m) => m.score_candidates(user, history, candidates),
        }
    }
}

/// Adapts a plain scoring closure `(user, history, candidate) -> score`.
pub struct FnScorer<F>(pub F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(UserId, &[ItemId], ItemId) -> f64 + Sync,
{
    fn score_candidates(
        &self,
        user: UserId,
        history: &[ItemId],
        candidates: &[ItemId],
    ) -> Result<Vec<f64>, ModelError> {
        Ok(candidates.iter().map(|&i| (self.0)(user, history, i)).collect())
    }
}

#[inline]
fn finite_or_min(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        x
    }
}

/// 1-based rank of `positive`: one plus the number of candidates scoring
/// strictly higher, plus tied candidates with a smaller item id.
pub fn rank_position(scores: &[(ItemId, f64)], positive: ItemId) -> Result<usize, EvalError> {
    let target = scores
        .iter()
        .find(|(i, _)| *i == positive)
        .map(|(_, s)| finite_or_min(*s))
        .ok_or(EvalError::PositiveMissing(positive))?;
    let ahead = scores
        .iter()
        .filter(|(i, s)| {
            let s = finite_or_min(*s);
            s > target || (s == target && *i < positive)
        })
        .count();
    Ok(ahead + 1)
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub users: Vec<UserId>,
    pub ranks: Vec<usize>,
    pub per_user_hr: Vec<f64>,
    pub per_user_ndcg: Vec<f64>,
    pub mean_hr: f64,
    pub mean_ndcg: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users\t{}", self.users.len())?;
        writeln!(f, "hr@{}\t{:.6}", self.k, self.mean_hr)?;
        write!(f, "ndcg@{}\t{:.6}", self.k, self.mean_ndcg)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Ranks each test item against its stored negatives and averages HR@K and
/// NDCG@K over users. Users are scored in parallel; results are kept in
/// test-pair order.
pub fn evaluate<S: Scorer + ?Sized>(model: &S, dataset: &Dataset, k: usize) -> Result<EvalReport, EvalError> {
    let per_user: Vec<(UserId, usize)> = dataset
        .test_pairs
        .par_iter()
        .enumerate()
        .map(|(idx, &(user, item))| {
            let negatives = dataset
                .eval_negatives
                .get(idx)
                .filter(|n| !n.is_empty())
                .ok_or(EvalError::MissingNegatives(user))?;
            let mut candidates = Vec::with_capacity(negatives.len() + 1);
            candidates.push(item);
            candidates.extend_from_slice(negatives);
            let scores = model.score_candidates(user, dataset.history(user), &candidates)?;
            let pairs: Vec<(ItemId, f64)> = candidates.into_iter().zip(scores).collect();
            Ok((user, rank_position(&pairs, item)?))
        })
        .collect::<Result<_, EvalError>>()?;

    let users = per_user.iter().map(|(u, _)| *u).collect();
    let ranks: Vec<usize> = per_user.iter().map(|(_, r)| *r).collect();
    let per_user_hr: Vec<f64> = ranks.iter().map(|&r| hr_at_k(r, k)).collect();
    let per_user_ndcg: Vec<f64> = ranks.iter().map(|&r| ndcg_at_k(r, k)).collect();
    Ok(EvalReport {
        k,
        mean_hr: mean(&per_user_hr),
        mean_ndcg: mean(&per_user_ndcg),
        users,
        ranks,
        per_user_hr,
        per_user_ndcg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub mean_difference: f64,
}

/// One-sample t-test on the paired differences `b − a`, two-sided.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest, EvalError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(EvalError::SampleSize(a.len(), b.len()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let m = mean(&diffs);
    let var = diffs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(EvalError::Degenerate);
    }
    let t = m / (var / n).sqrt();
    let df = n - 1.0;
    // P(|T| > |t|) = I_{df/(df+t²)}(df/2, 1/2)
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(TTest {
        t,
        df,
        p,
        mean_difference: m,
    })
}

/// L1-normalized attention breakdown of one prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub user: UserId,
    pub target: ItemId,
    pub weights: Vec<(ItemId, f64)>,
    /// `σ(ŷ)`.
    pub probability: f64,
}

impl fmt::Display for Explanation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "user\t{}\ttarget\t{}", self.user, self.target)?;
        for (item, w) in &self.weights {
            writeln!(f, "{item}\t{w:.6}")?;
        }
        write!(f, "probability\t{:.6}", self.probability)
    }
}

fn l1_normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Per-item share of the attention in predicting `target` for `user`. FISM
/// models weigh every history item uniformly.
pub fn explain(
    params: &ModelParams,
    dataset: &Dataset,
    user: UserId,
    target: ItemId,
) -> Result<Explanation, EvalError> {
    if user as usize >= dataset.num_users {
        return Err(EvalError::UnknownUser(user));
    }
    if target as usize >= params.num_items() {
        return Err(ModelError::ItemOutOfRange {
            item: target,
            num_items: params.num_items(),
        }
        .into());
    }
    let history = dataset.history(user);
    let eff: Vec<ItemId> = history.iter().copied().filter(|&j| j != target).collect();
    if eff.is_empty() {
        return Err(EvalError::EmptyHistory(user));
    }
    let weights = match params {
        ModelParams::Fism(_) => vec![1.0 / eff.len() as f64; eff.len()],
        ModelParams::Nais(nais) => l1_normalize(&attention_weights(nais, history, target)?.weights),
    };
    let score = params.score(history, target)?;
    Ok(Explanation {
        user,
        target,
        weights: eff.into_iter().zip(weights).collect(),
        probability: sigmoid(score),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStat {
    pub user: UserId,
    pub item: ItemId,
    pub mean: f64,
    pub variance: f64,
}

/// Mean and (population) variance of the L1-normalized attention weights of
/// every test prediction. Users without an effective history are skipped.
pub fn attention_stats(params: &NaisParams, dataset: &Dataset) -> Result<Vec<AttentionStat>, EvalError> {
    let stats: Vec<Option<AttentionStat>> = dataset
        .test_pairs
        .par_iter()
        .map(|&(user, item)| {
            let history = dataset.history(user);
            if history.iter().all(|&j| j == item) {
                return Ok(None);
            }
            let w = l1_normalize(&attention_weights(params, history, item)?.weights);
            let m = mean(&w);
            let variance = w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / w.len() as f64;
            Ok(Some(AttentionStat {
                user,
                item,
                mean: m,
                variance,
            }))
        })
        .collect::<Result<_, EvalError>>()?;
    Ok(stats.into_iter().flatten().collect())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}
