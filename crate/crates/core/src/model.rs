//! FISM and NAIS forward computation.
//!
//! Both models score a `(user, target)` pair from the user's interaction
//! history with the target removed (the effective history). FISM averages
//! the history embeddings uniformly; NAIS weights each history item with an
//! attention MLP followed by a softmax whose denominator is raised to the
//! smoothing exponent `beta`.

use std::cell::Cell;
use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::dataio::ItemId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("item {item} out of range (model has {num_items} items)")]
    ItemOutOfRange { item: ItemId, num_items: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("effective history is empty")]
    EmptyHistory,
    #[error("cannot refresh a prediction for item {item} with itself")]
    SelfRefresh { item: ItemId },
    #[error("item {item} is already part of the cached history")]
    DuplicateRefresh { item: ItemId },
}

/// Dense row-major `rows × dim` table of 64-bit embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        Embeddings {
            rows,
            dim,
            data: vec![0.0; rows * dim],
        }
    }

    pub fn from_vec(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != rows * dim {
            return Err(ModelError::Config(format!(
                "{} values for a {rows}x{dim} table",
                data.len()
            )));
        }
        Ok(Embeddings { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FismParams {
    /// Target-role embeddings `p_i`.
    pub p: Embeddings,
    /// History-role embeddings `q_j`.
    pub q: Embeddings,
    /// Normalization exponent applied to the effective history length.
    pub alpha: f64,
}

impl FismParams {
    pub fn num_items(&self) -> usize {
        self.p.rows()
    }

    pub fn k(&self) -> usize {
        self.p.dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_tables(&self.p, &self.q)?;
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ModelError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

fn check_tables(p: &Embeddings, q: &Embeddings) -> Result<(), ModelError> {
    if p.rows() != q.rows() || p.dim() != q.dim() {
        return Err(ModelError::Config(format!(
            "P is {}x{} but Q is {}x{}",
            p.rows(),
            p.dim(),
            q.rows(),
            q.dim()
        )));
    }
    if p.as_slice().iter().chain(q.as_slice()).any(|x| !x.is_finite()) {
        return Err(ModelError::Config("non-finite embedding entry".into()));
    }
    Ok(())
}

/// How the target and history embeddings enter the attention MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    /// `W [p_i; q_j]`, input width `2k`.
    Concat,
    /// `W (p_i ⊙ q_j)`, input width `k`.
    Prod,
}

impl AttentionVariant {
    pub fn input_dim(self, k: usize) -> usize {
        match self {
            AttentionVariant::Concat => 2 * k,
            AttentionVariant::Prod => k,
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::Concat => "concat",
            AttentionVariant::Prod => "prod",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "concat" => Ok(AttentionVariant::Concat),
            "prod" => Ok(AttentionVariant::Prod),
            other => Err(ModelError::Config(format!("unknown attention variant {other:?}"))),
        }
    }
}

/// One-hidden-layer attention MLP `h · ReLU(W x + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionNet {
    pub variant: AttentionVariant,
    /// `factor × input_dim`, row-major. For the concat variant the first `k`
    /// columns multiply `p_i` and the last `k` multiply `q_j`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub h: Vec<f64>,
}

impl AttentionNet {
    pub fn zeros(variant: AttentionVariant, k: usize, factor: usize) -> Self {
        AttentionNet {
            variant,
            w: vec![0.0; factor * variant.input_dim(k)],
            b: vec![0.0; factor],
            h: vec![0.0; factor],
        }
    }

    /// Attention factor `a` (hidden width).
    pub fn factor(&self) -> usize {
        self.b.len()
    }

    pub fn input_dim(&self) -> usize {
        if self.b.is_empty() {
            0
        } else {
            self.w.len() / self.b.len()
        }
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.b.len() + self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaisParams {
    pub p: Embeddings,
    pub q: Embeddings,
    pub net: AttentionNet,
    /// Smoothing exponent on the softmax denominator.
    pub beta: f64,
}

impl NaisParams {
    pub fn num_items(&self) -> usize {
        self.p.rows()
    }

    pub fn k(&self) -> usize {
        self.p.dim()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_tables(&self.p, &self.q)?;
        let a = self.net.factor();
        if a == 0 || self.net.h.len() != a {
            return Err(ModelError::Config(format!(
                "attention bias has {} entries and projection {}",
                a,
                self.net.h.len()
            )));
        }
        let d = self.net.variant.input_dim(self.k());
        if self.net.w.len() != a * d {
            return Err(ModelError::Config(format!(
                "{} variant needs W of {a}x{d}, found {} entries",
                self.net.variant,
                self.net.w.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(ModelError::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        let net = &self.net;
        if net.w.iter().chain(&net.b).chain(&net.h).any(|x| !x.is_finite()) {
            return Err(ModelError::Config("non-finite attention parameter".into()));
        }
        Ok(())
    }
}

#[inline]
fn check_item(item: ItemId, num_items: usize) -> Result<(), ModelError> {
    if (item as usize) < num_items {
        Ok(())
    } else {
        Err(ModelError::ItemOutOfRange { item, num_items })
    }
}

fn effective_history(history: &[ItemId], target: ItemId, num_items: usize) -> Result<Vec<ItemId>, ModelError> {
    check_item(target, num_items)?;
    let mut out = Vec::with_capacity(history.len());
    for &j in history {
        check_item(j, num_items)?;
        if j != target {
            out.push(j);
        }
    }
    Ok(out)
}

/// FISM score `p_i · |H'|^-α Σ_{j∈H'} q_j`, with `H'` the history without
/// the target. Zero for an empty effective history.
pub fn fism_predict(params: &FismParams, history: &[ItemId], target: ItemId) -> Result<f64, ModelError> {
    let eff = effective_history(history, target, params.num_items())?;
    if eff.is_empty() {
        return Ok(0.0);
    }
    let mut sum = vec![0.0; params.k()];
    for &j in &eff {
        for (s, x) in sum.iter_mut().zip(params.q.row(j as usize)) {
            *s += x;
        }
    }
    let norm = (eff.len() as f64).powf(-params.alpha);
    Ok(norm * dot(params.p.row(target as usize), &sum))
}

thread_local! {
    static LOGIT_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Number of attention-logit evaluations performed on this thread by the
/// prediction and refresh paths.
pub fn logit_evaluations() -> u64 {
    LOGIT_EVALS.with(Cell::get)
}

#[inline]
fn count_logits(n: u64) {
    LOGIT_EVALS.with(|c| c.set(c.get() + n));
}

/// Attention MLP specialised to one target item: the hidden pre-activation
/// for history item `j` is `base + M q_j`, where
/// concat: `M = W_q`, `base = W_p p_i + b`;
/// prod:   `M = W diag(p_i)`, `base = b`.
pub(crate) struct TargetContext {
    pub factor: usize,
    pub k: usize,
    pub base: Vec<f64>,
    pub m: Vec<f64>,
}

impl TargetContext {
    pub fn new(net: &AttentionNet, p_i: &[f64]) -> Self {
        let k = p_i.len();
        let a = net.factor();
        let d = net.variant.input_dim(k);
        let mut base = net.b.clone();
        let mut m = vec![0.0; a * k];
        for r in 0..a {
            let w_row = &net.w[r * d..(r + 1) * d];
            let m_row = &mut m[r * k..(r + 1) * k];
            match net.variant {
                AttentionVariant::Concat => {
                    base[r] += dot(&w_row[..k], p_i);
                    m_row.copy_from_slice(&w_row[k..]);
                }
                AttentionVariant::Prod => {
                    for ((mv, w), p) in m_row.iter_mut().zip(w_row).zip(p_i) {
                        *mv = w * p;
                    }
                }
            }
        }
        TargetContext { factor: a, k, base, m }
    }

    /// Writes the hidden pre-activations for `q_j` into `z` and returns the logit.
    #[inline]
    pub fn forward(&self, h: &[f64], q_j: &[f64], z: &mut [f64]) -> f64 {
        let mut logit = 0.0;
        for r in 0..self.factor {
            let zr = self.base[r] + dot(&self.m[r * self.k..(r + 1) * self.k], q_j);
            z[r] = zr;
            if zr > 0.0 {
                logit += h[r] * zr;
            }
        }
        logit
    }

    pub fn logit(&self, h: &[f64], q_j: &[f64]) -> f64 {
        count_logits(1);
        let mut logit = 0.0;
        for r in 0..self.factor {
            let zr = self.base[r] + dot(&self.m[r * self.k..(r + 1) * self.k], q_j);
            if zr > 0.0 {
                logit += h[r] * zr;
            }
        }
        logit
    }
}

fn single_logit(net: &AttentionNet, p_i: &[f64], q_j: &[f64]) -> f64 {
    count_logits(1);
    let k = p_i.len();
    let d = net.variant.input_dim(k);
    let mut logit = 0.0;
    for r in 0..net.factor() {
        let w_row = &net.w[r * d..(r + 1) * d];
        let z = net.b[r]
            + match net.variant {
                AttentionVariant::Concat => dot(&w_row[..k], p_i) + dot(&w_row[k..], q_j),
                AttentionVariant::Prod => w_row.iter().zip(p_i).zip(q_j).map(|((w, p), q)| w * p * q).sum(),
            };
        if z > 0.0 {
            logit += net.h[r] * z;
        }
    }
    logit
}

/// Attention logit `f(p_target, q_j)`.
pub fn attention_logit(params: &NaisParams, target: ItemId, j: ItemId) -> Result<f64, ModelError> {
    let n = params.num_items();
    check_item(target, n)?;
    check_item(j, n)?;
    let d = params.net.variant.input_dim(params.k());
    if params.net.w.len() != params.net.factor() * d {
        return Err(ModelError::Config(format!(
            "W has {} entries; {} variant expects {}x{d}",
            params.net.w.len(),
            params.net.variant,
            params.net.factor()
        )));
    }
    Ok(single_logit(
        &params.net,
        params.p.row(target as usize),
        params.q.row(j as usize),
    ))
}

/// `log Σ exp(x)` with max-shift.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Smoothed softmax `exp(f_j) / (Σ exp(f))^β`, evaluated as
/// `exp(f_j − β·logsumexp(f))`. Plain max-shifting is not valid here since
/// the shift does not cancel when `β ≠ 1`.
pub fn smoothed_softmax(logits: &[f64], beta: f64) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|f| (f - beta * lse).exp()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub items: Vec<ItemId>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn attention_weights(
    params: &NaisParams,
    history: &[ItemId],
    target: ItemId,
) -> Result<AttentionWeights, ModelError> {
    let items = effective_history(history, target, params.num_items())?;
    if items.is_empty() {
        return Err(ModelError::EmptyHistory);
    }
    let ctx = TargetContext::new(&params.net, params.p.row(target as usize));
    let logits: Vec<f64> = items
        .iter()
        .map(|&j| ctx.logit(&params.net.h, params.q.row(j as usize)))
        .collect();
    let weights = smoothed_softmax(&logits, params.beta);
    Ok(AttentionWeights { items, logits, weights })
}

/// NAIS score without building a prediction cache.
pub fn nais_score(params: &NaisParams, history: &[ItemId], target: ItemId) -> Result<f64, ModelError> {
    let items = effective_history(history, target, params.num_items())?;
    if items.is_empty() {
        return Ok(0.0);
    }
    let p_i = params.p.row(target as usize);
    let ctx = TargetContext::new(&params.net, p_i);
    let mut logits = Vec::with_capacity(items.len());
    for &j in &items {
        logits.push(ctx.logit(&params.net.h, params.q.row(j as usize)));
    }
    let lse = log_sum_exp(&logits);
    Ok(items
        .iter()
        .zip(&logits)
        .map(|(&j, f)| (f - params.beta * lse).exp() * dot(p_i, params.q.row(j as usize)))
        .sum())
}

/// Either trained model, as persisted and served.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Fism(FismParams),
    Nais(NaisParams),
}

impl ModelParams {
    pub fn num_items(&self) -> usize {
        match self {
            ModelParams::Fism(m) => m.num_items(),
            ModelParams::Nais(m) => m.num_items(),
        }
    }

    pub fn k(&self) -> usize {
        match self {
            ModelParams::Fism(m) => m.k(),
            ModelParams::Nais(m) => m.k(),
        }
    }

    pub fn score(&self, history: &[ItemId], target: ItemId) -> Result<f64, ModelError> {
        match self {
            ModelParams::Fism(m) => fism_predict(m, history, target),
            ModelParams::Nais(m) => nais_score(m, history, target),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelParams::Fism(m) => m.validate(),
            ModelParams::Nais(m) => m.validate(),
        }
    }
}

/// Shifted running sums behind a NAIS prediction for one `(user, candidate)`
/// pair:
/// `sum_weighted = Σ exp(f_j − max_logit)·(p_i·q_j)`,
/// `sum_exp = Σ exp(f_j − max_logit)`, so that
/// `score = sum_weighted·e^{max_logit} / (sum_exp·e^{max_logit})^β`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCache {
    pub user: u32,
    pub item: ItemId,
    pub sum_weighted: f64,
    pub sum_exp: f64,
    pub max_logit: f64,
    pub count: usize,
    pub beta: f64,
    history: HashSet<ItemId>,
}

impl PredictionCache {
    pub fn empty(user: u32, item: ItemId, beta: f64) -> Self {
        PredictionCache {
            user,
            item,
            sum_weighted: 0.0,
            sum_exp: 0.0,
            max_logit: f64::NEG_INFINITY,
            count: 0,
            beta,
            history: HashSet::new(),
        }
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.history.contains(&item)
    }

    pub fn score(&self) -> f64 {
        if self.count == 0 || self.sum_weighted == 0.0 {
            return 0.0;
        }
        let log_mag = self.sum_weighted.abs().ln() - self.beta * self.sum_exp.ln() + (1.0 - self.beta) * self.max_logit;
        self.sum_weighted.signum() * log_mag.exp()
    }

    fn push(&mut self, item: ItemId, logit: f64, similarity: f64) {
        if logit > self.max_logit {
            let scale = (self.max_logit - logit).exp();
            self.sum_weighted *= scale;
            self.sum_exp *= scale;
            self.max_logit = logit;
        }
        let e = (logit - self.max_logit).exp();
        self.sum_weighted += e * similarity;
        self.sum_exp += e;
        self.count += 1;
        self.history.insert(item);
    }
}

/// NAIS score `p_i · Σ_{j∈H'} a_ij q_j` together with the cache that allows
/// constant-cost refreshes when the user interacts with a new item.
pub fn nais_predict(
    params: &NaisParams,
    history: &[ItemId],
    target: ItemId,
) -> Result<(f64, PredictionCache), ModelError> {
    nais_predict_for_user(params, 0, history, target)
}

pub fn nais_predict_for_user(
    params: &NaisParams,
    user: u32,
    history: &[ItemId],
    target: ItemId,
) -> Result<(f64, PredictionCache), ModelError> {
    let mut cache = PredictionCache::empty(user, target, params.beta);
    let items = effective_history(history, target, params.num_items())?;
    if items.is_empty() {
        return Ok((0.0, cache));
    }
    let p_i = params.p.row(target as usize);
    let ctx = TargetContext::new(&params.net, p_i);
    let mut logits = Vec::with_capacity(items.len());
    let mut sims = Vec::with_capacity(items.len());
    for &j in &items {
        let q_j = params.q.row(j as usize);
        logits.push(ctx.logit(&params.net.h, q_j));
        sims.push(dot(p_i, q_j));
    }
    let weights = smoothed_softmax(&logits, params.beta);
    let score = weights.iter().zip(&sims).map(|(a, s)| a * s).sum();

    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    cache.max_logit = m;
    for ((&j, &f), &s) in items.iter().zip(&logits).zip(&sims) {
        let e = (f - m).exp();
        cache.sum_weighted += e * s;
        cache.sum_exp += e;
        cache.history.insert(j);
    }
    cache.count = items.len();
    Ok((score, cache))
}

/// Folds one new history item into a cached prediction: a single attention
/// logit and one `k`-length dot product.
pub fn refresh_prediction(
    params: &NaisParams,
    cache: &mut PredictionCache,
    new_item: ItemId,
) -> Result<f64, ModelError> {
    check_item(new_item, params.num_items())?;
    if new_item == cache.item {
        return Err(ModelError::SelfRefresh { item: new_item });
    }
    if cache.contains(new_item) {
        return Err(ModelError::DuplicateRefresh { item: new_item });
    }
    let p_i = params.p.row(cache.item as usize);
    let q_t = params.q.row(new_item as usize);
    let logit = single_logit(&params.net, p_i, q_t);
    cache.push(new_item, logit, dot(p_i, q_t));
    Ok(cache.score())
}
