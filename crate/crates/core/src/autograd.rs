//! Pointwise log loss and its analytic gradients for FISM and NAIS.
//!
//! Each training instance contributes `ℓ(ŷ, y) / N` to the objective, plus
//! an L2 penalty `λ‖θ‖²` on the parameters the instance touches: the target
//! row of `P`, the effective-history rows of `Q`, and (NAIS only) the whole
//! attention network.

use crate::dataio::{Dataset, ItemId, MiniBatch, TrainInstance};
use crate::model::{
    dot, fism_predict, nais_predict, AttentionVariant, FismParams, ModelError, NaisParams, TargetContext,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// L2 coefficient λ.
    pub lambda: f64,
    /// Number of training instances the data term is averaged over.
    pub n: usize,
}

impl LossConfig {
    pub fn new(lambda: f64, n: usize) -> Self {
        assert!(lambda >= 0.0, "lambda must be non-negative");
        assert!(n >= 1, "instance count must be positive");
        LossConfig { lambda, n }
    }

    /// Un-averaged per-instance objective, as used for stochastic updates.
    pub fn per_instance(lambda: f64) -> Self {
        LossConfig::new(lambda, 1)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−log σ(score)` for positives, `−log(1 − σ(score))` for negatives.
#[inline]
pub fn instance_loss(score: f64, label: u8) -> f64 {
    let signed = if label == 1 { -score } else { score };
    (-score.abs()).exp().ln_1p() + signed.max(0.0)
}

/// Anything that can score a target against a history and report `‖Θ‖²`.
pub trait Objective {
    fn predict(&self, history: &[ItemId], target: ItemId) -> Result<f64, ModelError>;
    fn squared_norm(&self) -> f64;
}

fn sq(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum()
}

impl Objective for FismParams {
    fn predict(&self, history: &[ItemId], target: ItemId) -> Result<f64, ModelError> {
        fism_predict(self, history, target)
    }

    fn squared_norm(&self) -> f64 {
        sq(self.p.as_slice()) + sq(self.q.as_slice())
    }
}

impl Objective for NaisParams {
    fn predict(&self, history: &[ItemId], target: ItemId) -> Result<f64, ModelError> {
        nais_predict(self, history, target).map(|(score, _)| score)
    }

    fn squared_norm(&self) -> f64 {
        sq(self.p.as_slice()) + sq(self.q.as_slice()) + sq(&self.net.w) + sq(&self.net.b) + sq(&self.net.h)
    }
}

/// `(1/N) Σ ℓ + λ‖Θ‖²` over every instance of the given batches.
pub fn batch_objective<M: Objective>(
    batches: &[MiniBatch],
    params: &M,
    dataset: &Dataset,
    cfg: &LossConfig,
) -> Result<f64, ModelError> {
    let mut data = 0.0;
    for batch in batches {
        let history = dataset.history(batch.user);
        for x in &batch.instances {
            data += instance_loss(params.predict(history, x.item)?, x.label);
        }
    }
    Ok(data / cfg.n as f64 + cfg.lambda * params.squared_norm())
}

/// Gradient rows keyed by item id, stored contiguously.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub dim: usize,
    pub items: Vec<ItemId>,
    pub values: Vec<f64>,
}

impl SparseRows {
    fn reset(&mut self, dim: usize) {
        self.dim = dim;
        self.items.clear();
        self.values.clear();
    }

    fn push_zeroed(&mut self, item: ItemId) {
        self.items.push(item);
        self.values.resize(self.values.len() + self.dim, 0.0);
    }

    #[inline]
    fn row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.values[n * self.dim..(n + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ItemId, &[f64])> {
        self.items
            .iter()
            .copied()
            .zip(self.values.chunks_exact(self.dim.max(1)))
    }

    pub fn get(&self, item: ItemId) -> Option<&[f64]> {
        self.iter().find(|(i, _)| *i == item).map(|(_, row)| row)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DenseGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientSet {
    pub dp: SparseRows,
    pub dq: SparseRows,
    /// Attention-network gradients; `None` for FISM.
    pub dense: Option<DenseGrads>,
}

impl GradientSet {
    /// Item ids that have a row in either sparse table.
    pub fn touched_items(&self) -> Vec<ItemId> {
        let mut items: Vec<ItemId> = self.dp.items.iter().chain(&self.dq.items).copied().collect();
        items.sort_unstable();
        items.dedup();
        items
    }

    pub fn is_finite(&self) -> bool {
        let dense_ok = self
            .dense
            .as_ref()
            .is_none_or(|d| d.w.iter().chain(&d.b).chain(&d.h).all(|x| x.is_finite()));
        dense_ok && self.dp.values.iter().all(|x| x.is_finite()) && self.dq.values.iter().all(|x| x.is_finite())
    }
}

/// Score and un-averaged data loss of the instance a gradient was taken at.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceStats {
    pub score: f64,
    pub loss: f64,
}

/// Reusable buffers for repeated gradient evaluations.
#[derive(Debug, Default)]
pub struct Backprop {
    grads: GradientSet,
    items: Vec<ItemId>,
    sum: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
    sims: Vec<f64>,
    outer: Vec<f64>,
    dz: Vec<f64>,
    dz_sum: Vec<f64>,
}

impl Backprop {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn grads(&self) -> &GradientSet {
        &self.grads
    }

    pub fn into_grads(self) -> GradientSet {
        self.grads
    }

    fn collect_history(&mut self, history: &[ItemId], target: ItemId) {
        self.items.clear();
        self.items.extend(history.iter().copied().filter(|&j| j != target));
    }

    /// Gradient of one FISM instance; the history must contain valid ids.
    pub fn fism(
        &mut self,
        params: &FismParams,
        history: &[ItemId],
        target: ItemId,
        label: u8,
        cfg: &LossConfig,
    ) -> InstanceStats {
        let k = params.k();
        self.collect_history(history, target);
        self.grads.dp.reset(k);
        self.grads.dq.reset(k);
        self.grads.dense = None;

        let p_i = params.p.row(target as usize);
        self.sum.clear();
        self.sum.resize(k, 0.0);
        for &j in &self.items {
            for (s, x) in self.sum.iter_mut().zip(params.q.row(j as usize)) {
                *s += x;
            }
        }
        let n = self.items.len();
        let norm = if n == 0 { 0.0 } else { (n as f64).powf(-params.alpha) };
        let score = norm * dot(p_i, &self.sum);
        let delta = (sigmoid(score) - f64::from(label)) / cfg.n as f64;
        let two_lambda = 2.0 * cfg.lambda;

        self.grads.dp.push_zeroed(target);
        let dp = self.grads.dp.row_mut(0);
        for ((g, s), p) in dp.iter_mut().zip(&self.sum).zip(p_i) {
            *g = delta * norm * s + two_lambda * p;
        }
        for (n, &j) in self.items.iter().enumerate() {
            self.grads.dq.push_zeroed(j);
            let q_j = params.q.row(j as usize);
            let dq = self.grads.dq.row_mut(n);
            for ((g, p), q) in dq.iter_mut().zip(p_i).zip(q_j) {
                *g = delta * norm * p + two_lambda * q;
            }
        }
        InstanceStats {
            score,
            loss: instance_loss(score, label),
        }
    }

    /// Gradient of one NAIS instance, including the full Jacobian of the
    /// smoothed softmax: `∂a_j/∂f_l = a_j (1{j=l} − β softmax(f)_l)`.
    pub fn nais(
        &mut self,
        params: &NaisParams,
        history: &[ItemId],
        target: ItemId,
        label: u8,
        cfg: &LossConfig,
    ) -> InstanceStats {
        let k = params.k();
        let net = &params.net;
        let a = net.factor();
        let d = net.variant.input_dim(k);
        let beta = params.beta;
        let two_lambda = 2.0 * cfg.lambda;
        self.collect_history(history, target);
        self.grads.dp.reset(k);
        self.grads.dq.reset(k);
        let mut dense = self.grads.dense.take().unwrap_or_default();
        dense.w.clear();
        dense.w.extend(net.w.iter().map(|w| two_lambda * w));
        dense.b.clear();
        dense.b.extend(net.b.iter().map(|b| two_lambda * b));
        dense.h.clear();
        dense.h.extend(net.h.iter().map(|h| two_lambda * h));

        let p_i = params.p.row(target as usize);
        self.grads.dp.push_zeroed(target);
        let n = self.items.len();
        if n == 0 {
            for (g, p) in self.grads.dp.row_mut(0).iter_mut().zip(p_i) {
                *g = two_lambda * p;
            }
            self.grads.dense = Some(dense);
            return InstanceStats {
                score: 0.0,
                loss: instance_loss(0.0, label),
            };
        }

        let ctx = TargetContext::new(net, p_i);
        self.hidden.clear();
        self.hidden.resize(n * a, 0.0);
        self.logits.clear();
        self.sims.clear();
        for (idx, &j) in self.items.iter().enumerate() {
            let q_j = params.q.row(j as usize);
            let f = ctx.forward(&net.h, q_j, &mut self.hidden[idx * a..(idx + 1) * a]);
            self.logits.push(f);
            self.sims.push(dot(p_i, q_j));
        }
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|f| (f - max).exp()).sum::<f64>().ln();
        let score: f64 = self
            .logits
            .iter()
            .zip(&self.sims)
            .map(|(f, s)| (f - beta * lse).exp() * s)
            .sum();
        let delta = (sigmoid(score) - f64::from(label)) / cfg.n as f64;

        self.outer.clear();
        self.outer.resize(a * k, 0.0);
        self.dz.clear();
        self.dz.resize(a, 0.0);
        self.dz_sum.clear();
        self.dz_sum.resize(a, 0.0);
        let mut dp_acc = vec![0.0; k];

        for (idx, &j) in self.items.iter().enumerate() {
            let q_j = params.q.row(j as usize);
            let f = self.logits[idx];
            let weight = (f - beta * lse).exp();
            let softmax = (f - lse).exp();
            let g_logit = delta * (weight * self.sims[idx] - beta * softmax * score);
            let z = &self.hidden[idx * a..(idx + 1) * a];

            for r in 0..a {
                if z[r] > 0.0 {
                    dense.h[r] += g_logit * z[r];
                    self.dz[r] = g_logit * net.h[r];
                } else {
                    self.dz[r] = 0.0;
                }
            }

            self.grads.dq.push_zeroed(j);
            let dq = self.grads.dq.row_mut(idx);
            for c in 0..k {
                dq[c] = delta * weight * p_i[c] + two_lambda * q_j[c];
                dp_acc[c] += delta * weight * q_j[c];
            }
            for r in 0..a {
                let dzr = self.dz[r];
                if dzr == 0.0 {
                    continue;
                }
                self.dz_sum[r] += dzr;
                let m_row = &ctx.m[r * k..(r + 1) * k];
                let o_row = &mut self.outer[r * k..(r + 1) * k];
                for c in 0..k {
                    dq[c] += m_row[c] * dzr;
                    o_row[c] += dzr * q_j[c];
                }
            }
        }

        for r in 0..a {
            dense.b[r] += self.dz_sum[r];
            let w_row = &net.w[r * d..(r + 1) * d];
            let dw_row = &mut dense.w[r * d..(r + 1) * d];
            let o_row = &self.outer[r * k..(r + 1) * k];
            match net.variant {
                AttentionVariant::Prod => {
                    for c in 0..k {
                        dw_row[c] += o_row[c] * p_i[c];
                        dp_acc[c] += w_row[c] * o_row[c];
                    }
                }
                AttentionVariant::Concat => {
                    let s = self.dz_sum[r];
                    for c in 0..k {
                        dw_row[c] += s * p_i[c];
                        dw_row[k + c] += o_row[c];
                        dp_acc[c] += s * w_row[c];
                    }
                }
            }
        }

        for ((g, acc), p) in self.grads.dp.row_mut(0).iter_mut().zip(&dp_acc).zip(p_i) {
            *g = acc + two_lambda * p;
        }
        self.grads.dense = Some(dense);
        InstanceStats {
            score,
            loss: instance_loss(score, label),
        }
    }
}

pub fn grad_fism(instance: &TrainInstance, params: &FismParams, dataset: &Dataset, cfg: &LossConfig) -> GradientSet {
    let mut bp = Backprop::new();
    bp.fism(
        params,
        dataset.history(instance.user),
        instance.item,
        instance.label,
        cfg,
    );
    bp.into_grads()
}

pub fn grad_nais(instance: &TrainInstance, params: &NaisParams, dataset: &Dataset, cfg: &LossConfig) -> GradientSet {
    let mut bp = Backprop::new();
    bp.nais(
        params,
        dataset.history(instance.user),
        instance.item,
        instance.label,
        cfg,
    );
    bp.into_grads()
}
