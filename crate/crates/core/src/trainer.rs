//! Adagrad training over user mini-batches for FISM and NAIS.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autograd::{Backprop, GradientSet, InstanceStats, LossConfig};
use crate::dataio::{sample_negatives, user_minibatches, DataError, Dataset, ItemId, UserId};
use crate::evaluator::{evaluate, EvalError, Scorer};
use crate::model::{AttentionNet, AttentionVariant, Embeddings, FismParams, ModelError, ModelParams, NaisParams};

pub const INIT_STD: f64 = 0.01;
pub const ADAGRAD_EPS: f64 = 1e-8;

const INIT_SALT: u64 = 0x1b87_3593_cc9e_2d51;
const SHUFFLE_SALT: u64 = 0x5851_f42d_4c95_7f2d;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite gradient for {param} (epoch {epoch}, user {user})")]
    NonFiniteGradient {
        epoch: usize,
        user: UserId,
        param: &'static str,
    },
    #[error("training diverged: non-finite loss at epoch {epoch}, user {user}")]
    Diverged { epoch: usize, user: UserId },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Fism,
    Nais(AttentionVariant),
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Fism => f.write_str("fism"),
            ModelKind::Nais(v) => write!(f, "nais-{v}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fism" => Ok(ModelKind::Fism),
            "nais-concat" => Ok(ModelKind::Nais(AttentionVariant::Concat)),
            "nais-prod" => Ok(ModelKind::Nais(AttentionVariant::Prod)),
            other => Err(TrainError::Config(format!(
                "unknown model {other:?} (expected fism, nais-concat or nais-prod)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub k: usize,
    pub attention_factor: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub neg_ratio: usize,
    pub seed: u64,
    /// Cutoff for per-epoch held-out evaluation; `None` disables it.
    pub eval_top_k: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelKind::Nais(AttentionVariant::Prod),
            k: 16,
            attention_factor: 16,
            alpha: 0.0,
            beta: 0.5,
            lambda: 0.0,
            lr: 0.01,
            epochs: 50,
            neg_ratio: 4,
            seed: 1,
            eval_top_k: Some(10),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if self.k == 0 {
            return fail("embedding size must be at least 1".into());
        }
        if self.attention_factor == 0 {
            return fail("attention factor must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda {} must be a non-negative number", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if self.neg_ratio == 0 {
            return fail("negative ratio must be at least 1 for training".into());
        }
        Ok(())
    }

    /// Seed of the epoch's negative sample.
    pub fn sampling_seed(&self, epoch: usize) -> u64 {
        self.seed.wrapping_add(epoch as u64)
    }

    /// Seed of the epoch's user permutation.
    pub fn shuffle_seed(&self, epoch: usize) -> u64 {
        self.sampling_seed(epoch) ^ SHUFFLE_SALT
    }

    pub fn init_seed(&self) -> u64 {
        self.seed ^ INIT_SALT
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based epoch index; 0 denotes the initialization.
    pub epoch: usize,
    /// Mean training loss of the epoch; `None` for the initialization.
    pub loss: Option<f64>,
    pub seconds: f64,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
        write!(
            f,
            "{}\t{}\t{:.3}\t{}\t{}",
            self.epoch,
            opt(self.loss),
            self.seconds,
            opt(self.hr),
            opt(self.ndcg)
        )
    }
}

/// Per-coordinate Adagrad: `acc += g²; θ −= lr · g / (√acc + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub lr: f64,
    pub eps: f64,
    pub acc_p: Vec<f64>,
    pub acc_q: Vec<f64>,
    pub acc_w: Vec<f64>,
    pub acc_b: Vec<f64>,
    pub acc_h: Vec<f64>,
}

#[inline]
fn adagrad_update(
    theta: &mut [f64],
    acc: &mut [f64],
    grad: &[f64],
    lr: f64,
    eps: f64,
    param: &'static str,
) -> Result<(), &'static str> {
    for ((t, a), &g) in theta.iter_mut().zip(acc.iter_mut()).zip(grad) {
        if g == 0.0 {
            continue;
        }
        if !g.is_finite() {
            return Err(param);
        }
        *a += g * g;
        *t -= lr * g / (a.sqrt() + eps);
    }
    Ok(())
}

impl AdagradState {
    pub fn new(num_items: usize, k: usize, net: Option<&AttentionNet>, lr: f64, eps: f64) -> Self {
        AdagradState {
            lr,
            eps,
            acc_p: vec![0.0; num_items * k],
            acc_q: vec![0.0; num_items * k],
            acc_w: net.map_or(Vec::new(), |n| vec![0.0; n.w.len()]),
            acc_b: net.map_or(Vec::new(), |n| vec![0.0; n.b.len()]),
            acc_h: net.map_or(Vec::new(), |n| vec![0.0; n.h.len()]),
        }
    }

    fn step_tables(&mut self, p: &mut Embeddings, q: &mut Embeddings, grads: &GradientSet) -> Result<(), &'static str> {
        let k = p.dim();
        for (item, g) in grads.dp.iter() {
            let i = item as usize;
            adagrad_update(
                p.row_mut(i),
                &mut self.acc_p[i * k..(i + 1) * k],
                g,
                self.lr,
                self.eps,
                "P",
            )?;
        }
        for (item, g) in grads.dq.iter() {
            let i = item as usize;
            adagrad_update(
                q.row_mut(i),
                &mut self.acc_q[i * k..(i + 1) * k],
                g,
                self.lr,
                self.eps,
                "Q",
            )?;
        }
        Ok(())
    }

    /// Applies one FISM gradient; on a non-finite entry returns the name of
    /// the offending parameter (coordinates before it may already be updated).
    pub fn step_fism(&mut self, params: &mut FismParams, grads: &GradientSet) -> Result<(), &'static str> {
        self.step_tables(&mut params.p, &mut params.q, grads)
    }

    pub fn step_nais(&mut self, params: &mut NaisParams, grads: &GradientSet) -> Result<(), &'static str> {
        self.step_tables(&mut params.p, &mut params.q, grads)?;
        if let Some(d) = &grads.dense {
            let (lr, eps) = (self.lr, self.eps);
            adagrad_update(&mut params.net.w, &mut self.acc_w, &d.w, lr, eps, "W")?;
            adagrad_update(&mut params.net.b, &mut self.acc_b, &d.b, lr, eps, "b")?;
            adagrad_update(&mut params.net.h, &mut self.acc_h, &d.h, lr, eps, "h")?;
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn init_attention(variant: AttentionVariant, k: usize, factor: usize, rng: &mut ChaCha8Rng) -> AttentionNet {
    AttentionNet {
        variant,
        w: gaussian(rng, factor * variant.input_dim(k)),
        b: gaussian(rng, factor),
        h: gaussian(rng, factor),
    }
}

/// Gaussian(0, 0.01²) initialization of every parameter, deterministic in `seed`.
pub fn init_params(cfg: &TrainConfig, num_items: usize, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.k;
    let p = Embeddings::from_vec(num_items, k, gaussian(&mut rng, num_items * k)).expect("shape");
    let q = Embeddings::from_vec(num_items, k, gaussian(&mut rng, num_items * k)).expect("shape");
    match cfg.model {
        ModelKind::Fism => ModelParams::Fism(FismParams { p, q, alpha: cfg.alpha }),
        ModelKind::Nais(variant) => ModelParams::Nais(NaisParams {
            p,
            q,
            net: init_attention(variant, k, cfg.attention_factor, &mut rng),
            beta: cfg.beta,
        }),
    }
}

/// NAIS parameters taking `P`, `Q` from a trained FISM model, with a freshly
/// initialized attention network.
pub fn nais_from_fism(cfg: &TrainConfig, fism: &FismParams, seed: u64) -> Result<NaisParams, TrainError> {
    let variant = match cfg.model {
        ModelKind::Nais(v) => v,
        ModelKind::Fism => return Err(TrainError::Config("pre-training target must be a NAIS model".into())),
    };
    if fism.k() != cfg.k {
        return Err(TrainError::Config(format!(
            "pre-trained embeddings have k={} but the configuration asks for k={}",
            fism.k(),
            cfg.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(NaisParams {
        p: fism.p.clone(),
        q: fism.q.clone(),
        net: init_attention(variant, cfg.k, cfg.attention_factor, &mut rng),
        beta: cfg.beta,
    })
}

/// A model the generic training loop can drive.
pub trait Trainable: Scorer + Clone {
    fn num_items(&self) -> usize;
    fn optimizer(&self, lr: f64) -> AdagradState;
    fn backprop(
        &self,
        bp: &mut Backprop,
        history: &[ItemId],
        target: ItemId,
        label: u8,
        cfg: &LossConfig,
    ) -> InstanceStats;
    fn apply(&mut self, state: &mut AdagradState, grads: &GradientSet) -> Result<(), &'static str>;
}

impl Trainable for FismParams {
    fn num_items(&self) -> usize {
        FismParams::num_items(self)
    }

    fn optimizer(&self, lr: f64) -> AdagradState {
        AdagradState::new(self.num_items(), self.k(), None, lr, ADAGRAD_EPS)
    }

    fn backprop(
        &self,
        bp: &mut Backprop,
        history: &[ItemId],
        target: ItemId,
        label: u8,
        cfg: &LossConfig,
    ) -> InstanceStats {
        bp.fism(self, history, target, label, cfg)
    }

    fn apply(&mut self, state: &mut AdagradState, grads: &GradientSet) -> Result<(), &'static str> {
        state.step_fism(self, grads)
    }
}

impl Trainable for NaisParams {
    fn num_items(&self) -> usize {
        NaisParams::num_items(self)
    }

    fn optimizer(&self, lr: f64) -> AdagradState {
        AdagradState::new(self.num_items(), self.k(), Some(&self.net), lr, ADAGRAD_EPS)
    }

    fn backprop(
        &self,
        bp: &mut Backprop,
        history: &[ItemId],
        target: ItemId,
        label: u8,
        cfg: &LossConfig,
    ) -> InstanceStats {
        bp.nais(self, history, target, label, cfg)
    }

    fn apply(&mut self, state: &mut AdagradState, grads: &GradientSet) -> Result<(), &'static str> {
        state.step_nais(self, grads)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub params: P,
    pub logs: Vec<EpochLog>,
    pub optimizer: AdagradState,
}

/// Runs `cfg.epochs` epochs from `params`. Each epoch draws a fresh negative
/// sample, visits users in a shuffled order and applies one Adagrad update
/// per instance. `on_epoch` sees every log (epoch 0 is the starting point)
/// together with the parameters at that moment.
pub fn train_from<P: Trainable>(
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut params: P,
    mut on_epoch: impl FnMut(&EpochLog, &P),
) -> Result<TrainOutcome<P>, TrainError> {
    cfg.validate()?;
    if params.num_items() < dataset.num_items {
        return Err(TrainError::Config(format!(
            "model covers {} items but the dataset has {}",
            params.num_items(),
            dataset.num_items
        )));
    }
    let loss_cfg = LossConfig::per_instance(cfg.lambda);
    let mut optimizer = params.optimizer(cfg.lr);
    let mut bp = Backprop::new();
    let mut logs = Vec::with_capacity(cfg.epochs + 1);

    let metrics = |params: &P| -> Result<(Option<f64>, Option<f64>), TrainError> {
        match cfg.eval_top_k {
            Some(k) if !dataset.test_pairs.is_empty() && !dataset.eval_negatives.is_empty() => {
                let report = evaluate(params, dataset, k)?;
                Ok((Some(report.mean_hr), Some(report.mean_ndcg)))
            }
            _ => Ok((None, None)),
        }
    };

    let (hr, ndcg) = metrics(&params)?;
    let start = EpochLog {
        epoch: 0,
        loss: None,
        seconds: 0.0,
        hr,
        ndcg,
    };
    on_epoch(&start, &params);
    logs.push(start);

    for epoch in 1..=cfg.epochs {
        let timer = Instant::now();
        let instances = sample_negatives(dataset, cfg.neg_ratio, cfg.sampling_seed(epoch))?;
        let batches = user_minibatches(&instances, cfg.shuffle_seed(epoch));
        let mut total = 0.0;
        for batch in &batches {
            let history = dataset.history(batch.user);
            for x in &batch.instances {
                let stats = params.backprop(&mut bp, history, x.item, x.label, &loss_cfg);
                if !stats.loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        user: batch.user,
                    });
                }
                total += stats.loss;
                params
                    .apply(&mut optimizer, bp.grads())
                    .map_err(|param| TrainError::NonFiniteGradient {
                        epoch,
                        user: batch.user,
                        param,
                    })?;
            }
        }
        let seconds = timer.elapsed().as_secs_f64();
        let (hr, ndcg) = metrics(&params)?;
        let log = EpochLog {
            epoch,
            loss: Some(total / instances.len().max(1) as f64),
            seconds,
            hr,
            ndcg,
        };
        on_epoch(&log, &params);
        logs.push(log);
    }
    Ok(TrainOutcome {
        params,
        logs,
        optimizer,
    })
}

pub fn train_fism(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome<FismParams>, TrainError> {
    train_fism_with(dataset, cfg, |_, _| {})
}

pub fn train_fism_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog, &FismParams),
) -> Result<TrainOutcome<FismParams>, TrainError> {
    if cfg.model != ModelKind::Fism {
        return Err(TrainError::Config(format!(
            "train_fism called with model {}",
            cfg.model
        )));
    }
    let params = match init_params(cfg, dataset.num_items, cfg.init_seed()) {
        ModelParams::Fism(p) => p,
        ModelParams::Nais(_) => unreachable!("FISM configuration"),
    };
    train_from(dataset, cfg, params, on_epoch)
}

pub fn train_nais(
    dataset: &Dataset,
    cfg: &TrainConfig,
    init: Option<&FismParams>,
) -> Result<TrainOutcome<NaisParams>, TrainError> {
    train_nais_with(dataset, cfg, init, |_, _| {})
}

/// NAIS training, optionally starting from FISM embeddings.
pub fn train_nais_with(
    dataset: &Dataset,
    cfg: &TrainConfig,
    init: Option<&FismParams>,
    on_epoch: impl FnMut(&EpochLog, &NaisParams),
) -> Result<TrainOutcome<NaisParams>, TrainError> {
    let params = match (cfg.model, init) {
        (ModelKind::Fism, _) => {
            return Err(TrainError::Config("train_nais called with model fism".into()));
        }
        (_, Some(fism)) => nais_from_fism(cfg, fism, cfg.init_seed())?,
        (_, None) => match init_params(cfg, dataset.num_items, cfg.init_seed()) {
            ModelParams::Nais(p) => p,
            ModelParams::Fism(_) => unreachable!("NAIS configuration"),
        },
    };
    train_from(dataset, cfg, params, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn adagrad_first_step_is_about_lr() {
        let mut theta = [1.0];
        let mut acc = [0.0];
        adagrad_update(&mut theta, &mut acc, &[0.3], 0.01, 1e-8, "x").unwrap();
        assert_abs_diff_eq!(1.0 - theta[0], 0.01 * 0.3 / (0.3 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(acc[0], 0.09, epsilon = 1e-15);
    }

    #[test]
    fn adagrad_zero_gradient_is_a_no_op() {
        let mut theta = [0.5, -0.5];
        let mut acc = [0.2, 0.0];
        adagrad_update(&mut theta, &mut acc, &[0.0, 0.0], 0.01, 1e-8, "x").unwrap();
        assert_eq!(theta, [0.5, -0.5]);
        assert_eq!(acc, [0.2, 0.0]);
    }

    #[test]
    fn adagrad_second_step() {
        let mut theta = [0.0];
        let mut acc = [0.0];
        adagrad_update(&mut theta, &mut acc, &[0.4], 0.01, 1e-8, "x").unwrap();
        let after_first = theta[0];
        adagrad_update(&mut theta, &mut acc, &[0.4], 0.01, 1e-8, "x").unwrap();
        // acc = 0.16 + 0.16 = 0.32
        assert_abs_diff_eq!(
            theta[0] - after_first,
            -0.01 * 0.4 / (0.32f64.sqrt() + 1e-8),
            epsilon = 1e-15
        );
    }

    #[test]
    fn adagrad_rejects_non_finite() {
        let mut theta = [0.0];
        let mut acc = [0.0];
        assert_eq!(
            adagrad_update(&mut theta, &mut acc, &[f64::NAN], 0.01, 1e-8, "W"),
            Err("W")
        );
    }

    #[test]
    fn init_is_seeded_gaussian() {
        let cfg = TrainConfig {
            model: ModelKind::Nais(AttentionVariant::Concat),
            k: 10,
            ..TrainConfig::default()
        };
        let a = init_params(&cfg, 500, 3);
        assert_eq!(a, init_params(&cfg, 500, 3));
        assert_ne!(a, init_params(&cfg, 500, 4));
        let ModelParams::Nais(n) = a else { panic!() };
        assert_eq!(n.net.w.len(), 16 * 20);
        let xs: Vec<f64> = n.p.as_slice().iter().chain(n.q.as_slice()).copied().collect();
        assert_eq!(xs.len(), 10_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        assert!((std - 0.01).abs() < 0.002, "std {std}");
        assert!(mean.abs() < 0.001);
    }

    #[test]
    fn model_kind_parses() {
        assert_eq!("fism".parse::<ModelKind>().unwrap(), ModelKind::Fism);
        assert_eq!(
            "nais-prod".parse::<ModelKind>().unwrap(),
            ModelKind::Nais(AttentionVariant::Prod)
        );
        assert!("mlp".parse::<ModelKind>().is_err());
        assert_eq!(ModelKind::Nais(AttentionVariant::Concat).to_string(), "nais-concat");
    }

    #[test]
    fn config_validation() {
        let bad_beta = TrainConfig {
            beta: 1.5,
            ..TrainConfig::default()
        };
        assert!(bad_beta.validate().is_err());
        let no_negatives = TrainConfig {
            neg_ratio: 0,
            ..TrainConfig::default()
        };
        assert!(no_negatives.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn pretraining_checks_dimensions() {
        let cfg = TrainConfig::default();
        let fism = FismParams {
            p: Embeddings::zeros(4, 8),
            q: Embeddings::zeros(4, 8),
            alpha: 0.0,
        };
        assert!(matches!(nais_from_fism(&cfg, &fism, 1), Err(TrainError::Config(_))));
        let fism16 = FismParams {
            p: Embeddings::zeros(4, 16),
            q: Embeddings::zeros(4, 16),
            alpha: 0.0,
        };
        let nais = nais_from_fism(&cfg, &fism16, 1).unwrap();
        assert_eq!(nais.p, fism16.p);
        assert_eq!(nais.net.w.len(), 16 * 16);
    }

    #[test]
    fn epoch_log_line() {
        let log = EpochLog {
            epoch: 3,
            loss: Some(0.5),
            seconds: 1.25,
            hr: None,
            ndcg: None,
        };
        assert_eq!(log.to_string(), "3\t0.500000\t1.250\t\t");
    }
}
