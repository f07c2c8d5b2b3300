//! Ensemble trainers.
//!
//! Joint methods (LIT, NCL, ACE) update every member on each minibatch from
//! one shared objective. Random restarts and bagging train members one at a
//! time, and AdaBoost trains them in sequence on reweighted data.
//!
//! All randomness is drawn from per-purpose streams (see [`crate::rng`]).
//! Members draw their initial weights and dropout masks from their own
//! streams and every member sees the same minibatch order, so a joint run
//! whose penalty vanishes retraces the independent run exactly.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::{Activation, MlpGrad, MlpParams};
use crate::objectives::{joint_loss_grad, nll, Batch, Objective, PenaltyConfig};
use crate::rng;

mod grid;

pub use grid::{
    lambda_grid, run_key, select, CellSpec, GridSpec, RunRecord, SelectionRow, Summary,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Cap on an AdaBoost member weight when it fits the data perfectly.
pub const ADA_MAX_ALPHA: f64 = 13.815510557964274; // ln(1e6)

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    RRs,
    Bag,
    Ada,
    NCL,
    ACE,
    LIT,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::RRs, Method::Bag, Method::Ada, Method::NCL, Method::ACE, Method::LIT];

    /// Whether the method takes a diversity weight λ.
    pub fn penalized(self) -> bool {
        matches!(self, Method::NCL | Method::ACE | Method::LIT)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::RRs => "RRs",
            Method::Bag => "Bag",
            Method::Ada => "Ada",
            Method::NCL => "NCL",
            Method::ACE => "ACE",
            Method::LIT => "LIT",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected one of RRs, Bag, Ada, NCL, ACE, LIT)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub method: Method,
    pub size: usize,
    /// Diversity weight; required for NCL, ACE and LIT and rejected otherwise.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default = "defaults::l2_penalty")]
    pub l2_penalty: f64,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
    /// LIT only: compare gradients after projecting them onto the data's
    /// tangent frames.
    #[serde(default)]
    pub tangent_penalty: bool,
}

mod defaults {
    use crate::models::Activation;
    pub fn epochs() -> usize {
        200
    }
    pub fn batch_size() -> usize {
        64
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn l2_penalty() -> f64 {
        1e-4
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn activation() -> Activation {
        Activation::Softplus
    }
}

impl EnsembleConfig {
    /// Settings for the low-dimensional synthetic data: 64 softplus units,
    /// no dropout.
    pub fn new(method: Method, size: usize, lambda: Option<f64>, seed: u64) -> Self {
        EnsembleConfig {
            method,
            size,
            lambda,
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            dropout_rate: 0.0,
            l2_penalty: defaults::l2_penalty(),
            hidden: defaults::hidden(),
            activation: defaults::activation(),
            seed,
            tangent_penalty: false,
        }
    }

    /// Settings for tabular benchmarks: 256 ReLU units with dropout 0.5.
    pub fn benchmark(method: Method, size: usize, lambda: Option<f64>, seed: u64) -> Self {
        EnsembleConfig { hidden: 256, activation: Activation::Relu, dropout_rate: 0.5, ..Self::new(method, size, lambda, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.size == 0 {
            return bad("ensemble size must be at least 1".into());
        }
        match (self.method.penalized(), self.lambda) {
            (true, None) => return bad(format!("{} needs a lambda", self.method)),
            (false, Some(_)) => return bad(format!("{} does not take a lambda", self.method)),
            (true, Some(l)) if !(l >= 0.0 && l.is_finite()) => return bad(format!("lambda must be finite and >= 0, got {l}")),
            _ => {}
        }
        if matches!(self.method, Method::NCL | Method::ACE) && self.size < 2 {
            return bad(format!("{} needs at least two members", self.method));
        }
        if self.tangent_penalty && self.method != Method::LIT {
            return bad("tangent_penalty applies to LIT only".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return bad("epochs, batch_size and hidden must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return bad(format!("l2_penalty must be >= 0, got {}", self.l2_penalty));
        }
        Ok(())
    }

    pub fn objective(&self) -> Objective {
        let lambda = self.lambda.unwrap_or(0.0);
        match self.method {
            Method::LIT if self.tangent_penalty => Objective::ManifoldLit(PenaltyConfig::new(lambda)),
            Method::LIT => Objective::Lit(PenaltyConfig::new(lambda)),
            Method::NCL => Objective::Ncl { lambda },
            Method::ACE => Objective::Ace { lambda },
            _ => Objective::Nll,
        }
    }
}

/// Moment estimates for one member's parameters, flattened in the order
/// W1, b1, w2, b2.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState { m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig { lr, beta1: ADAM_BETA1, beta2: ADAM_BETA2, eps: ADAM_EPSILON }
    }
}

/// One bias-corrected Adam update. Non-finite gradients leave the
/// parameters and state untouched and return an error.
pub fn adam_step(params: &mut MlpParams, grad: &MlpGrad, state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if state.m.len() != params.num_params() || state.v.len() != params.num_params() {
        return Err(Error::Shape(format!("optimizer state has {} slots for {} parameters", state.m.len(), params.num_params())));
    }
    if grad.w1.dim() != params.w1.dim() || grad.b1.len() != params.b1.len() || grad.w2.len() != params.w2.len() {
        return Err(Error::Shape("gradient and parameter shapes differ".into()));
    }
    if !grad.is_finite() {
        return Err(Error::Divergence { epoch: 0, detail: format!("non-finite gradient at step {}", state.t + 1) });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let mut k = 0;
    for (p, g) in params.slices_mut().into_iter().zip(grad.slices()) {
        for (p, &g) in p.iter_mut().zip(g) {
            let m = &mut state.m[k];
            let v = &mut state.v[k];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps);
            k += 1;
        }
    }
    Ok(())
}

/// Averages over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Set when members are trained one at a time.
    pub member: Option<usize>,
    pub loss: f64,
    pub data: f64,
    pub penalty: f64,
    pub l2: f64,
    /// Mean member NLL on the validation set at the end of the epoch.
    pub valid_nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedEnsemble {
    pub members: Vec<MlpParams>,
    /// Non-negative, summing to 1.
    pub member_weights: Vec<f64>,
    pub config: EnsembleConfig,
    pub training_log: Vec<EpochLog>,
}

impl TrainedEnsemble {
    /// Weighted mean of member probabilities for each row of `x`.
    pub fn predict_proba(&self, x: ndarray::ArrayView2<f64>) -> Result<Array1<f64>> {
        crate::eval::ensemble_predict(self, x)
    }
}

/// Initial parameters of member `m`.
pub fn init_member(cfg: &EnsembleConfig, input_dim: usize, m: usize) -> Result<MlpParams> {
    let mut r = rng::substream(cfg.seed, rng::INIT_BASE + m as u64);
    MlpParams::init_with_rng(input_dim, cfg.hidden, cfg.activation, &mut r)
}

/// Bootstrap sample (size n, with replacement) for bagged member `m`.
pub fn bootstrap_indices(seed: u64, m: usize, n: usize) -> Vec<usize> {
    let mut r = rng::substream(seed, rng::BOOTSTRAP_BASE + m as u64);
    (0..n).map(|_| r.gen_range(0..n)).collect()
}

fn check_inputs(cfg: &EnsembleConfig, train: &Dataset, valid: &Dataset) -> Result<()> {
    cfg.validate()?;
    train.validate()?;
    valid.validate()?;
    if train.dim() != valid.dim() {
        return Err(Error::Shape(format!("train has {} features, valid {}", train.dim(), valid.dim())));
    }
    if cfg.tangent_penalty && train.tangents.is_none() {
        return Err(Error::Config("tangent_penalty needs a dataset with tangent frames".into()));
    }
    Ok(())
}

fn dropout_mask<R: Rng>(r: &mut R, rows: usize, hidden: usize, rate: f64) -> Array2<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array2::from_shape_simple_fn((rows, hidden), || if r.gen::<f64>() < keep { scale } else { 0.0 })
}

fn mean_nll(m: &MlpParams, d: &Dataset) -> Result<f64> {
    let f = m.forward_batch(d.x.view())?;
    Ok(f.iter().zip(&d.y).map(|(&f, &y)| nll(f, y)).sum::<f64>() / d.len() as f64)
}

/// Minibatch training of `members` on one shared objective.
///
/// `ids[k]` names the dropout stream of `members[k]`. `rows` lists the
/// training rows (repeats allowed) and `weights`, if given, multiplies each
/// row's likelihood term.
#[allow(clippy::too_many_arguments)]
fn fit(
    cfg: &EnsembleConfig,
    members: &mut [MlpParams],
    ids: &[usize],
    train: &Dataset,
    rows: &[usize],
    weights: Option<&Array1<f64>>,
    valid: &Dataset,
    log_member: Option<usize>,
    log: &mut Vec<EpochLog>,
) -> Result<()> {
    let objective = cfg.objective();
    let adam = AdamConfig::new(cfg.learning_rate);
    let mut states: Vec<AdamState> = members.iter().map(|m| AdamState::new(m.num_params())).collect();
    let mut order_rng = rng::substream(cfg.seed, rng::BATCH_ORDER);
    let mut drop_rngs: Vec<_> = ids.iter().map(|&i| rng::substream(cfg.seed, rng::DROPOUT_BASE + i as u64)).collect();
    let mut order = rows.to_vec();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut data_sum, mut pen_sum, mut l2_sum) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0;
        for idx in order.chunks(cfg.batch_size) {
            let xb = train.x.select(Axis(0), idx);
            let yb = train.y.select(Axis(0), idx);
            let wb = weights.map(|w| w.select(Axis(0), idx));
            let tb = if cfg.tangent_penalty { train.tangents.as_ref().map(|t| t.select(Axis(0), idx)) } else { None };
            let mut batch = Batch::new(xb.view(), yb.view());
            batch.weights = wb.as_ref().map(|w| w.view());
            batch.tangents = tb.as_ref().map(|t| t.view());

            let caches: Vec<_> = members
                .iter()
                .zip(drop_rngs.iter_mut())
                .map(|(m, r)| {
                    let mask = (cfg.dropout_rate > 0.0).then(|| dropout_mask(r, idx.len(), cfg.hidden, cfg.dropout_rate));
                    m.forward_cache(xb.view(), mask.as_ref())
                })
                .collect();
            let (loss, mut grads) = joint_loss_grad(members, &caches, &batch, &objective)?;
            let mut l2 = 0.0;
            if cfg.l2_penalty > 0.0 {
                for (m, g) in members.iter().zip(grads.iter_mut()) {
                    l2 += cfg.l2_penalty * m.weight_sq_norm();
                    g.w1.scaled_add(2.0 * cfg.l2_penalty, &m.w1);
                    g.w2.scaled_add(2.0 * cfg.l2_penalty, &m.w2);
                }
            }
            let total = loss.total() + l2;
            if !total.is_finite() {
                return Err(Error::Divergence { epoch, detail: format!("loss became {total}") });
            }
            for ((m, g), s) in members.iter_mut().zip(&grads).zip(states.iter_mut()) {
                adam_step(m, g, s, &adam).map_err(|e| match e {
                    Error::Divergence { detail, .. } => Error::Divergence { epoch, detail },
                    other => other,
                })?;
            }
            loss_sum += total;
            data_sum += loss.data;
            pen_sum += loss.penalty;
            l2_sum += l2;
            batches += 1;
        }
        let b = batches as f64;
        let valid_nll = members.iter().map(|m| mean_nll(m, valid)).sum::<Result<f64>>()? / members.len() as f64;
        log.push(EpochLog {
            epoch,
            member: log_member,
            loss: loss_sum / b,
            data: data_sum / b,
            penalty: pen_sum / b,
            l2: l2_sum / b,
            valid_nll,
        });
    }
    Ok(())
}

/// Train LIT, NCL or ACE: all members from their own initial weights,
/// updated together on each minibatch.
pub fn train_joint(cfg: &EnsembleConfig, train: &Dataset, valid: &Dataset) -> Result<TrainedEnsemble> {
    check_inputs(cfg, train, valid)?;
    if !cfg.method.penalized() {
        return Err(Error::Config(format!("{} is not a jointly trained method", cfg.method)));
    }
    let mut members = (0..cfg.size).map(|m| init_member(cfg, train.dim(), m)).collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = (0..cfg.size).collect();
    let rows: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    fit(cfg, &mut members, &ids, train, &rows, None, valid, None, &mut log)?;
    Ok(TrainedEnsemble { member_weights: vec![1.0 / cfg.size as f64; cfg.size], members, config: cfg.clone(), training_log: log })
}

/// Train random restarts (every member on the full training set) or a
/// bagged ensemble (each member on its own bootstrap sample).
pub fn train_independent(cfg: &EnsembleConfig, train: &Dataset, valid: &Dataset) -> Result<TrainedEnsemble> {
    match cfg.method {
        Method::RRs => {
            let all: Vec<usize> = (0..train.len()).collect();
            train_independent_with(cfg, train, valid, |_| all.clone())
        }
        Method::Bag => train_independent_with(cfg, train, valid, |m| bootstrap_indices(cfg.seed, m, train.len())),
        other => Err(Error::Config(format!("{other} is not an independently trained method"))),
    }
}

/// [`train_independent`] with the training rows of each member supplied by
/// `rows_for(m)`.
pub fn train_independent_with(
    cfg: &EnsembleConfig,
    train: &Dataset,
    valid: &Dataset,
    rows_for: impl Fn(usize) -> Vec<usize>,
) -> Result<TrainedEnsemble> {
    check_inputs(cfg, train, valid)?;
    let mut members = Vec::with_capacity(cfg.size);
    let mut log = Vec::new();
    for m in 0..cfg.size {
        let mut member = [init_member(cfg, train.dim(), m)?];
        let rows = rows_for(m);
        if rows.is_empty() || rows.iter().any(|&r| r >= train.len()) {
            return Err(Error::Data(format!("member {m} got an invalid row set")));
        }
        fit(cfg, &mut member, &[m], train, &rows, None, valid, Some(m), &mut log)?;
        let [member] = member;
        members.push(member);
    }
    Ok(TrainedEnsemble { member_weights: vec![1.0 / cfg.size as f64; cfg.size], members, config: cfg.clone(), training_log: log })
}

/// Member weight for a round with weighted error `err`. Returns `None` for
/// a perfect round, which gets [`ADA_MAX_ALPHA`] and ends boosting.
pub fn ada_alpha(err: f64) -> Option<f64> {
    if err <= 0.0 {
        None
    } else if err >= 0.5 {
        Some(0.0)
    } else {
        Some(((1.0 - err) / err).ln())
    }
}

/// Per-round diagnostics from [`train_adaboost`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaRound {
    pub error: f64,
    pub alpha: f64,
    /// Example weights after the round (sum 1).
    pub weights: Vec<f64>,
}

/// Two-class AdaBoost with network members. Example weights enter each
/// member's loss as per-row multipliers (rescaled to mean 1).
pub fn train_adaboost(cfg: &EnsembleConfig, train: &Dataset, valid: &Dataset) -> Result<TrainedEnsemble> {
    Ok(train_adaboost_rounds(cfg, train, valid)?.0)
}

pub fn train_adaboost_rounds(cfg: &EnsembleConfig, train: &Dataset, valid: &Dataset) -> Result<(TrainedEnsemble, Vec<AdaRound>)> {
    check_inputs(cfg, train, valid)?;
    if cfg.method != Method::Ada {
        return Err(Error::Config(format!("{} is not AdaBoost", cfg.method)));
    }
    let n = train.len();
    let uniform = 1.0 / n as f64;
    let mut w = Array1::from_elem(n, uniform);
    let rows: Vec<usize> = (0..n).collect();
    let mut members = Vec::new();
    let mut alphas = Vec::new();
    let mut rounds = Vec::new();
    let mut log = Vec::new();
    for m in 0..cfg.size {
        let mut member = [init_member(cfg, train.dim(), m)?];
        let loss_w = &w * n as f64;
        fit(cfg, &mut member, &[m], train, &rows, Some(&loss_w), valid, Some(m), &mut log)?;
        let [member] = member;
        let p = member.predict_proba_batch(train.x.view())?;
        let wrong: Vec<bool> = p.iter().zip(&train.y).map(|(&p, &y)| (p >= 0.5) != (y == 1.0)).collect();
        let err: f64 = w.iter().zip(&wrong).filter(|(_, &bad)| bad).map(|(w, _)| w).sum();
        members.push(member);
        match ada_alpha(err) {
            None => {
                alphas.push(ADA_MAX_ALPHA);
                rounds.push(AdaRound { error: err, alpha: ADA_MAX_ALPHA, weights: w.to_vec() });
                log::info!("AdaBoost round {m} fit the training data; stopping early");
                break;
            }
            Some(a) if a == 0.0 => {
                alphas.push(0.0);
                w.fill(uniform);
            }
            Some(a) => {
                alphas.push(a);
                for (wi, &bad) in w.iter_mut().zip(&wrong) {
                    if bad {
                        *wi *= a.exp();
                    }
                }
                let s = w.sum();
                w /= s;
            }
        }
        rounds.push(AdaRound { error: err, alpha: *alphas.last().unwrap(), weights: w.to_vec() });
    }
    let total: f64 = alphas.iter().sum();
    let member_weights = if total > 0.0 {
        alphas.iter().map(|a| a / total).collect()
    } else {
        vec![1.0 / members.len() as f64; members.len()]
    };
    Ok((TrainedEnsemble { members, member_weights, config: cfg.clone(), training_log: log }, rounds))
}

/// Train with whichever procedure `cfg.method` calls for.
pub fn train(cfg: &EnsembleConfig, train: &Dataset, valid: &Dataset) -> Result<TrainedEnsemble> {
    match cfg.method {
        Method::RRs | Method::Bag => train_independent(cfg, train, valid),
        Method::Ada => train_adaboost(cfg, train, valid),
        Method::NCL | Method::ACE | Method::LIT => train_joint(cfg, train, valid),
    }
}

#[cfg(test)]
mod tests;
