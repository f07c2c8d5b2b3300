//! Per-model likelihood terms and the ensemble diversity penalties.
//!
//! Every objective exists in two forms: a graph ([`Expr`]) over all members'
//! parameters, which the differentiation engine can check, and a closed-form
//! batched gradient ([`joint_loss_grad`]) used by the trainers.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::diffcore::{self as dc, Bindings, Expr, Shape, Tensor, Variable};
use crate::error::{Error, Result};
use crate::models::{ForwardCache, MlpGrad, MlpParams};

/// Added to the cosine denominator so vanishing gradients give a finite 0.
pub const DEFAULT_DENOM_EPSILON: f64 = 1e-8;

/// Probability clamp used by the amended cross-entropy penalty.
pub const ACE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda: f64,
    pub denom_epsilon: f64,
}

impl PenaltyConfig {
    pub fn new(lambda: f64) -> Self {
        PenaltyConfig { lambda, denom_epsilon: DEFAULT_DENOM_EPSILON }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("penalty strength must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.denom_epsilon > 0.0) {
            return Err(Error::Config(format!("denominator epsilon must be > 0, got {}", self.denom_epsilon)));
        }
        Ok(())
    }
}

/// Binary cross-entropy with logits: softplus(f) − y f.
pub fn nll(logit: f64, y: f64) -> f64 {
    // softplus(z) − yz = softplus(−z) + (1 − y)z; pick the form without cancellation.
    if logit > 0.0 {
        dc::softplus(-logit) + (1.0 - y) * logit
    } else {
        dc::softplus(logit) - y * logit
    }
}

/// (g1·g2)² / (‖g1‖‖g2‖ + ε)².
pub fn cos_sq(g1: &[f64], g2: &[f64], denom_epsilon: f64) -> f64 {
    assert_eq!(g1.len(), g2.len(), "gradient lengths differ");
    let d: f64 = g1.iter().zip(g2).map(|(a, b)| a * b).sum();
    let n1 = g1.iter().map(|a| a * a).sum::<f64>().sqrt();
    let n2 = g2.iter().map(|a| a * a).sum::<f64>().sqrt();
    let den = n1 * n2 + denom_epsilon;
    (d * d) / (den * den)
}

/// Value of [`cos_sq`] and its gradient with respect to `g1`.
fn cos_sq_and_grad(g1: ArrayView1<f64>, g2: ArrayView1<f64>, eps: f64) -> (f64, Array1<f64>) {
    let d = g1.dot(&g2);
    let n1 = g1.dot(&g1).sqrt();
    let n2 = g2.dot(&g2).sqrt();
    let den = n1 * n2 + eps;
    let c = d * d / (den * den);
    let mut grad = &g2 * (2.0 * d / (den * den));
    if n1 > 0.0 {
        grad.scaled_add(-2.0 * d * d / (den * den * den) * n2 / n1, &g1);
    }
    (c, grad)
}

/// Squared cosine between gradients projected onto a tangent basis: the
/// cosine of `g1ᵀJ` and `g2ᵀJ`, with `J` of shape D × K.
pub fn manif_cos_sq(g1: &[f64], g2: &[f64], tangents: ArrayView2<f64>, denom_epsilon: f64) -> Result<f64> {
    let d = tangents.nrows();
    if g1.len() != d || g2.len() != d {
        return Err(Error::Shape(format!(
            "gradients of length {}/{} against a {}x{} tangent basis",
            g1.len(),
            g2.len(),
            d,
            tangents.ncols()
        )));
    }
    let p1 = tangents.t().dot(&ArrayView1::from(g1));
    let p2 = tangents.t().dot(&ArrayView1::from(g2));
    Ok(cos_sq(p1.as_slice().unwrap(), p2.as_slice().unwrap(), denom_epsilon))
}

/// A minibatch. Labels are 0.0 / 1.0.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView1<'a, f64>,
    /// Per-example multipliers on the likelihood term (AdaBoost).
    pub weights: Option<ArrayView1<'a, f64>>,
    /// Per-example tangent bases, n × D × K, for the manifold penalty.
    pub tangents: Option<ArrayView3<'a, f64>>,
}

impl<'a> Batch<'a> {
    pub fn new(x: ArrayView2<'a, f64>, y: ArrayView1<'a, f64>) -> Self {
        Batch { x, y, weights: None, tangents: None }
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if self.y.len() != self.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", self.len(), self.y.len())));
        }
        if let Some(w) = self.weights {
            if w.len() != self.len() {
                return Err(Error::Shape(format!("{} rows but {} weights", self.len(), w.len())));
            }
        }
        if let Some(t) = self.tangents {
            if t.shape()[0] != self.len() || t.shape()[1] != self.x.ncols() {
                return Err(Error::Shape(format!("tangent array {:?} for a {:?} batch", t.shape(), self.x.dim())));
            }
        }
        Ok(())
    }
}

/// What the members of an ensemble jointly minimize (before weight decay).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Σ_m mean NLL; members decouple.
    Nll,
    /// NLL plus λ Σ_{ℓ≠m} mean cos²(∇f_m, ∇f_ℓ).
    Lit(PenaltyConfig),
    /// As `Lit`, with gradients projected onto the batch tangents.
    ManifoldLit(PenaltyConfig),
    /// Squared error on probabilities plus the negative-correlation penalty.
    Ncl { lambda: f64 },
    /// NLL minus λ/(M−1) times the mean pairwise cross-entropy.
    Ace { lambda: f64 },
}

impl Objective {
    pub fn lambda(&self) -> f64 {
        match *self {
            Objective::Nll => 0.0,
            Objective::Lit(c) | Objective::ManifoldLit(c) => c.lambda,
            Objective::Ncl { lambda } | Objective::Ace { lambda } => lambda,
        }
    }

    fn min_members(&self) -> usize {
        match self {
            Objective::Ncl { .. } | Objective::Ace { .. } => 2,
            _ => 1,
        }
    }
}

/// Objective value split into the likelihood part and the diversity part.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    /// Σ over members of each member's mean data loss.
    pub data: f64,
    /// λ-weighted diversity term.
    pub penalty: f64,
    pub member_data: Vec<f64>,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.data + self.penalty
    }
}

/// Objective value and per-member parameter gradients, from forward caches
/// computed on `batch.x` (see [`MlpParams::forward_cache`]).
pub fn joint_loss_grad(
    models: &[MlpParams],
    caches: &[ForwardCache],
    batch: &Batch,
    objective: &Objective,
) -> Result<(LossBreakdown, Vec<MlpGrad>)> {
    batch.check()?;
    let m_count = models.len();
    if m_count < objective.min_members() {
        return Err(Error::Config(format!("objective needs at least {} members", objective.min_members())));
    }
    assert_eq!(caches.len(), m_count);
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let y = batch.y;

    let mut d_logits: Vec<Array1<f64>> = Vec::with_capacity(m_count);
    let mut d_grads: Vec<Option<Array2<f64>>> = vec![None; m_count];
    let mut out = LossBreakdown { member_data: vec![0.0; m_count], ..Default::default() };

    // likelihood terms
    for (m, cache) in caches.iter().enumerate() {
        let mut dl = Array1::zeros(n);
        let mut loss = 0.0;
        for i in 0..n {
            let f = cache.logits[i];
            let w = batch.weights.map_or(1.0, |w| w[i]);
            match objective {
                Objective::Ncl { .. } => {
                    let p = dc::sigmoid(f);
                    loss += (p - y[i]).powi(2);
                    dl[i] = 2.0 * (p - y[i]) * p * (1.0 - p) * inv_n;
                }
                _ => {
                    loss += w * nll(f, y[i]);
                    dl[i] = w * (dc::sigmoid(f) - y[i]) * inv_n;
                }
            }
        }
        out.member_data[m] = loss * inv_n;
        d_logits.push(dl);
    }
    out.data = out.member_data.iter().sum();

    match *objective {
        Objective::Nll => {}
        Objective::Lit(cfg) | Objective::ManifoldLit(cfg) => {
            cfg.validate()?;
            if cfg.lambda > 0.0 && m_count > 1 {
                let projected = matches!(objective, Objective::ManifoldLit(_));
                let tangents = if projected {
                    Some(batch.tangents.ok_or_else(|| Error::Data("manifold penalty needs tangents".into()))?)
                } else {
                    None
                };
                let proj: Vec<Array2<f64>> = caches
                    .iter()
                    .map(|c| match tangents {
                        Some(t) => project_rows(c.input_grads.view(), t),
                        None => c.input_grads.clone(),
                    })
                    .collect();
                let mut dp: Vec<Array2<f64>> = proj.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
                let mut pen = 0.0;
                let scale = cfg.lambda * inv_n;
                for i in 0..n {
                    for a in 0..m_count {
                        for b in (a + 1)..m_count {
                            let ga = proj[a].row(i);
                            let gb = proj[b].row(i);
                            let (c, da) = cos_sq_and_grad(ga, gb, cfg.denom_epsilon);
                            let (_, db) = cos_sq_and_grad(gb, ga, cfg.denom_epsilon);
                            // ordered pairs: (a,b) and (b,a) both count
                            pen += 2.0 * c;
                            dp[a].row_mut(i).scaled_add(2.0 * scale, &da);
                            dp[b].row_mut(i).scaled_add(2.0 * scale, &db);
                        }
                    }
                }
                out.penalty = pen * scale;
                for (m, d) in dp.into_iter().enumerate() {
                    d_grads[m] = Some(match tangents {
                        Some(t) => unproject_rows(d.view(), t),
                        None => d,
                    });
                }
            }
        }
        Objective::Ncl { lambda } => {
            let probs: Vec<Array1<f64>> = caches.iter().map(|c| c.logits.mapv(dc::sigmoid)).collect();
            let mut pen = 0.0;
            for i in 0..n {
                let mean = probs.iter().map(|p| p[i]).sum::<f64>() / m_count as f64;
                for (m, p) in probs.iter().enumerate() {
                    let dev = p[i] - mean;
                    // (p_m − p̄) Σ_{ℓ≠m}(p_ℓ − p̄) = −(p_m − p̄)²
                    pen -= dev * dev;
                    d_logits[m][i] += -2.0 * lambda * inv_n * dev * p[i] * (1.0 - p[i]);
                }
            }
            out.penalty = lambda * pen * inv_n;
        }
        Objective::Ace { lambda } => {
            let probs: Vec<Array1<f64>> = caches.iter().map(|c| c.logits.mapv(dc::sigmoid)).collect();
            let k = lambda / (m_count - 1) as f64 * inv_n;
            let (lo, hi) = (ACE_CLAMP, 1.0 - ACE_CLAMP);
            let mut ce_sum = 0.0;
            for i in 0..n {
                for t in 0..m_count {
                    for m in 0..m_count {
                        if t == m {
                            continue;
                        }
                        let (pt, pm) = (probs[t][i], probs[m][i]);
                        let (ct, cm) = (pt.clamp(lo, hi), pm.clamp(lo, hi));
                        ce_sum += -(ct * cm.ln() + (1.0 - ct) * (1.0 - cm).ln());
                        // objective carries −k·CE
                        if pt > lo && pt < hi {
                            let d_ct = -(cm.ln() - (1.0 - cm).ln());
                            d_logits[t][i] += -k * d_ct * pt * (1.0 - pt);
                        }
                        if pm > lo && pm < hi {
                            let d_cm = -(ct / cm - (1.0 - ct) / (1.0 - cm));
                            d_logits[m][i] += -k * d_cm * pm * (1.0 - pm);
                        }
                    }
                }
            }
            out.penalty = -k * ce_sum;
        }
    }

    let grads = models
        .iter()
        .zip(caches)
        .zip(d_logits.iter().zip(&d_grads))
        .map(|((model, cache), (dl, dg))| {
            let mut g = MlpGrad::zeros_like(model);
            model.backward(batch.x, cache, dl.view(), dg.as_ref().map(|d| d.view()), &mut g);
            g
        })
        .collect();
    Ok((out, grads))
}

/// Rows gᵢ ↦ Jᵢᵀ gᵢ.
fn project_rows(g: ArrayView2<f64>, t: ArrayView3<f64>) -> Array2<f64> {
    let k = t.shape()[2];
    let mut out = Array2::zeros((g.nrows(), k));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&t.index_axis(Axis(0), i).t().dot(&g.row(i)));
    }
    out
}

/// Rows pᵢ ↦ Jᵢ pᵢ (adjoint of [`project_rows`]).
fn unproject_rows(p: ArrayView2<f64>, t: ArrayView3<f64>) -> Array2<f64> {
    let d = t.shape()[1];
    let mut out = Array2::zeros((p.nrows(), d));
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&t.index_axis(Axis(0), i).dot(&p.row(i)));
    }
    out
}

// --- graph-built objectives ---------------------------------------------

fn prefix(m: usize) -> String {
    format!("m{m}")
}

/// Parameter variables of every member, prefixed `m0.`, `m1.`, ...
pub fn ensemble_variables(models: &[MlpParams]) -> Vec<Variable> {
    models.iter().enumerate().flat_map(|(m, p)| p.variables(&prefix(m))).collect()
}

pub fn ensemble_bindings(models: &[MlpParams]) -> Bindings {
    let mut b = Bindings::new();
    for (m, p) in models.iter().enumerate() {
        p.bind(&prefix(m), &mut b);
    }
    b
}

struct PointGraphs {
    /// logits[i][m]
    logits: Vec<Vec<Expr>>,
    /// input gradients, same indexing
    grads: Vec<Vec<Expr>>,
}

fn point_graphs(models: &[MlpParams], x: ArrayView2<f64>, with_grads: bool) -> Result<PointGraphs> {
    let d = x.ncols();
    let xv = Variable::input("x", Shape::Vector(d));
    let mut generic = Vec::with_capacity(models.len());
    for (m, p) in models.iter().enumerate() {
        if p.input_dim() != d {
            return Err(Error::Shape(format!("member {m} expects {} inputs, batch has {d}", p.input_dim())));
        }
        let logit = p.logit_expr(&prefix(m), &xv.expr())?;
        let grad = if with_grads { Some(dc::differentiate(&logit, std::slice::from_ref(&xv))?.remove(0)) } else { None };
        generic.push((logit, grad));
    }
    let mut out = PointGraphs { logits: Vec::new(), grads: Vec::new() };
    for row in x.rows() {
        let mut with = HashMap::new();
        with.insert("x".to_owned(), dc::constant(Tensor::vector(row.to_vec())));
        let mut ls = Vec::new();
        let mut gs = Vec::new();
        for (logit, grad) in &generic {
            ls.push(dc::substitute(logit, &with)?);
            if let Some(g) = grad {
                gs.push(dc::substitute(g, &with)?);
            }
        }
        out.logits.push(ls);
        out.grads.push(gs);
    }
    Ok(out)
}

fn nll_expr(logit: &Expr, y: f64) -> Result<Expr> {
    Ok(dc::sub(&dc::softplus_expr(logit), &dc::scale_by(y, logit))?)
}

fn cos_sq_expr(g1: &Expr, g2: &Expr, eps: f64) -> Result<Expr> {
    let d = dc::dot(g1, g2)?;
    let norms = dc::sqrt(&dc::mul(&dc::sq_norm(g1), &dc::sq_norm(g2))?);
    let den = dc::add_const(&norms, eps);
    Ok(dc::div(&dc::mul(&d, &d)?, &dc::mul(&den, &den)?)?)
}

fn mean_of(terms: &[Expr]) -> Result<Expr> {
    Ok(dc::scale_by(1.0 / terms.len() as f64, &dc::sum_all(terms)?))
}

fn nll_terms(g: &PointGraphs, batch: &Batch, m_count: usize) -> Result<Vec<Expr>> {
    (0..m_count)
        .map(|m| {
            let per_point = (0..batch.len())
                .map(|i| {
                    let e = nll_expr(&g.logits[i][m], batch.y[i])?;
                    Ok(match batch.weights {
                        Some(w) => dc::scale_by(w[i], &e),
                        None => e,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            mean_of(&per_point)
        })
        .collect()
}

/// Σ_m mean NLL + λ Σ_{ℓ≠m} mean cos²(∇f_m, ∇f_ℓ) as a graph over every
/// member's parameters (`m0.W1`, ...). At λ = 0 the penalty is omitted.
pub fn lit_objective(models: &[MlpParams], batch: &Batch, cfg: &PenaltyConfig) -> Result<Expr> {
    penalized_graph(models, batch, cfg, None)
}

/// As [`lit_objective`] with gradients projected onto `batch.tangents`.
pub fn manif_lit_objective(models: &[MlpParams], batch: &Batch, cfg: &PenaltyConfig) -> Result<Expr> {
    let t = batch.tangents.ok_or_else(|| Error::Data("manifold penalty needs tangents".into()))?;
    penalized_graph(models, batch, cfg, Some(t))
}

fn penalized_graph(models: &[MlpParams], batch: &Batch, cfg: &PenaltyConfig, tangents: Option<ArrayView3<f64>>) -> Result<Expr> {
    batch.check()?;
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::Empty("ensemble"));
    }
    let penalize = cfg.lambda > 0.0 && models.len() > 1;
    let g = point_graphs(models, batch.x, penalize)?;
    let mut terms = nll_terms(&g, batch, models.len())?;
    if penalize {
        let mut pair_terms = Vec::new();
        for i in 0..batch.len() {
            let grads: Vec<Expr> = match tangents {
                Some(t) => {
                    let j = t.index_axis(Axis(0), i);
                    let (d, k) = j.dim();
                    let jc = dc::constant(Tensor::matrix(d, k, j.iter().copied().collect()));
                    g.grads[i].iter().map(|gi| dc::mat_t_vec(&jc, gi)).collect::<Result<_, _>>()?
                }
                None => g.grads[i].clone(),
            };
            for a in 0..models.len() {
                for b in 0..models.len() {
                    if a != b {
                        pair_terms.push(cos_sq_expr(&grads[a], &grads[b], cfg.denom_epsilon)?);
                    }
                }
            }
        }
        let per_point = dc::scale_by(1.0 / batch.len() as f64, &dc::sum_all(&pair_terms)?);
        terms.push(dc::scale_by(cfg.lambda, &per_point));
    }
    Ok(dc::sum_all(&terms)?)
}

/// Σ_m mean (p_m − y)² + λ mean_x Σ_m (p_m − p̄) Σ_{ℓ≠m} (p_ℓ − p̄).
pub fn ncl_objective(models: &[MlpParams], batch: &Batch, lambda: f64) -> Result<Expr> {
    batch.check()?;
    if models.len() < 2 {
        return Err(Error::Config("negative correlation learning needs at least 2 members".into()));
    }
    let g = point_graphs(models, batch.x, false)?;
    let m_count = models.len();
    let probs: Vec<Vec<Expr>> = g.logits.iter().map(|ls| ls.iter().map(dc::sigmoid_expr).collect()).collect();
    let mut terms = Vec::new();
    for m in 0..m_count {
        let sq = (0..batch.len())
            .map(|i| {
                let r = dc::add_const(&probs[i][m], -batch.y[i]);
                dc::mul(&r, &r)
            })
            .collect::<Result<Vec<_>, _>>()?;
        terms.push(mean_of(&sq)?);
    }
    if lambda != 0.0 {
        let mut per_point = Vec::new();
        for p in &probs {
            let mean = dc::scale_by(1.0 / m_count as f64, &dc::sum_all(p)?);
            let devs: Vec<Expr> = p.iter().map(|pm| dc::sub(pm, &mean)).collect::<Result<_, _>>()?;
            for m in 0..m_count {
                let others: Vec<Expr> = (0..m_count).filter(|&l| l != m).map(|l| devs[l].clone()).collect();
                per_point.push(dc::mul(&devs[m], &dc::sum_all(&others)?)?);
            }
        }
        let pen = dc::scale_by(1.0 / batch.len() as f64, &dc::sum_all(&per_point)?);
        terms.push(dc::scale_by(lambda, &pen));
    }
    Ok(dc::sum_all(&terms)?)
}

/// −[p ln q + (1−p) ln(1−q)] on already-clamped probabilities.
fn cross_entropy_expr(p: &Expr, q: &Expr) -> Result<Expr> {
    let a = dc::mul(p, &dc::log(q))?;
    let one_minus = |e: &Expr| dc::add_const(&dc::neg(e), 1.0);
    let b = dc::mul(&one_minus(p), &dc::log(&one_minus(q)))?;
    Ok(dc::neg(&dc::add(&a, &b)?))
}

/// Σ_m mean NLL − λ/(M−1) Σ_{ℓ≠m} mean H(p_ℓ, p_m) with probabilities
/// clamped to [1e−7, 1 − 1e−7].
pub fn ace_objective(models: &[MlpParams], batch: &Batch, lambda: f64) -> Result<Expr> {
    batch.check()?;
    if models.len() < 2 {
        return Err(Error::Config("amended cross-entropy needs at least 2 members".into()));
    }
    let g = point_graphs(models, batch.x, false)?;
    let m_count = models.len();
    let mut terms = nll_terms(&g, batch, m_count)?;
    if lambda != 0.0 {
        let mut ce = Vec::new();
        for ls in &g.logits {
            let probs: Vec<Expr> = ls.iter().map(|l| dc::clamp(&dc::sigmoid_expr(l), ACE_CLAMP, 1.0 - ACE_CLAMP)).collect();
            for t in 0..m_count {
                for m in 0..m_count {
                    if t != m {
                        ce.push(cross_entropy_expr(&probs[t], &probs[m])?);
                    }
                }
            }
        }
        let mean_ce = dc::scale_by(1.0 / batch.len() as f64, &dc::sum_all(&ce)?);
        terms.push(dc::scale_by(-lambda / (m_count - 1) as f64, &mean_ce));
    }
    Ok(dc::sum_all(&terms)?)
}

/// Graph form of any [`Objective`].
pub fn objective_expr(models: &[MlpParams], batch: &Batch, objective: &Objective) -> Result<Expr> {
    match *objective {
        Objective::Nll => lit_objective(models, batch, &PenaltyConfig::new(0.0)),
        Objective::Lit(c) => lit_objective(models, batch, &c),
        Objective::ManifoldLit(c) => manif_lit_objective(models, batch, &c),
        Objective::Ncl { lambda } => ncl_objective(models, batch, lambda),
        Objective::Ace { lambda } => ace_objective(models, batch, lambda),
    }
}

#[cfg(test)]
mod tests;
