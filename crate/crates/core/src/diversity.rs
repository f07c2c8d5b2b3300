//! Diversity and local-independence metrics for trained members.
//!
//! Gradient-based measures (`cos_indep_err`, the ε-ball oracle, the
//! perturbation estimator) look at how members respond to input changes;
//! the prediction-based ones (ρ, Q, κ) look only at which examples each
//! member gets wrong.

use ndarray::{Array1, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::MlpParams;
use crate::objectives::{cos_sq, manif_cos_sq, DEFAULT_DENOM_EPSILON};
use crate::rng;

/// A mean over unordered member pairs. `value` is `None` when no pair had a
/// defined value, which is not the same thing as zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAverage {
    pub value: Option<f64>,
    pub pairs: usize,
    pub excluded: usize,
    pub reason: Option<String>,
}

impl PairAverage {
    fn from_values(values: Vec<Option<f64>>, why: &str) -> Self {
        let pairs = values.len();
        let defined: Vec<f64> = values.into_iter().flatten().collect();
        let excluded = pairs - defined.len();
        if pairs == 0 {
            return PairAverage { value: None, pairs, excluded, reason: Some("fewer than two members".into()) };
        }
        if defined.is_empty() {
            return PairAverage { value: None, pairs, excluded, reason: Some(why.into()) };
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        PairAverage { value: Some(mean), pairs, excluded, reason: None }
    }
}

fn unordered_pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |a| (a + 1..m).map(move |b| (a, b)))
}

/// Mean over rows of `x` of cos²(∇f, ∇g).
pub fn cos_indep_err(f: &MlpParams, g: &MlpParams, x: ArrayView2<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::Empty("evaluation points"));
    }
    let gf = f.input_gradient_batch(x)?;
    let gg = g.input_gradient_batch(x)?;
    let total: f64 = gf
        .outer_iter()
        .zip(gg.outer_iter())
        .map(|(a, b)| cos_sq(a.as_slice().unwrap(), b.as_slice().unwrap(), DEFAULT_DENOM_EPSILON))
        .sum();
    Ok(total / x.nrows() as f64)
}

/// As [`cos_indep_err`] but with gradients projected onto the tangent space
/// `tangents[i]` (D×K) at each point.
pub fn manif_cos_indep_err(f: &MlpParams, g: &MlpParams, x: ArrayView2<f64>, tangents: ArrayView3<f64>) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::Empty("evaluation points"));
    }
    if tangents.len_of(Axis(0)) != x.nrows() {
        return Err(Error::Shape(format!("{} tangent frames for {} points", tangents.len_of(Axis(0)), x.nrows())));
    }
    let gf = f.input_gradient_batch(x)?;
    let gg = g.input_gradient_batch(x)?;
    let mut total = 0.0;
    for i in 0..x.nrows() {
        total += manif_cos_sq(
            gf.row(i).as_slice().unwrap(),
            gg.row(i).as_slice().unwrap(),
            tangents.index_axis(Axis(0), i),
            DEFAULT_DENOM_EPSILON,
        )?;
    }
    Ok(total / x.nrows() as f64)
}

/// The ensemble-level ∇cos²: [`cos_indep_err`] averaged over unordered pairs.
pub fn ensemble_cos2(members: &[MlpParams], x: ArrayView2<f64>, tangents: Option<ArrayView3<f64>>) -> Result<PairAverage> {
    let values = unordered_pairs(members.len())
        .map(|(a, b)| {
            Ok(Some(match tangents {
                Some(t) => manif_cos_indep_err(&members[a], &members[b], x, t)?,
                None => cos_indep_err(&members[a], &members[b], x)?,
            }))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PairAverage::from_values(values, "no pairs"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndepOracleConfig {
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl IndepOracleConfig {
    /// 20 steps of size ε/10.
    pub fn new(epsilon: f64) -> Self {
        IndepOracleConfig { epsilon, steps: 20, step_size: epsilon / 10.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("oracle epsilon must be positive, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::Config("oracle needs at least one step".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!("oracle step size must be positive, got {}", self.step_size)));
        }
        Ok(())
    }
}

/// Approximate argmax of `g` over the ball of radius ε around `x` by
/// projected ascent with normalized gradient steps.
pub fn gmax_point(g: &MlpParams, x: ArrayView1<f64>, cfg: &IndepOracleConfig) -> Result<Array1<f64>> {
    cfg.validate()?;
    let mut cur = x.to_owned();
    for _ in 0..cfg.steps {
        let grad = g.input_gradient(cur.view())?;
        let norm = grad.dot(&grad).sqrt();
        if norm == 0.0 {
            break;
        }
        cur.scaled_add(cfg.step_size / norm, &grad);
        let offset = &cur - &x;
        let r = offset.dot(&offset).sqrt();
        if r > cfg.epsilon {
            cur = &x + &(offset * (cfg.epsilon / r));
        }
    }
    Ok(cur)
}

/// Mean over rows of (f(x_gmax) − f(x))², with x_gmax from [`gmax_point`].
pub fn indep_err_oracle(f: &MlpParams, g: &MlpParams, x: ArrayView2<f64>, cfg: &IndepOracleConfig) -> Result<f64> {
    cfg.validate()?;
    if x.nrows() == 0 {
        return Err(Error::Empty("evaluation points"));
    }
    let per_point = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let moved = gmax_point(g, row, cfg)?;
            let d = f.forward(moved.view())? - f.forward(row)?;
            Ok(d * d)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_point.iter().sum::<f64>() / per_point.len() as f64)
}

/// Pearson correlation, `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of f(x+δ)−f(x) with g(x+δ)−g(x) over `n` draws δ ~ N(0, σ²I).
///
/// Draws come in fixed-size chunks, each from its own stream keyed by
/// (seed, chunk index), so the sample does not depend on thread scheduling.
pub fn perturbation_correlation(
    f: &MlpParams,
    g: &MlpParams,
    x: ArrayView1<f64>,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if !(sigma > 0.0) || n < 2 {
        return Err(Error::Config(format!("need sigma > 0 and n >= 2, got sigma={sigma}, n={n}")));
    }
    let d = x.len();
    let f0 = f.forward(x)?;
    let g0 = g.forward(x)?;
    const CHUNK: usize = 4096;
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut r = rng::substream(rng::derive_seed(seed, c as u64), rng::PERTURBATION);
            let lo = c * CHUNK;
            let len = CHUNK.min(n - lo);
            let mut pts = ndarray::Array2::<f64>::zeros((len, d));
            for mut row in pts.outer_iter_mut() {
                for (v, &x0) in row.iter_mut().zip(x.iter()) {
                    let e: f64 = StandardNormal.sample(&mut r);
                    *v = x0 + sigma * e;
                }
            }
            let df = f.forward_batch(pts.view())?.mapv(|v| v - f0).to_vec();
            let dg = g.forward_batch(pts.view())?.mapv(|v| v - g0).to_vec();
            Ok((df, dg))
        })
        .collect::<Result<_>>()?;
    let (df, dg): (Vec<f64>, Vec<f64>) =
        chunks.into_iter().fold((Vec::with_capacity(n), Vec::with_capacity(n)), |(mut a, mut b), (x, y)| {
            a.extend(x);
            b.extend(y);
            (a, b)
        });
    pearson(&df, &dg).ok_or_else(|| Error::Undefined("output differences have zero variance".into()))
}

/// Mutual information in nats between two jointly Gaussian variables with
/// correlation `c`.
pub fn mutual_info_from_cos(c: f64) -> Result<f64> {
    if !(c.abs() < 1.0) {
        return Err(Error::Undefined(format!("mutual information diverges at |c| = {}", c.abs())));
    }
    Ok(-0.5 * (1.0 - c * c).ln())
}

/// Per-example error indicators for probability scores at `threshold`
/// (a score ≥ threshold predicts class 1).
pub fn error_indicators(scores: ArrayView1<f64>, labels: ArrayView1<f64>, threshold: f64) -> Vec<bool> {
    scores.iter().zip(labels).map(|(&s, &y)| (s >= threshold) != (y == 1.0)).collect()
}

/// Mean pairwise Pearson correlation of 0/1 error vectors. Pairs where
/// either vector is constant are excluded and counted.
pub fn error_correlation_rho(errors: &[Vec<bool>]) -> PairAverage {
    let as_f: Vec<Vec<f64>> = errors.iter().map(|e| e.iter().map(|&b| b as u8 as f64).collect()).collect();
    let values = unordered_pairs(errors.len()).map(|(a, b)| pearson(&as_f[a], &as_f[b])).collect();
    PairAverage::from_values(values, "every pair has a constant error vector")
}

/// Joint correct/incorrect counts for a pair of members.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairContingency {
    /// both correct
    pub n11: u64,
    /// only the first correct
    pub n10: u64,
    /// only the second correct
    pub n01: u64,
    /// both wrong
    pub n00: u64,
}

impl PairContingency {
    pub fn new(n11: u64, n10: u64, n01: u64, n00: u64) -> Self {
        PairContingency { n11, n10, n01, n00 }
    }

    /// From the two members' error indicators.
    pub fn from_errors(e1: &[bool], e2: &[bool]) -> Self {
        assert_eq!(e1.len(), e2.len());
        let mut c = PairContingency::default();
        for (&a, &b) in e1.iter().zip(e2) {
            match (!a, !b) {
                (true, true) => c.n11 += 1,
                (true, false) => c.n10 += 1,
                (false, true) => c.n01 += 1,
                (false, false) => c.n00 += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }
}

/// Yule's Q, `None` when N11·N00 + N01·N10 = 0.
pub fn q_statistic(c: &PairContingency) -> Option<f64> {
    let same = (c.n11 * c.n00) as f64;
    let diff = (c.n01 * c.n10) as f64;
    let den = same + diff;
    (den > 0.0).then(|| (same - diff) / den)
}

/// Chance-corrected agreement of the two members' correct/incorrect labels.
/// `None` when expected agreement is 1.
pub fn kappa(c: &PairContingency) -> Option<f64> {
    let n = c.total() as f64;
    if n == 0.0 {
        return None;
    }
    let p_obs = (c.n11 + c.n00) as f64 / n;
    let p1 = (c.n11 + c.n10) as f64 / n;
    let p2 = (c.n11 + c.n01) as f64 / n;
    let p_exp = p1 * p2 + (1.0 - p1) * (1.0 - p2);
    (p_exp < 1.0).then(|| (p_obs - p_exp) / (1.0 - p_exp))
}

pub fn q_average(errors: &[Vec<bool>]) -> PairAverage {
    let values = unordered_pairs(errors.len())
        .map(|(a, b)| q_statistic(&PairContingency::from_errors(&errors[a], &errors[b])))
        .collect();
    PairAverage::from_values(values, "Q denominator is zero for every pair")
}

pub fn kappa_average(errors: &[Vec<bool>]) -> PairAverage {
    let values = unordered_pairs(errors.len())
        .map(|(a, b)| kappa(&PairContingency::from_errors(&errors[a], &errors[b])))
        .collect();
    PairAverage::from_values(values, "expected agreement is 1 for every pair")
}
