//! Ensemble prediction, AUC and accuracy, and per-run metric records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diversity::{self, PairAverage};
use crate::error::{Error, Result};
use crate::training::{Method, SelectionRow, TrainedEnsemble};

/// Σ_m w_m · sigmoid(f_m(x)) for each row of `x`.
pub fn ensemble_predict(e: &TrainedEnsemble, x: ArrayView2<f64>) -> Result<Array1<f64>> {
    if e.members.is_empty() {
        return Err(Error::Empty("ensemble members"));
    }
    if e.member_weights.len() != e.members.len() {
        return Err(Error::Shape(format!("{} weights for {} members", e.member_weights.len(), e.members.len())));
    }
    let mut out = Array1::zeros(x.nrows());
    for (m, &w) in e.members.iter().zip(&e.member_weights) {
        out.scaled_add(w, &m.predict_proba_batch(x)?);
    }
    // rounding can push a weighted mean of values in [0,1] just past 1
    out.mapv_inplace(|p: f64| p.clamp(0.0, 1.0));
    Ok(out)
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// P(s⁺ > s⁻) + ½P(s⁺ = s⁻), from midranks. `None` unless both classes
/// are present.
pub fn auc(scores: ArrayView1<f64>, labels: ArrayView1<f64>) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&y| y == 1.0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Fraction of rows where (score ≥ threshold) matches the label. `None` for
/// an empty set.
pub fn accuracy(scores: ArrayView1<f64>, labels: ArrayView1<f64>, threshold: f64) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    if scores.is_empty() {
        return None;
    }
    let hits = scores.iter().zip(labels).filter(|(&s, &y)| (s >= threshold) == (y == 1.0)).count();
    Some(hits as f64 / scores.len() as f64)
}

/// Where a record came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMeta {
    pub dataset: String,
    pub split: String,
    pub restart: usize,
    /// Which part of the data was scored: `train`, `valid` or `test`.
    pub eval_set: String,
}

/// Every metric for one ensemble on one evaluation set. Undefined values
/// are `None` (JSON `null`) with the reason under `undefined`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    #[serde(flatten)]
    pub meta: RunMeta,
    pub method: Method,
    pub size: usize,
    pub lambda: Option<f64>,
    pub n: usize,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub rho_av: Option<f64>,
    pub q_av: Option<f64>,
    pub kappa: Option<f64>,
    pub cos2: Option<f64>,
    /// ∇cos² after projecting onto tangent frames, for manifold data.
    pub cos2_tangent: Option<f64>,
    /// Member pairs left out of each pairwise mean.
    pub excluded_pairs: BTreeMap<String, usize>,
    pub undefined: BTreeMap<String, String>,
}

impl MetricsRecord {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

fn take_pair(
    name: &str,
    avg: PairAverage,
    excluded: &mut BTreeMap<String, usize>,
    undefined: &mut BTreeMap<String, String>,
) -> Option<f64> {
    if avg.excluded > 0 {
        excluded.insert(name.to_owned(), avg.excluded);
    }
    if avg.value.is_none() {
        undefined.insert(name.to_owned(), avg.reason.unwrap_or_else(|| "undefined".into()));
    }
    avg.value
}

/// Score `e` on `eval_set`. Pairwise metrics are means over unordered
/// member pairs; errors are thresholded at 0.5.
pub fn build_report(e: &TrainedEnsemble, eval_set: &Dataset, meta: RunMeta) -> Result<MetricsRecord> {
    eval_set.validate()?;
    let x = eval_set.x.view();
    let y = eval_set.y.view();
    let mut undefined = BTreeMap::new();
    let mut excluded = BTreeMap::new();

    let p = ensemble_predict(e, x)?;
    let auc_v = auc(p.view(), y);
    if auc_v.is_none() {
        undefined.insert("auc".into(), "evaluation set has a single class".into());
    }
    let acc = accuracy(p.view(), y, 0.5);

    let errors = e
        .members
        .iter()
        .map(|m| Ok(diversity::error_indicators(m.predict_proba_batch(x)?.view(), y, 0.5)))
        .collect::<Result<Vec<_>>>()?;
    let rho = take_pair("rho_av", diversity::error_correlation_rho(&errors), &mut excluded, &mut undefined);
    let q = take_pair("q_av", diversity::q_average(&errors), &mut excluded, &mut undefined);
    let k = take_pair("kappa", diversity::kappa_average(&errors), &mut excluded, &mut undefined);
    let cos2 = take_pair("cos2", diversity::ensemble_cos2(&e.members, x, None)?, &mut excluded, &mut undefined);
    let cos2_t = match &eval_set.tangents {
        Some(t) => take_pair(
            "cos2_tangent",
            diversity::ensemble_cos2(&e.members, x, Some(t.view()))?,
            &mut excluded,
            &mut undefined,
        ),
        None => {
            undefined.insert("cos2_tangent".into(), "no tangent frames".into());
            None
        }
    };

    Ok(MetricsRecord {
        meta,
        method: e.config.method,
        size: e.members.len(),
        lambda: e.config.lambda,
        n: eval_set.len(),
        auc: auc_v,
        accuracy: acc,
        rho_av: rho,
        q_av: q,
        kappa: k,
        cos2,
        cos2_tangent: cos2_t,
        excluded_pairs: excluded,
        undefined,
    })
}

fn cell(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3}±{s:.3}"),
        (Some(m), None) => format!("{m:.3}"),
        _ => "---".into(),
    }
}

/// Selected-configuration results pivoted to rows = methods and columns =
/// (dataset, split) × {AUC, ρ_av, ∇cos²}, as CSV.
pub fn pivot_table(rows: &[SelectionRow]) -> Result<String> {
    let mut columns: Vec<(String, String)> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        let c = (r.dataset.clone(), r.split.clone());
        if !columns.contains(&c) {
            columns.push(c);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods.sort();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string()];
    for (d, s) in &columns {
        for metric in ["auc", "rho_av", "cos2"] {
            header.push(format!("{d}/{s}/{metric}"));
        }
    }
    w.write_record(&header)?;
    for m in methods {
        let mut rec = vec![m.to_string()];
        for (d, s) in &columns {
            match rows.iter().find(|r| r.method == m && &r.dataset == d && &r.split == s) {
                Some(r) => {
                    rec.push(cell(r.test_auc_mean, r.test_auc_std));
                    rec.push(cell(r.rho_av_mean, r.rho_av_std));
                    rec.push(cell(r.cos2_mean, r.cos2_std));
                }
                None => rec.extend(std::iter::repeat_n("".to_string(), 3)),
            }
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Human-readable one-line summary of a record.
pub fn describe(r: &MetricsRecord) -> String {
    let f = |v: Option<f64>| v.map_or("null".to_string(), |v| format!("{v:.4}"));
    let mut s = String::new();
    let _ = write!(
        s,
        "{} M={} λ={} {}: auc={} acc={} rho={} q={} kappa={} cos2={}",
        r.method,
        r.size,
        r.lambda.map_or("-".into(), |l| format!("{l:e}")),
        r.meta.eval_set,
        f(r.auc),
        f(r.accuracy),
        f(r.rho_av),
        f(r.q_av),
        f(r.kappa),
        f(r.cos2)
    );
    s
}
