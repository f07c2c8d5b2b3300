//! Hyperparameter grid over (method, size, λ, restart) with selection by
//! mean validation AUC of the ensemble.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train, EnsembleConfig, Method};
use crate::data::{prepare, Dataset, SplitKind, SplitSpec};
use crate::error::{Error, Result};
use crate::eval::{build_report, MetricsRecord, RunMeta};
use crate::rng;

/// `k` log-spaced values from `lo` to `hi`; both endpoints are exact.
pub fn lambda_grid(lo: f64, hi: f64, k: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || k == 0 {
        return Err(Error::Config(format!("bad lambda grid: {k} points on [{lo}, {hi}]")));
    }
    if k == 1 {
        return Ok(vec![lo]);
    }
    let (a, b) = (lo.ln(), hi.ln());
    let step = (b - a) / (k - 1) as f64;
    let mut out: Vec<f64> = (0..k).map(|i| (a + step * i as f64).exp()).collect();
    out[0] = lo;
    out[k - 1] = hi;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Label for records; the data itself is passed to [`GridSpec::run`].
    pub dataset: String,
    pub split: SplitKind,
    pub methods: Vec<Method>,
    pub sizes: Vec<usize>,
    /// Used by penalized methods only.
    pub lambdas: Vec<f64>,
    pub restarts: usize,
    pub seed: u64,
    /// Training settings; method, size, lambda and seed are filled per run.
    pub template: EnsembleConfig,
}

/// One grid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellSpec {
    pub method: Method,
    pub size: usize,
    pub lambda: Option<f64>,
    pub restart: usize,
}

pub fn run_key(dataset: &str, split: SplitKind, c: &CellSpec) -> String {
    let lam = c.lambda.map_or("none".to_string(), |l| format!("{l:e}"));
    format!("{dataset}/{split}/{}/M{}/lam={lam}/r{}", c.method, c.size, c.restart)
}

/// One trained and scored grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: String,
    pub dataset: String,
    pub split: String,
    pub method: Method,
    pub size: usize,
    pub lambda: Option<f64>,
    pub restart: usize,
    pub valid: Option<MetricsRecord>,
    pub test: Option<MetricsRecord>,
    pub wall_time_s: f64,
    /// Set when the run failed; metrics are then absent.
    pub error: Option<String>,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.sizes.is_empty() || self.restarts == 0 {
            return Err(Error::Config("grid needs at least one method, size and restart".into()));
        }
        if self.methods.iter().any(|m| m.penalized()) && self.lambdas.is_empty() {
            return Err(Error::Config("penalized methods need at least one lambda".into()));
        }
        for &s in &self.sizes {
            for &m in &self.methods {
                self.config_for(&CellSpec { method: m, size: s, lambda: m.penalized().then(|| self.lambdas[0]), restart: 0 })
                    .validate()?;
            }
        }
        Ok(())
    }

    pub fn cells(&self) -> Vec<CellSpec> {
        let mut out = Vec::new();
        for restart in 0..self.restarts {
            for &method in &self.methods {
                for &size in &self.sizes {
                    if method.penalized() {
                        for &l in &self.lambdas {
                            out.push(CellSpec { method, size, lambda: Some(l), restart });
                        }
                    } else {
                        out.push(CellSpec { method, size, lambda: None, restart });
                    }
                }
            }
        }
        out
    }

    /// Every method in a restart sees the same split and the same seeds.
    pub fn split_seed(&self, restart: usize) -> u64 {
        rng::derive_seed(self.seed, 2 * restart as u64)
    }

    pub fn train_seed(&self, restart: usize) -> u64 {
        rng::derive_seed(self.seed, 2 * restart as u64 + 1)
    }

    pub fn config_for(&self, c: &CellSpec) -> EnsembleConfig {
        EnsembleConfig {
            method: c.method,
            size: c.size,
            lambda: c.lambda,
            seed: self.train_seed(c.restart),
            tangent_penalty: self.template.tangent_penalty && c.method == Method::LIT,
            ..self.template.clone()
        }
    }

    pub fn key(&self, c: &CellSpec) -> String {
        run_key(&self.dataset, self.split, c)
    }

    /// Train and score one cell. Failures are recorded, not returned.
    pub fn run_cell(&self, data: &Dataset, c: &CellSpec) -> RunRecord {
        let start = Instant::now();
        let outcome = (|| -> Result<(MetricsRecord, MetricsRecord)> {
            let parts = prepare(data, &SplitSpec::new(self.split, self.split_seed(c.restart)))?;
            let cfg = self.config_for(c);
            let e = train(&cfg, &parts.train, &parts.valid)?;
            let meta = |set: &str| RunMeta {
                dataset: self.dataset.clone(),
                split: self.split.to_string(),
                restart: c.restart,
                eval_set: set.into(),
            };
            Ok((build_report(&e, &parts.valid, meta("valid"))?, build_report(&e, &parts.test, meta("test"))?))
        })();
        let (valid, test, error) = match outcome {
            Ok((v, t)) => (Some(v), Some(t), None),
            Err(e) => {
                log::warn!("run {} failed: {e}", self.key(c));
                (None, None, Some(e.to_string()))
            }
        };
        RunRecord {
            key: self.key(c),
            dataset: self.dataset.clone(),
            split: self.split.to_string(),
            method: c.method,
            size: c.size,
            lambda: c.lambda,
            restart: c.restart,
            valid,
            test,
            wall_time_s: start.elapsed().as_secs_f64(),
            error,
        }
    }

    /// Run every cell whose key is not in `done`, in parallel. Each finished
    /// record is passed to `sink` as soon as it exists; the returned records
    /// follow [`GridSpec::cells`] order.
    pub fn run(&self, data: &Dataset, done: &HashSet<String>, sink: impl Fn(&RunRecord) + Sync) -> Result<Vec<RunRecord>> {
        self.validate()?;
        let pending: Vec<CellSpec> = self.cells().into_iter().filter(|c| !done.contains(&self.key(c))).collect();
        log::info!("grid {}: {} runs pending, {} already done", self.dataset, pending.len(), done.len());
        Ok(pending
            .par_iter()
            .map(|c| {
                let r = self.run_cell(data, c);
                sink(&r);
                r
            })
            .collect())
    }
}

/// Mean and sample standard deviation of the defined values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return Summary::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Summary { mean: Some(mean), std: Some(std), n: v.len() }
    }
}

/// Test-set results of the configuration chosen for one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub dataset: String,
    pub split: String,
    pub method: Method,
    pub size: usize,
    pub lambda: Option<f64>,
    pub runs: usize,
    pub failed: usize,
    pub valid_auc: Option<f64>,
    pub test_auc_mean: Option<f64>,
    pub test_auc_std: Option<f64>,
    pub test_acc_mean: Option<f64>,
    pub test_acc_std: Option<f64>,
    pub rho_av_mean: Option<f64>,
    pub rho_av_std: Option<f64>,
    pub q_av_mean: Option<f64>,
    pub kappa_mean: Option<f64>,
    pub cos2_mean: Option<f64>,
    pub cos2_std: Option<f64>,
}

/// For each (dataset, split, method), pick the (size, λ) with the highest
/// mean validation AUC across restarts and summarize its test metrics.
/// Ties go to the smaller ensemble, then the smaller λ.
pub fn select(records: &[RunRecord]) -> Vec<SelectionRow> {
    type Cfg = (usize, Option<u64>);
    let mut groups: BTreeMap<(String, String, Method), BTreeMap<Cfg, Vec<&RunRecord>>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.clone(), r.split.clone(), r.method))
            .or_default()
            .entry((r.size, r.lambda.map(f64::to_bits)))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((dataset, split, method), configs) in groups {
        let mut best: Option<(f64, Cfg)> = None;
        let mut ordered: Vec<(&Cfg, &Vec<&RunRecord>)> = configs.iter().collect();
        ordered.sort_by(|a, b| {
            a.0 .0.cmp(&b.0 .0).then(
                a.0 .1.map(f64::from_bits).unwrap_or(0.0).total_cmp(&b.0 .1.map(f64::from_bits).unwrap_or(0.0)),
            )
        });
        for (cfg, runs) in &ordered {
            let s = Summary::of(runs.iter().map(|r| r.valid.as_ref().and_then(|v| v.auc)));
            if let Some(m) = s.mean {
                if best.is_none_or(|(b, _)| m > b) {
                    best = Some((m, **cfg));
                }
            }
        }
        let Some((valid_auc, cfg)) = best else {
            log::warn!("{dataset}/{split}/{method}: no run produced a validation AUC");
            continue;
        };
        let runs = &configs[&cfg];
        let tests: Vec<&MetricsRecord> = runs.iter().filter_map(|r| r.test.as_ref()).collect();
        let auc = Summary::of(tests.iter().map(|t| t.auc));
        let acc = Summary::of(tests.iter().map(|t| t.accuracy));
        let rho = Summary::of(tests.iter().map(|t| t.rho_av));
        let cos2 = Summary::of(tests.iter().map(|t| t.cos2));
        out.push(SelectionRow {
            dataset,
            split,
            method,
            size: cfg.0,
            lambda: cfg.1.map(f64::from_bits),
            runs: runs.len(),
            failed: runs.iter().filter(|r| r.error.is_some()).count(),
            valid_auc: Some(valid_auc),
            test_auc_mean: auc.mean,
            test_auc_std: auc.std,
            test_acc_mean: acc.mean,
            test_acc_std: acc.std,
            rho_av_mean: rho.mean,
            rho_av_std: rho.std,
            q_av_mean: Summary::of(tests.iter().map(|t| t.q_av)).mean,
            kappa_mean: Summary::of(tests.iter().map(|t| t.kappa)).mean,
            cos2_mean: cos2.mean,
            cos2_std: cos2.std,
        });
    }
    out
}
