use std::collections::{BTreeMap, HashSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use lit_core::data::{load_csv, prepare, CsvSpec, Dataset};
use lit_core::eval::{build_report, describe, pivot_table, RunMeta};
use lit_core::training::{select, train, RunRecord, SelectionRow};
use ndarray::Array2;

use crate::artifacts::{self, Model};
use crate::config::{attach_manifold, generate, Generator, GridConfig, RunConfig};
use crate::CliError;

pub const RESULTS_FILE: &str = "results.jsonl";
pub const SELECTION_FILE: &str = "selection.csv";
pub const TABLE_FILE: &str = "table.csv";

fn out_dir(flag: Option<&Path>, from_config: Option<PathBuf>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or(from_config)
        .ok_or_else(|| CliError::Config("no output location: pass --out or set `out` in the config".into()))
}

/// Path of the embedding file written next to a generated manifold CSV.
pub fn embedding_path(csv: &Path) -> PathBuf {
    csv.with_extension("embedding.txt")
}

pub fn gen_data(variant: &str, n: usize, noise: f64, seed: u64, out: &Path) -> Result<(), CliError> {
    let g: Generator = variant.parse()?;
    let (d, emb) = generate(&g, n, noise, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, d.to_csv_string())?;
    if let Some(e) = emb {
        fs::write(embedding_path(out), e.to_text())?;
    }
    log::info!("wrote {} rows to {}", d.len(), out.display());
    Ok(())
}

pub fn train_cmd(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<PathBuf, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.ensemble.seed = s;
        cfg.split.seed = s;
    }
    let dir = out_dir(out, cfg.out.clone())?;
    let data = cfg.data.load()?;
    let parts = prepare(&data, &cfg.split)?;
    log::info!(
        "{} M={} on {} train / {} valid / {} test rows",
        cfg.ensemble.method,
        cfg.ensemble.size,
        parts.train.len(),
        parts.valid.len(),
        parts.test.len()
    );
    let ensemble = train(&cfg.ensemble, &parts.train, &parts.valid)?;
    let meta = |set: &str| RunMeta {
        dataset: cfg.data.label(),
        split: cfg.split.kind.to_string(),
        restart: 0,
        eval_set: set.into(),
    };
    let reports = vec![
        build_report(&ensemble, &parts.valid, meta("valid"))?,
        build_report(&ensemble, &parts.test, meta("test"))?,
    ];
    artifacts::write_model(&dir, &Model { ensemble, scaler: parts.scaler })?;
    artifacts::write_metrics(&dir.join(artifacts::METRICS_FILE), &reports)?;
    for r in &reports {
        println!("{}", describe(r));
    }
    Ok(dir)
}

/// Options for reading a CSV given on the command line.
#[derive(Clone, Debug)]
pub struct DataArgs {
    pub path: PathBuf,
    pub label: String,
    pub positive: Option<String>,
    pub embedding: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset, CliError> {
        if !self.path.exists() {
            return Err(CliError::Config(format!("dataset file `{}` does not exist", self.path.display())));
        }
        let spec = CsvSpec { label: self.label.clone(), positive: self.positive.clone(), categorical: vec![] };
        let (d, dropped) = load_csv(&self.path, &spec)?;
        if dropped > 0 {
            log::warn!("{}: dropped {dropped} rows with missing values", self.path.display());
        }
        // a generated manifold table carries its embedding alongside
        let embedding = self.embedding.clone().or_else(|| Some(embedding_path(&self.path)).filter(|p| p.exists()));
        match embedding {
            Some(e) => attach_manifold(d, &e),
            None => Ok(d),
        }
    }
}

fn model_input(model: &Model, d: &Dataset) -> Result<Dataset, CliError> {
    if d.dim() != model.scaler.input_dim {
        return Err(CliError::Config(format!(
            "model expects {} features, data has {}",
            model.scaler.input_dim,
            d.dim()
        )));
    }
    Ok(model.scaler.transform(d)?)
}

pub fn eval_cmd(model_dir: &Path, data: &DataArgs, set: &str, out: Option<&Path>) -> Result<(), CliError> {
    let model = artifacts::read_model(model_dir)?;
    let d = model_input(&model, &data.load()?)?;
    let meta = RunMeta { dataset: data.path.display().to_string(), split: String::new(), restart: 0, eval_set: set.into() };
    let report = build_report(&model.ensemble, &d, meta)?;
    match out {
        Some(p) => artifacts::write_metrics(p, std::slice::from_ref(&report))?,
        None => println!("{}", report.to_json_line()?),
    }
    log::info!("{}", describe(&report));
    Ok(())
}

/// Axis-aligned plotting window `[x1_lo, x1_hi] × [x2_lo, x2_hi]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds(pub [f64; 4]);

impl std::str::FromStr for Bounds {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let v: Vec<f64> = s
            .split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number `{t}`")))
            .collect::<Result<_, _>>()?;
        match v[..] {
            [a, b, c, d] if a < b && c < d && v.iter().all(|x| x.is_finite()) => Ok(Bounds([a, b, c, d])),
            _ => Err("expected x1_lo,x1_hi,x2_lo,x2_hi with lo < hi".into()),
        }
    }
}

fn linspace(lo: f64, hi: f64, k: usize) -> impl Iterator<Item = f64> {
    (0..k).map(move |i| if i + 1 == k { hi } else { lo + (hi - lo) * i as f64 / (k - 1) as f64 })
}

/// Member logits and ensemble probability on a `resolution × resolution`
/// grid over `bounds`, in the data's original units. x₁ varies fastest.
pub fn boundary_csv(model: &Model, bounds: Bounds, resolution: usize) -> Result<String, CliError> {
    if model.scaler.input_dim != 2 {
        return Err(CliError::Config(format!("boundary export needs a 2D model, this one takes {} inputs", model.scaler.input_dim)));
    }
    if resolution < 2 {
        return Err(CliError::Config("resolution must be at least 2".into()));
    }
    let [a, b, c, d] = bounds.0;
    let mut raw = Array2::zeros((resolution * resolution, 2));
    for (j, x2) in linspace(c, d, resolution).enumerate() {
        for (i, x1) in linspace(a, b, resolution).enumerate() {
            raw[[j * resolution + i, 0]] = x1;
            raw[[j * resolution + i, 1]] = x2;
        }
    }
    let x = model.scaler.transform_rows(&raw)?;
    let logits = model.ensemble.members.iter().map(|m| m.forward_batch(x.view())).collect::<Result<Vec<_>, _>>()?;
    let prob = model.ensemble.predict_proba(x.view())?;

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["x1".to_string(), "x2".to_string()];
    header.extend((0..logits.len()).map(|m| format!("logit_{m}")));
    header.push("probability".into());
    w.write_record(&header)?;
    for r in 0..raw.nrows() {
        let mut rec = vec![format!("{:e}", raw[[r, 0]]), format!("{:e}", raw[[r, 1]])];
        rec.extend(logits.iter().map(|l| format!("{:e}", l[r])));
        rec.push(format!("{:e}", prob[r]));
        w.write_record(&rec)?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String, CliError> {
    let bytes = w.into_inner().map_err(|e| CliError::Run(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Run(e.to_string()))
}

pub fn export_boundary(model_dir: &Path, bounds: Bounds, resolution: usize, out: &Path) -> Result<(), CliError> {
    let model = artifacts::read_model(model_dir)?;
    fs::write(out, boundary_csv(&model, bounds, resolution)?)?;
    Ok(())
}

/// One row per (example, member, feature): the member's input-gradient
/// component with respect to the standardized feature, and the mean of that
/// component over members.
pub fn gradients_csv(model: &Model, d: &Dataset) -> Result<String, CliError> {
    let x = model_input(model, d)?;
    let names: Vec<String> = model.scaler.keep.iter().map(|&k| d.feature_names[k].clone()).collect();
    let grads = model
        .ensemble
        .members
        .iter()
        .map(|m| m.input_gradient_batch(x.x.view()))
        .collect::<Result<Vec<_>, _>>()?;
    let m_count = grads.len() as f64;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["example", "member", "feature", "gradient", "mean_gradient"])?;
    for i in 0..x.len() {
        for (m, g) in grads.iter().enumerate() {
            for (k, name) in names.iter().enumerate() {
                let mean = grads.iter().map(|h| h[[i, k]]).sum::<f64>() / m_count;
                w.write_record([i.to_string(), m.to_string(), name.clone(), format!("{:e}", g[[i, k]]), format!("{mean:e}")])?;
            }
        }
    }
    into_string(w)
}

pub fn export_gradients(model_dir: &Path, data: &DataArgs, out: &Path) -> Result<(), CliError> {
    let model = artifacts::read_model(model_dir)?;
    fs::write(out, gradients_csv(&model, &data.load()?)?)?;
    Ok(())
}

/// Outcome of a grid invocation.
#[derive(Debug)]
pub struct GridOutcome {
    pub dir: PathBuf,
    pub executed: usize,
    pub failed: Vec<String>,
    pub selection: Vec<SelectionRow>,
}

/// Latest record per key, in file order of first appearance.
fn latest_by_key(records: Vec<RunRecord>) -> Vec<RunRecord> {
    let mut order = Vec::new();
    let mut latest: BTreeMap<String, RunRecord> = BTreeMap::new();
    for r in records {
        if !latest.contains_key(&r.key) {
            order.push(r.key.clone());
        }
        latest.insert(r.key.clone(), r);
    }
    order.into_iter().map(|k| latest.remove(&k).expect("key recorded")).collect()
}

pub fn grid_cmd(config: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<GridOutcome, CliError> {
    let mut cfg = GridConfig::load(config)?;
    if let Some(s) = seed {
        cfg.spec.seed = s;
    }
    let dir = out_dir(out, cfg.out.clone())?;
    fs::create_dir_all(&dir)?;
    let results = dir.join(RESULTS_FILE);
    let previous: Vec<RunRecord> = if results.exists() { artifacts::read_jsonl(&results)? } else { Vec::new() };
    // failed runs are retried
    let done: HashSet<String> = previous.iter().filter(|r| r.error.is_none()).map(|r| r.key.clone()).collect();
    let data = cfg.data.load()?;

    let file = OpenOptions::new().create(true).append(true).open(&results)?;
    let writer = Mutex::new(file);
    let write_error = Mutex::new(None::<std::io::Error>);
    let fresh = cfg.spec.run(&data, &done, |r| {
        let line = match serde_json::to_string(r) {
            Ok(l) => l,
            Err(e) => {
                log::error!("cannot serialize record {}: {e}", r.key);
                return;
            }
        };
        let mut f = writer.lock().expect("results writer poisoned");
        if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
            write_error.lock().expect("error slot poisoned").get_or_insert(e);
        }
        match &r.error {
            None => log::info!("{} done in {:.1}s", r.key, r.wall_time_s),
            Some(e) => log::warn!("{} failed: {e}", r.key),
        }
    })?;
    if let Some(e) = write_error.into_inner().expect("error slot poisoned") {
        return Err(e.into());
    }

    let wanted: HashSet<String> = cfg.spec.cells().iter().map(|c| cfg.spec.key(c)).collect();
    let all: Vec<RunRecord> =
        latest_by_key(previous.into_iter().chain(fresh.iter().cloned()).collect()).into_iter().filter(|r| wanted.contains(&r.key)).collect();
    let failed: Vec<String> = all.iter().filter(|r| r.error.is_some()).map(|r| r.key.clone()).collect();
    let selection = select(&all);

    let mut w = csv::Writer::from_path(dir.join(SELECTION_FILE))?;
    for row in &selection {
        w.serialize(row)?;
    }
    w.flush()?;
    fs::write(dir.join(TABLE_FILE), pivot_table(&selection)?)?;
    Ok(GridOutcome { dir, executed: fresh.len(), failed, selection })
}
