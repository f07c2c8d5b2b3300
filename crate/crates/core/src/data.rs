//! Datasets: the 2D gap generators, a 3D manifold dataset with analytic
//! tangents, CSV ingestion, z-scoring and train/valid/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::rng;
use crate::textfmt;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// n × D features.
    pub x: Array2<f64>,
    /// 0/1 labels stored as floats.
    pub y: Array1<f64>,
    pub feature_names: Vec<String>,
    /// Per-row tangent frames (n × D × K) for data on a known manifold.
    pub tangents: Option<Array3<f64>>,
    /// Per-row chart coordinates (n × K), kept for export.
    pub chart: Option<Array2<f64>>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array1<f64>, feature_names: Vec<String>) -> Result<Self> {
        let d = Dataset { x, y, feature_names, tangents: None, chart: None };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.nrows();
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if self.y.len() != n {
            return Err(Error::Shape(format!("{n} rows but {} labels", self.y.len())));
        }
        if self.feature_names.len() != self.x.ncols() {
            return Err(Error::Shape(format!("{} columns but {} names", self.x.ncols(), self.feature_names.len())));
        }
        if let Some(t) = &self.tangents {
            if t.dim().0 != n || t.dim().1 != self.x.ncols() {
                return Err(Error::Shape(format!("tangents {:?} for {n}×{} data", t.dim(), self.x.ncols())));
            }
        }
        if let Some(c) = &self.chart {
            if c.nrows() != n {
                return Err(Error::Shape(format!("{} chart rows for {n} points", c.nrows())));
            }
        }
        if !self.x.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        if !self.y.iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Data("labels must be 0 or 1".into()));
        }
        Ok(())
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            feature_names: self.feature_names.clone(),
            tangents: self.tangents.as_ref().map(|t| t.select(Axis(0), idx)),
            chart: self.chart.as_ref().map(|c| c.select(Axis(0), idx)),
        }
    }

    /// Number of label-1 rows.
    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v == 1.0).count()
    }

    /// CSV with a header: features, `label`, then chart columns if present.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<String> = self.feature_names.clone();
        header.push("label".into());
        if let Some(c) = &self.chart {
            header.extend((0..c.ncols()).map(|k| format!("u{}", k + 1)));
        }
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:e}")).collect();
            fields.push(format!("{}", self.y[i] as u8));
            if let Some(c) = &self.chart {
                fields.extend(c.row(i).iter().map(|v| format!("{v:e}")));
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GapVariant {
    D1,
    D2,
    D3,
}

impl FromStr for GapVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "D1" => Ok(GapVariant::D1),
            "D2" => Ok(GapVariant::D2),
            "D3" => Ok(GapVariant::D3),
            _ => Err(Error::Config(format!("unknown dataset variant `{s}`"))),
        }
    }
}

fn blob<R: Rng>(r: &mut R, center: (f64, f64), sigma: f64, count: usize, out: &mut Vec<[f64; 2]>) -> Result<()> {
    let nd = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise {sigma}: {e}")))?;
    for _ in 0..count {
        out.push([center.0 + nd.sample(r), center.1 + nd.sample(r)]);
    }
    Ok(())
}

/// Distance between each D2 square and the coordinate axes.
pub const D2_GAP: f64 = 0.25;

/// 2D datasets whose classes can be separated by more than one boundary,
/// with empty regions in between.
///
/// * D1: Gaussian blobs at (1,1) (label 1) and (−1,−1) (label 0). Both
///   coordinate axes separate them.
/// * D2: uniform unit squares in quadrant 1 (label 1) and quadrant 3
///   (label 0), each set back [`D2_GAP`] from both axes; quadrants 2 and 4
///   stay empty. `noise` is unused.
/// * D3: D1 plus two small blobs, about 5% of points, at (1,−0.5) (label 1)
///   and (−1,0.5) (label 0). The x₁ = 0 boundary stays perfect while
///   x₂ = 0 now misclassifies the small blobs.
pub fn gen_2d_gaps(variant: GapVariant, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 8 {
        return Err(Error::Data(format!("need at least 8 points to populate every cluster, got {n}")));
    }
    let mut r = rng::substream(seed, rng::GENERATOR);
    let mut pos = Vec::with_capacity(n / 2 + 1);
    let mut neg = Vec::with_capacity(n / 2 + 1);
    let n_pos = n / 2;
    let n_neg = n - n_pos;
    match variant {
        GapVariant::D1 => {
            blob(&mut r, (1.0, 1.0), noise, n_pos, &mut pos)?;
            blob(&mut r, (-1.0, -1.0), noise, n_neg, &mut neg)?;
        }
        GapVariant::D2 => {
            for _ in 0..n_pos {
                pos.push([D2_GAP + r.gen_range(0.0..1.0), D2_GAP + r.gen_range(0.0..1.0)]);
            }
            for _ in 0..n_neg {
                neg.push([-D2_GAP - r.gen_range(0.0..1.0), -D2_GAP - r.gen_range(0.0..1.0)]);
            }
        }
        GapVariant::D3 => {
            let extra = ((0.05 * n as f64).round() as usize).max(2);
            let (e_pos, e_neg) = (extra / 2, extra - extra / 2);
            blob(&mut r, (1.0, 1.0), noise, n_pos - e_pos, &mut pos)?;
            blob(&mut r, (1.0, -0.5), noise / 2.0, e_pos, &mut pos)?;
            blob(&mut r, (-1.0, -1.0), noise, n_neg - e_neg, &mut neg)?;
            blob(&mut r, (-1.0, 0.5), noise / 2.0, e_neg, &mut neg)?;
        }
    }
    // interleave so that prefixes of the file are roughly balanced
    let mut idx: Vec<(bool, usize)> =
        (0..pos.len()).map(|i| (true, i)).chain((0..neg.len()).map(|i| (false, i))).collect();
    idx.shuffle(&mut r);
    let mut x = Array2::zeros((n, 2));
    let mut y = Array1::zeros(n);
    for (row, &(is_pos, i)) in idx.iter().enumerate() {
        let p = if is_pos { pos[i] } else { neg[i] };
        x[[row, 0]] = p[0];
        x[[row, 1]] = p[1];
        y[row] = is_pos as u8 as f64;
    }
    Dataset::new(x, y, vec!["x1".into(), "x2".into()])
}

/// A fixed smooth map E(u) = V·softplus(W u + b) + c from chart space ℝ²
/// into ℝ³.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldEmbedding {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub v: Array2<f64>,
    pub c: Array1<f64>,
}

impl ManifoldEmbedding {
    pub const HIDDEN: usize = 16;

    pub fn random(seed: u64) -> Self {
        let mut r = rng::substream(seed, rng::GENERATOR ^ 0xE3B);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let h = Self::HIDDEN;
        let w = Array2::from_shape_simple_fn((h, 2), || 1.5 * unit.sample(&mut r));
        let b = Array1::from_shape_simple_fn(h, || 0.5 * unit.sample(&mut r));
        let v = Array2::from_shape_simple_fn((3, h), || unit.sample(&mut r) / (h as f64).sqrt());
        let c = Array1::zeros(3);
        ManifoldEmbedding { w, b, v, c }
    }

    pub fn embed(&self, u: ArrayView1<f64>) -> Array1<f64> {
        let z = self.w.dot(&u) + &self.b;
        self.v.dot(&z.mapv(softplus)) + &self.c
    }

    /// ∂E/∂u, 3×2.
    pub fn jacobian(&self, u: ArrayView1<f64>) -> Array2<f64> {
        let z = self.w.dot(&u) + &self.b;
        let slope = z.mapv(sigmoid);
        let scaled = &self.w * &slope.insert_axis(Axis(1));
        self.v.dot(&scaled)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        textfmt::write_matrix(&mut out, "W", self.w.nrows(), self.w.ncols(), self.w.iter().copied());
        textfmt::write_vector(&mut out, "b", self.b.as_slice().unwrap());
        textfmt::write_matrix(&mut out, "V", self.v.nrows(), self.v.ncols(), self.v.iter().copied());
        textfmt::write_vector(&mut out, "c", self.c.as_slice().unwrap());
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut found = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t = textfmt::parse_line(line, i + 1)?;
            found.insert(t.name.clone(), t);
        }
        let take = |name: &str| found.get(name).ok_or_else(|| Error::Data(format!("embedding is missing `{name}`")));
        let mat = |name: &str| -> Result<Array2<f64>> {
            let t = take(name)?;
            let cols = t.cols.ok_or_else(|| Error::Data(format!("`{name}` must be a matrix")))?;
            Ok(Array2::from_shape_vec((t.rows, cols), t.values.clone()).unwrap())
        };
        let vec = |name: &str| -> Result<Array1<f64>> { Ok(Array1::from(take(name)?.values.clone())) };
        let e = ManifoldEmbedding { w: mat("W")?, b: vec("b")?, v: mat("V")?, c: vec("c")? };
        let h = e.w.nrows();
        if e.w.ncols() != 2 || e.b.len() != h || e.v.dim() != (3, h) || e.c.len() != 3 {
            return Err(Error::Shape("embedding tensors have inconsistent shapes".into()));
        }
        Ok(e)
    }

    /// Rebuild the features and tangent frames for stored chart coordinates.
    pub fn dataset_from_chart(&self, chart: Array2<f64>, y: Array1<f64>) -> Result<Dataset> {
        let n = chart.nrows();
        let mut x = Array2::zeros((n, 3));
        let mut t = Array3::zeros((n, 3, 2));
        for i in 0..n {
            let u = chart.row(i);
            x.row_mut(i).assign(&self.embed(u));
            t.slice_mut(s![i, .., ..]).assign(&self.jacobian(u));
        }
        let mut d = Dataset::new(x, y, vec!["x1".into(), "x2".into(), "x3".into()])?;
        d.tangents = Some(t);
        d.chart = Some(chart);
        d.validate()?;
        Ok(d)
    }
}

/// Points on a 2D surface in ℝ³. Chart coordinates are uniform on the
/// quadrant-1 and quadrant-3 unit squares, embedded by
/// [`ManifoldEmbedding::random`], labelled by sign(u₁). Both chart axes are
/// therefore perfect boundaries. Every row carries its 3×2 tangent frame.
pub fn gen_manifold_3d(n: usize, seed: u64) -> Result<(Dataset, ManifoldEmbedding)> {
    if n < 16 {
        return Err(Error::Data(format!("need at least 16 manifold points, got {n}")));
    }
    let emb = ManifoldEmbedding::random(seed);
    let mut r = rng::substream(seed, rng::GENERATOR);
    let mut chart = Array2::zeros((n, 2));
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let a: f64 = r.gen_range(0.0..1.0);
        let b: f64 = r.gen_range(0.0..1.0);
        let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        chart[[i, 0]] = sign * a;
        chart[[i, 1]] = sign * b;
        y[i] = (sign > 0.0) as u8 as f64;
    }
    let d = emb.dataset_from_chart(chart, y)?;
    Ok((d, emb))
}

/// How to read one CSV table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub label: String,
    /// Label value mapped to 1. Without it the label column must hold 0/1.
    #[serde(default)]
    pub positive: Option<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "?" | "NA" | "NaN" | "nan")
}

/// Read a headered CSV, one-hot encode categorical columns and map the
/// label to 0/1. Rows with missing values are dropped; the count is
/// returned next to the dataset. Features are not scaled here.
pub fn load_csv(path: &Path, spec: &CsvSpec) -> Result<(Dataset, usize)> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let label_col = header
        .iter()
        .position(|h| *h == spec.label)
        .ok_or_else(|| Error::Data(format!("{}: no label column `{}`", path.display(), spec.label)))?;
    for c in &spec.categorical {
        if !header.contains(c) {
            return Err(Error::Data(format!("{}: no categorical column `{c}`", path.display())));
        }
    }
    let mut rows: Vec<(usize, csv::StringRecord)> = Vec::new();
    let mut dropped = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.iter().any(is_missing) {
            dropped += 1;
            continue;
        }
        rows.push((i + 2, rec));
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with missing values", path.display());
    }
    if rows.is_empty() {
        return Err(Error::Empty("csv rows"));
    }

    let mut levels: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (j, h) in header.iter().enumerate() {
        if spec.categorical.contains(h) && j != label_col {
            let set: BTreeSet<&str> = rows.iter().map(|(_, r)| &r[j]).collect();
            levels.insert(j, set.into_iter().map(str::to_owned).collect());
        }
    }
    let mut names = Vec::new();
    for (j, h) in header.iter().enumerate() {
        if j == label_col {
            continue;
        }
        match levels.get(&j) {
            Some(lv) => names.extend(lv.iter().map(|l| format!("{h}={l}"))),
            None => names.push(h.clone()),
        }
    }

    let n = rows.len();
    let mut x = Array2::zeros((n, names.len()));
    let mut y = Array1::zeros(n);
    for (i, (line, rec)) in rows.iter().enumerate() {
        let mut col = 0;
        for (j, field) in rec.iter().enumerate() {
            if j == label_col {
                y[i] = match &spec.positive {
                    Some(p) => (field == p) as u8 as f64,
                    None => match field {
                        "0" => 0.0,
                        "1" => 1.0,
                        _ => {
                            return Err(Error::Parse {
                                line: *line,
                                msg: format!("label `{field}` is not 0/1 and no positive label was given"),
                            })
                        }
                    },
                };
            } else if let Some(lv) = levels.get(&j) {
                let k = lv.iter().position(|l| l == field).unwrap();
                x[[i, col + k]] = 1.0;
                col += lv.len();
            } else {
                x[[i, col]] = field.parse::<f64>().map_err(|_| Error::Parse {
                    line: *line,
                    msg: format!("column `{}`: `{field}` is not a number", header[j]),
                })?;
                col += 1;
            }
        }
        if rec.len() != header.len() {
            return Err(Error::Parse { line: *line, msg: format!("{} fields, header has {}", rec.len(), header.len()) });
        }
    }
    Ok((Dataset::new(x, y, names)?, dropped))
}

/// A named collection of [`CsvSpec`]s, read from TOML:
///
/// ```toml
/// [datasets.ionosphere]
/// path = "ionosphere.csv"
/// label = "class"
/// positive = "g"
/// ```
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub datasets: BTreeMap<String, ManifestEntry>,
    #[serde(skip)]
    base: PathBuf,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(flatten)]
    pub spec: CsvSpec,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut m: Manifest = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn path_of(&self, name: &str) -> Result<PathBuf> {
        let e = self.entry(name)?;
        Ok(self.base.join(&e.path))
    }

    pub fn entry(&self, name: &str) -> Result<&ManifestEntry> {
        self.datasets.get(name).ok_or_else(|| Error::Config(format!("dataset `{name}` is not in the manifest")))
    }

    pub fn load_dataset(&self, name: &str) -> Result<(Dataset, usize)> {
        load_csv(&self.path_of(name)?, &self.entry(name)?.spec)
    }
}

/// Per-column z-scoring fitted on one dataset and applied to others.
/// Columns that are constant in the fitting data are dropped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Indices of the kept input columns.
    pub keep: Vec<usize>,
    pub input_dim: usize,
}

impl Standardizer {
    pub fn fit(d: &Dataset) -> Result<Self> {
        let n = d.len() as f64;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        let mut keep = Vec::new();
        for (j, col) in d.x.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd <= 1e-12 * m.abs().max(1.0) {
                log::warn!("dropping constant column `{}`", d.feature_names[j]);
                continue;
            }
            keep.push(j);
            mean.push(m);
            std.push(sd);
        }
        if keep.is_empty() {
            return Err(Error::Data("every column is constant".into()));
        }
        Ok(Standardizer { mean, std, keep, input_dim: d.dim() })
    }

    pub fn output_dim(&self) -> usize {
        self.keep.len()
    }

    pub fn transform(&self, d: &Dataset) -> Result<Dataset> {
        if d.dim() != self.input_dim {
            return Err(Error::Shape(format!("scaler fitted on {} columns, got {}", self.input_dim, d.dim())));
        }
        let mut x = d.x.select(Axis(1), &self.keep);
        for (k, mut col) in x.axis_iter_mut(Axis(1)).enumerate() {
            let (m, sd) = (self.mean[k], self.std[k]);
            col.mapv_inplace(|v| (v - m) / sd);
        }
        let tangents = d.tangents.as_ref().map(|t| {
            let mut t = t.select(Axis(1), &self.keep);
            for (k, mut plane) in t.axis_iter_mut(Axis(1)).enumerate() {
                plane.mapv_inplace(|v| v / self.std[k]);
            }
            t
        });
        let names = self.keep.iter().map(|&j| d.feature_names[j].clone()).collect();
        let out = Dataset { x, y: d.y.clone(), feature_names: names, tangents, chart: d.chart.clone() };
        out.validate()?;
        Ok(out)
    }

    pub fn transform_rows(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim {
            return Err(Error::Shape(format!("scaler fitted on {} columns, got {}", self.input_dim, x.ncols())));
        }
        let mut out = x.select(Axis(1), &self.keep);
        for (k, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            let (m, sd) = (self.mean[k], self.std[k]);
            col.mapv_inplace(|v| (v - m) / sd);
        }
        Ok(out)
    }

    pub fn write_text(&self, out: &mut String) {
        textfmt::write_scalar(out, "scaler.input_dim", self.input_dim as f64);
        textfmt::write_vector(out, "scaler.keep", &self.keep.iter().map(|&k| k as f64).collect::<Vec<_>>());
        textfmt::write_vector(out, "scaler.mean", &self.mean);
        textfmt::write_vector(out, "scaler.std", &self.std);
    }

    pub fn from_tensor_lines(lines: &[textfmt::TensorLine]) -> Result<Option<Self>> {
        let get = |n: &str| lines.iter().find(|l| l.name == n);
        let Some(dim) = get("scaler.input_dim") else { return Ok(None) };
        let need = |n: &str| get(n).ok_or_else(|| Error::Data(format!("scaler is missing `{n}`")));
        let keep: Vec<usize> = need("scaler.keep")?.values.iter().map(|&v| v as usize).collect();
        let s = Standardizer {
            input_dim: dim.values[0] as usize,
            mean: need("scaler.mean")?.values.clone(),
            std: need("scaler.std")?.values.clone(),
            keep,
        };
        if s.mean.len() != s.keep.len() || s.std.len() != s.keep.len() || s.keep.iter().any(|&k| k >= s.input_dim) {
            return Err(Error::Shape("scaler tensors have inconsistent shapes".into()));
        }
        Ok(Some(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Random,
    Extrapolation,
}

impl FromStr for SplitKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitKind::Random),
            "extrapolation" => Ok(SplitKind::Extrapolation),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

impl std::fmt::Display for SplitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitKind::Random => "random",
            SplitKind::Extrapolation => "extrapolation",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub kind: SplitKind,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_valid_fraction")]
    pub valid_fraction_of_train: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_valid_fraction() -> f64 {
    0.2
}

impl SplitSpec {
    pub fn new(kind: SplitKind, seed: u64) -> Self {
        SplitSpec { kind, train_fraction: 0.8, valid_fraction_of_train: 0.2, seed }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train_fraction", self.train_fraction), ("valid_fraction_of_train", self.valid_fraction_of_train)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// Row indices of a train/valid/test partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Euclidean norms of the rows after z-scoring on the whole dataset.
/// Constant columns contribute nothing.
pub fn standardized_norms(d: &Dataset) -> Vec<f64> {
    let n = d.len() as f64;
    let mut sq = vec![0.0; d.len()];
    for col in d.x.axis_iter(Axis(1)) {
        let m = col.sum() / n;
        let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        if sd == 0.0 {
            continue;
        }
        for (acc, v) in sq.iter_mut().zip(col) {
            let z = (v - m) / sd;
            *acc += z * z;
        }
    }
    sq.into_iter().map(f64::sqrt).collect()
}

pub fn split_indices(d: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let n = d.len();
    let mut r = rng::substream(spec.seed, rng::SPLIT);
    let mut trainval: Vec<usize>;
    let test: Vec<usize>;
    match spec.kind {
        SplitKind::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut r);
            let n_tv = (spec.train_fraction * n as f64).round() as usize;
            test = idx.split_off(n_tv);
            trainval = idx;
        }
        SplitKind::Extrapolation => {
            // the closest half goes to train/valid; equal norms resolve by index
            let norms = standardized_norms(d);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
            test = idx.split_off(n / 2);
            trainval = idx;
            trainval.shuffle(&mut r);
        }
    }
    let n_valid = (spec.valid_fraction_of_train * trainval.len() as f64).round() as usize;
    let valid = trainval.split_off(trainval.len() - n_valid);
    let train = trainval;
    for (name, part) in [("train", &train), ("valid", &valid), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::Data(format!("{name} partition is empty for {n} rows")));
        }
    }
    Ok(SplitIndices { train, valid, test })
}

/// Partition without scaling.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let idx = split_indices(d, spec)?;
    Ok((d.subset(&idx.train), d.subset(&idx.valid), d.subset(&idx.test)))
}

/// Train/valid/test after z-scoring with statistics from the training part.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
    pub scaler: Standardizer,
}

pub fn prepare(d: &Dataset, spec: &SplitSpec) -> Result<PreparedSplit> {
    let (train, valid, test) = split(d, spec)?;
    let scaler = Standardizer::fit(&train)?;
    Ok(PreparedSplit {
        train: scaler.transform(&train)?,
        valid: scaler.transform(&valid)?,
        test: scaler.transform(&test)?,
        scaler,
    })
}

/// One-line summary used in logs.
pub fn describe(d: &Dataset) -> String {
    let mut s = String::new();
    let _ = write!(s, "n={} D={} positives={}", d.len(), d.dim(), d.positives());
    if let Some(t) = &d.tangents {
        let _ = write!(s, " K={}", t.dim().2);
    }
    s
}
