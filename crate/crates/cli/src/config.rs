//! TOML configuration for `train` and `grid`.
//!
//! Relative paths are resolved against the directory holding the config
//! file, and every referenced input must exist when the file is loaded.

use std::path::{Path, PathBuf};

use lit_core::data::{
    gen_2d_gaps, gen_manifold_3d, load_csv, CsvSpec, Dataset, GapVariant, Manifest, ManifoldEmbedding, SplitKind,
    SplitSpec,
};
use lit_core::models::Activation;
use lit_core::training::{lambda_grid, EnsembleConfig, GridSpec, Method};
use serde::Deserialize;

use crate::CliError;

/// The `[data]` table. Exactly one of `name` (with `manifest`), `csv` or
/// `generator` picks the source.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub name: Option<String>,

    pub csv: Option<PathBuf>,
    pub label: Option<String>,
    pub positive: Option<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Embedding file written next to a generated manifold CSV.
    pub embedding: Option<PathBuf>,

    pub generator: Option<String>,
    pub n: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Generator {
    Gaps(GapVariant),
    Manifold,
}

impl std::str::FromStr for Generator {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        if s.eq_ignore_ascii_case("manifold3d") {
            return Ok(Generator::Manifold);
        }
        s.parse()
            .map(Generator::Gaps)
            .map_err(|_| CliError::Config(format!("unknown variant `{s}` (expected D1, D2, D3 or manifold3d)")))
    }
}

pub fn generate(g: &Generator, n: usize, noise: f64, seed: u64) -> Result<(Dataset, Option<ManifoldEmbedding>), CliError> {
    Ok(match g {
        Generator::Gaps(v) => (gen_2d_gaps(*v, n, noise, seed)?, None),
        Generator::Manifold => {
            let (d, e) = gen_manifold_3d(n, seed)?;
            (d, Some(e))
        }
    })
}

/// A resolved dataset reference.
#[derive(Clone, Debug)]
pub enum DataSource {
    Manifest { manifest: PathBuf, name: String },
    Csv { path: PathBuf, spec: CsvSpec, embedding: Option<PathBuf> },
    Generated { generator: Generator, n: usize, noise: f64, seed: u64 },
}

fn existing(base: &Path, p: &Path, what: &str) -> Result<PathBuf, CliError> {
    let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !full.exists() {
        return Err(CliError::Config(format!("{what} `{}` does not exist", full.display())));
    }
    Ok(full)
}

impl DataSection {
    pub fn resolve(self, base: &Path) -> Result<DataSource, CliError> {
        let chosen = [self.name.is_some(), self.csv.is_some(), self.generator.is_some()];
        if chosen.iter().filter(|&&c| c).count() != 1 {
            return Err(CliError::Config("[data] needs exactly one of `name`, `csv` or `generator`".into()));
        }
        let stray = |keys: &[(&str, bool)]| -> Result<(), CliError> {
            match keys.iter().find(|(_, set)| *set) {
                Some((k, _)) => Err(CliError::Config(format!("[data] key `{k}` does not apply to this source"))),
                None => Ok(()),
            }
        };
        if let Some(name) = self.name {
            stray(&[
                ("label", self.label.is_some()),
                ("positive", self.positive.is_some()),
                ("categorical", !self.categorical.is_empty()),
                ("embedding", self.embedding.is_some()),
                ("n", self.n.is_some()),
                ("noise", self.noise.is_some()),
                ("seed", self.seed.is_some()),
            ])?;
            let m = self.manifest.ok_or_else(|| CliError::Config("[data] `name` needs a `manifest`".into()))?;
            let manifest = existing(base, &m, "manifest")?;
            let loaded = Manifest::load(&manifest)?;
            existing(Path::new(""), &loaded.path_of(&name)?, "dataset file")?;
            return Ok(DataSource::Manifest { manifest, name });
        }
        if let Some(csv) = self.csv {
            stray(&[
                ("manifest", self.manifest.is_some()),
                ("n", self.n.is_some()),
                ("noise", self.noise.is_some()),
                ("seed", self.seed.is_some()),
            ])?;
            let path = existing(base, &csv, "dataset file")?;
            let embedding = self.embedding.map(|e| existing(base, &e, "embedding file")).transpose()?;
            let spec = CsvSpec {
                label: self.label.unwrap_or_else(|| "label".into()),
                positive: self.positive,
                categorical: self.categorical,
            };
            return Ok(DataSource::Csv { path, spec, embedding });
        }
        stray(&[
            ("manifest", self.manifest.is_some()),
            ("label", self.label.is_some()),
            ("positive", self.positive.is_some()),
            ("categorical", !self.categorical.is_empty()),
            ("embedding", self.embedding.is_some()),
        ])?;
        let generator: Generator = self.generator.as_deref().unwrap_or_default().parse()?;
        Ok(DataSource::Generated {
            generator,
            n: self.n.ok_or_else(|| CliError::Config("[data] generator needs `n`".into()))?,
            noise: self.noise.unwrap_or(0.2),
            seed: self.seed.unwrap_or(0),
        })
    }
}

/// Rebuild a generated manifold table from its chart columns, restoring the
/// tangent frames.
pub fn attach_manifold(d: Dataset, embedding: &Path) -> Result<Dataset, CliError> {
    let emb = ManifoldEmbedding::from_text(&std::fs::read_to_string(embedding)?)?;
    let col = |name: &str| {
        d.feature_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| CliError::Run(format!("manifold table has no `{name}` column")))
    };
    let (c1, c2) = (col("u1")?, col("u2")?);
    let mut chart = ndarray::Array2::zeros((d.len(), 2));
    chart.column_mut(0).assign(&d.x.column(c1));
    chart.column_mut(1).assign(&d.x.column(c2));
    Ok(emb.dataset_from_chart(chart, d.y.clone())?)
}

impl DataSource {
    /// Short name used in run keys and records.
    pub fn label(&self) -> String {
        match self {
            DataSource::Manifest { name, .. } => name.clone(),
            DataSource::Csv { path, .. } => {
                path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned())
            }
            DataSource::Generated { generator: Generator::Gaps(v), .. } => format!("{v:?}"),
            DataSource::Generated { generator: Generator::Manifold, .. } => "manifold3d".into(),
        }
    }

    pub fn load(&self) -> Result<Dataset, CliError> {
        let d = match self {
            DataSource::Manifest { manifest, name } => {
                let (d, dropped) = Manifest::load(manifest)?.load_dataset(name)?;
                if dropped > 0 {
                    log::warn!("{name}: dropped {dropped} rows with missing values");
                }
                d
            }
            DataSource::Csv { path, spec, embedding } => {
                let (d, dropped) = load_csv(path, spec)?;
                if dropped > 0 {
                    log::warn!("{}: dropped {dropped} rows with missing values", path.display());
                }
                match embedding {
                    Some(e) => attach_manifold(d, e)?,
                    None => d,
                }
            }
            DataSource::Generated { generator, n, noise, seed } => generate(generator, *n, *noise, *seed)?.0,
        };
        log::info!("loaded {}: {}", self.label(), lit_core::data::describe(&d));
        Ok(d)
    }
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<(T, PathBuf), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    let parsed = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((parsed, base))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    out: Option<PathBuf>,
    data: DataSection,
    split: SplitSpec,
    ensemble: EnsembleConfig,
}

/// Everything `train` needs.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: DataSource,
    pub split: SplitSpec,
    pub ensemble: EnsembleConfig,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let (f, base): (RunFile, _) = read_toml(path)?;
        f.split.validate().map_err(|e| CliError::Config(format!("[split] {e}")))?;
        f.ensemble.validate().map_err(|e| CliError::Config(format!("[ensemble] {e}")))?;
        Ok(RunConfig { data: f.data.resolve(&base)?, split: f.split, ensemble: f.ensemble, out: f.out.map(|o| base.join(o)) })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 64 softplus units, no dropout.
    #[default]
    Synthetic,
    /// 256 ReLU units, dropout 0.5.
    Benchmark,
}

/// `[training]`: shared settings for every grid cell.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default)]
    pub preset: Preset,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub dropout_rate: Option<f64>,
    pub l2_penalty: Option<f64>,
    pub hidden: Option<usize>,
    pub activation: Option<Activation>,
    #[serde(default)]
    pub tangent_penalty: bool,
}

impl TrainingSection {
    pub fn template(&self) -> EnsembleConfig {
        let base = match self.preset {
            Preset::Synthetic => EnsembleConfig::new(Method::RRs, 1, None, 0),
            Preset::Benchmark => EnsembleConfig::benchmark(Method::RRs, 1, None, 0),
        };
        EnsembleConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            dropout_rate: self.dropout_rate.unwrap_or(base.dropout_rate),
            l2_penalty: self.l2_penalty.unwrap_or(base.l2_penalty),
            hidden: self.hidden.unwrap_or(base.hidden),
            activation: self.activation.unwrap_or(base.activation),
            tangent_penalty: self.tangent_penalty,
            ..base
        }
    }
}

fn default_restarts() -> usize {
    10
}
fn default_lambda_min() -> f64 {
    1e-4
}
fn default_lambda_max() -> f64 {
    1e1
}
fn default_lambda_points() -> usize {
    16
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub split: SplitKind,
    pub methods: Vec<Method>,
    pub sizes: Vec<usize>,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    /// Explicit λ values; otherwise a log-spaced grid.
    pub lambdas: Option<Vec<f64>>,
    #[serde(default = "default_lambda_min")]
    pub lambda_min: f64,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: f64,
    #[serde(default = "default_lambda_points")]
    pub lambda_points: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    out: Option<PathBuf>,
    data: DataSection,
    grid: GridSection,
    #[serde(default)]
    training: TrainingSection,
}

/// Everything `grid` needs.
#[derive(Clone, Debug)]
pub struct GridConfig {
    pub data: DataSource,
    pub spec: GridSpec,
    pub out: Option<PathBuf>,
}

impl GridConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let (f, base): (GridFile, _) = read_toml(path)?;
        let g = f.grid;
        let lambdas = match g.lambdas {
            Some(l) => l,
            None => lambda_grid(g.lambda_min, g.lambda_max, g.lambda_points)?,
        };
        let data = f.data.resolve(&base)?;
        let spec = GridSpec {
            dataset: data.label(),
            split: g.split,
            methods: g.methods,
            sizes: g.sizes,
            lambdas,
            restarts: g.restarts,
            seed: g.seed,
            template: f.training.template(),
        };
        spec.validate().map_err(|e| CliError::Config(format!("[grid] {e}")))?;
        Ok(GridConfig { data, spec, out: f.out.map(|o| base.join(o)) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn default_grid_has_sixteen_lambdas() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write(
            tmp.path(),
            "g.toml",
            "[data]\ngenerator = \"D2\"\nn = 50\n[grid]\nsplit = \"random\"\nmethods = [\"LIT\", \"RRs\"]\nsizes = [2, 3, 5, 8, 13]\n",
        );
        let g = GridConfig::load(&cfg).unwrap();
        let l = &g.spec.lambdas;
        assert_eq!(l.len(), 16);
        assert_eq!((l[0], l[15]), (1e-4, 1e1));
        for w in l.windows(3) {
            assert!((w[1] / w[0] - w[2] / w[1]).abs() < 1e-12);
        }
        assert_eq!(g.spec.restarts, 10);
        assert_eq!(g.spec.dataset, "D2");
        // 10 restarts × (16 λ × 5 sizes for LIT + 5 sizes for RRs)
        assert_eq!(g.spec.cells().len(), 10 * (16 * 5 + 5));
    }

    #[test]
    fn benchmark_preset_with_overrides() {
        let t = TrainingSection { preset: Preset::Benchmark, epochs: Some(7), ..Default::default() };
        let c = t.template();
        assert_eq!((c.hidden, c.activation, c.dropout_rate, c.epochs), (256, Activation::Relu, 0.5, 7));
    }

    #[test]
    fn data_sources_are_exclusive_and_checked() {
        let tmp = tempfile::tempdir().unwrap();
        let both = DataSection { generator: Some("D1".into()), csv: Some("x.csv".into()), ..Default::default() };
        assert!(matches!(both.resolve(tmp.path()), Err(CliError::Config(_))));
        let stray = DataSection { generator: Some("D1".into()), n: Some(10), label: Some("y".into()), ..Default::default() };
        assert!(matches!(stray.resolve(tmp.path()), Err(CliError::Config(m)) if m.contains("label")));
        let missing = DataSection { csv: Some("x.csv".into()), ..Default::default() };
        assert!(matches!(missing.resolve(tmp.path()), Err(CliError::Config(m)) if m.contains("does not exist")));
        write(tmp.path(), "x.csv", "a,label\n1,0\n2,1\n");
        let found = DataSection { csv: Some("x.csv".into()), ..Default::default() };
        let src = found.resolve(tmp.path()).unwrap();
        assert_eq!(src.label(), "x");
        assert_eq!(src.load().unwrap().len(), 2);
    }

    #[test]
    fn generator_names() {
        assert_eq!("d3".parse::<Generator>().unwrap(), Generator::Gaps(GapVariant::D3));
        assert_eq!("Manifold3D".parse::<Generator>().unwrap(), Generator::Manifold);
        assert!("d4".parse::<Generator>().is_err());
    }
}
