//! Experiment configuration (JSON) and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use naeb_core::data::{CsvSchema, SyntheticKind};
use naeb_core::models::{Activation, NoiseModel};
use naeb_core::training::TrainConfig;
use naeb_core::variational::PriorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    /// Every random stream is derived from this seed.
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Standard normal when absent.
    #[serde(default)]
    pub prior: Option<PriorConfig>,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub predict: Option<PredictConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: SourceConfig,
    /// Without a split the model is trained and evaluated on the whole set
    /// (or on the IDX test files when given).
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default = "default_true")]
    pub normalize: bool,
    /// Regression targets are multiplied by this before standardization.
    #[serde(default = "default_one")]
    pub target_scale: f64,
}

fn default_true() -> bool {
    true
}

fn default_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    TwoSpiral,
    Synthetic1d {
        function: SyntheticKind,
        n: usize,
    },
    LinearGaussian {
        n: usize,
        slope: f64,
        noise_std: f64,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        #[serde(default = "default_pixel_divisor")]
        pixel_divisor: f64,
    },
}

fn default_pixel_divisor() -> f64 {
    126.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_train_frac")]
    pub train_frac: f64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
}

fn default_train_frac() -> f64 {
    0.9
}

fn default_repetitions() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths of the base network; input and output sizes come from the data.
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    /// Regression only.
    #[serde(default = "default_noise")]
    pub noise: NoiseModel,
    pub hypernet: HypernetConfig,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_noise() -> NoiseModel {
    NoiseModel::Learned
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum HypernetConfig {
    /// ReLU MLP from `ℝ^r` to the base weights; `r` defaults to 10× the feature count.
    Mlp {
        #[serde(default)]
        hidden: Vec<usize>,
        #[serde(default)]
        latent_dim: Option<usize>,
    },
    /// Fixed map `w = A z + b` (`A` given row by row); implies a frozen hypernetwork.
    FixedLinear { a: Vec<Vec<f64>>, b: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rmse,
    Nll,
    Qice,
    ErrorRate,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Nll => "nll",
            Metric::Qice => "qice",
            Metric::ErrorRate => "error_rate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Posterior draws `M` for the predictive.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    /// Defaults to RMSE, NLL and QICE for regression, error rate and NLL otherwise.
    #[serde(default)]
    pub metrics: Option<Vec<Metric>>,
    #[serde(default = "default_bins")]
    pub qice_bins: usize,
}

fn default_draws() -> usize {
    100
}

fn default_level() -> f64 {
    0.95
}

fn default_bins() -> usize {
    10
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            draws: default_draws(),
            level: default_level(),
            metrics: None,
            qice_bins: default_bins(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// CSV of feature columns (header required, names as in the dataset).
    #[serde(default)]
    pub inputs: Option<PathBuf>,
    /// Evenly spaced 1-D inputs, used when `inputs` is absent.
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub draws: Option<usize>,
    /// Adds sampled observation noise to regression draws.
    #[serde(default)]
    pub with_noise: bool,
    /// Also writes every draw to `samples.csv`.
    #[serde(default)]
    pub dump_samples: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl ExperimentConfig {
    /// Parses JSON and resolves relative paths against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self, Vec<String>> {
        let mut cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| vec![format!("config does not parse: {e}")])?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Vec<String>> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| vec![format!("cannot read config {}: {e}", path.display())])?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, dir)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset.source {
            SourceConfig::Csv { path, .. } => fix(path),
            SourceConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(train_images);
                fix(train_labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
            _ => {}
        }
        if let Some(p) = self.predict.as_mut().and_then(|p| p.inputs.as_mut()) {
            fix(p);
        }
    }

    /// Every data-independent problem, each naming its field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = &self.dataset;
        match &d.source {
            SourceConfig::TwoSpiral => {}
            SourceConfig::Synthetic1d { n, .. } => {
                if *n == 0 {
                    out.push("dataset.source.n must be >= 1".into());
                }
            }
            SourceConfig::LinearGaussian { n, slope, noise_std } => {
                if *n == 0 {
                    out.push("dataset.source.n must be >= 1".into());
                }
                if !slope.is_finite() {
                    out.push("dataset.source.slope must be finite".into());
                }
                if !(*noise_std > 0.0 && noise_std.is_finite()) {
                    out.push(format!("dataset.source.noise_std must be positive, got {noise_std}"));
                }
            }
            SourceConfig::Csv { path, schema } => {
                if !path.is_file() {
                    out.push(format!("dataset.source.path: file {} does not exist", path.display()));
                }
                if schema.target.is_empty() {
                    out.push("dataset.source.schema.target must name a column".into());
                }
            }
            SourceConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                pixel_divisor,
                train_limit,
                ..
            } => {
                for (field, p) in [
                    ("train_images", Some(train_images)),
                    ("train_labels", Some(train_labels)),
                    ("test_images", test_images.as_ref()),
                    ("test_labels", test_labels.as_ref()),
                ] {
                    if let Some(p) = p {
                        if !p.is_file() {
                            out.push(format!("dataset.source.{field}: file {} does not exist", p.display()));
                        }
                    }
                }
                if test_images.is_some() != test_labels.is_some() {
                    out.push("dataset.source.test_labels and test_images must be given together".into());
                }
                if !(*pixel_divisor > 0.0) {
                    out.push(format!("dataset.source.pixel_divisor must be positive, got {pixel_divisor}"));
                }
                if *train_limit == Some(0) {
                    out.push("dataset.source.train_limit must be >= 1".into());
                }
                if test_images.is_some() && d.split.is_some() {
                    out.push("dataset.split must be absent when IDX test files are given".into());
                }
            }
        }
        if let Some(s) = &d.split {
            if !(s.train_frac > 0.0 && s.train_frac < 1.0) {
                out.push(format!("dataset.split.train_frac must lie in (0, 1), got {}", s.train_frac));
            }
            if s.repetitions == 0 {
                out.push("dataset.split.repetitions must be >= 1".into());
            }
        }
        if !(d.target_scale > 0.0 && d.target_scale.is_finite()) {
            out.push(format!("dataset.target_scale must be positive, got {}", d.target_scale));
        }

        let m = &self.model;
        if m.hidden.contains(&0) {
            out.push("model.hidden widths must be >= 1".into());
        }
        if let NoiseModel::Fixed(s) = m.noise {
            if !(s > 0.0 && s.is_finite()) {
                out.push(format!("model.noise must be a positive std, got {s}"));
            }
        }
        match &m.hypernet {
            HypernetConfig::Mlp { hidden, latent_dim } => {
                if hidden.contains(&0) {
                    out.push("model.hypernet.hidden widths must be >= 1".into());
                }
                if *latent_dim == Some(0) {
                    out.push("model.hypernet.latent_dim must be >= 1".into());
                }
            }
            HypernetConfig::FixedLinear { a, b } => {
                if a.is_empty() || a[0].is_empty() {
                    out.push("model.hypernet.a must be a non-empty matrix".into());
                } else if a.iter().any(|row| row.len() != a[0].len()) {
                    out.push("model.hypernet.a rows must all have the same length".into());
                }
                if b.len() != a.len() {
                    out.push(format!(
                        "model.hypernet.b has {} entries but a has {} rows",
                        b.len(),
                        a.len()
                    ));
                }
                if a.iter().flatten().chain(b).any(|v| !v.is_finite()) {
                    out.push("model.hypernet.a and b must be finite".into());
                }
                if self.train.train_eta {
                    out.push("train.train_eta must be false for a fixed_linear hypernet".into());
                }
            }
        }

        if let Some(p) = &self.prior {
            if p.mu.len() != p.zeta.len() {
                out.push(format!(
                    "prior.zeta has {} entries but prior.mu has {}",
                    p.zeta.len(),
                    p.mu.len()
                ));
            }
            if p.zeta.iter().any(|z| !(*z > 0.0 && z.is_finite())) {
                out.push("prior.zeta entries must be positive".into());
            }
            if p.mu.iter().any(|v| !v.is_finite()) {
                out.push("prior.mu entries must be finite".into());
            }
        }

        out.extend(self.train.problems("train"));

        let e = &self.eval;
        if e.draws == 0 {
            out.push("eval.draws must be >= 1".into());
        }
        if !(e.level > 0.0 && e.level < 1.0) {
            out.push(format!("eval.level must lie in (0, 1), got {}", e.level));
        } else {
            let needed = (1.0 / (1.0 - e.level) - 1e-9).ceil() as usize;
            if e.draws < needed {
                out.push(format!(
                    "eval.draws must be >= {needed} for a {} credible interval",
                    e.level
                ));
            }
        }
        if e.qice_bins == 0 {
            out.push("eval.qice_bins must be >= 1".into());
        }
        if let Some(metrics) = &e.metrics {
            if metrics.contains(&Metric::Qice) && e.draws < e.qice_bins {
                out.push(format!(
                    "eval.draws must be >= eval.qice_bins ({}) for QICE",
                    e.qice_bins
                ));
            }
        }

        if let Some(p) = &self.predict {
            match (&p.inputs, &p.grid) {
                (Some(path), _) => {
                    if !path.is_file() {
                        out.push(format!("predict.inputs: file {} does not exist", path.display()));
                    }
                }
                (None, Some(g)) => {
                    if g.points == 0 {
                        out.push("predict.grid.points must be >= 1".into());
                    }
                    if !(g.lo.is_finite() && g.hi.is_finite() && g.lo <= g.hi) {
                        out.push("predict.grid needs finite lo <= hi".into());
                    }
                }
                (None, None) => out.push("predict needs either inputs or grid".into()),
            }
            if p.draws == Some(0) {
                out.push("predict.draws must be >= 1".into());
            }
        }
        out
    }
}
