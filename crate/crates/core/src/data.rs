//! Datasets: generators, CSV and IDX ingestion, train/test splitting and
//! standardization.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DMatrix;
use crate::models::Task;
use crate::seeding::rng_for;

/// `n` rows of features `x` (`n × p`) with one target each.
///
/// Classification targets are class indices stored as floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix,
    pub y: Vec<f64>,
    pub feature_names: Vec<String>,
    pub task: Task,
}

impl Dataset {
    pub fn new(x: DMatrix, y: Vec<f64>, feature_names: Vec<String>, task: Task) -> Result<Self> {
        let d = Dataset {
            x,
            y,
            feature_names,
            task,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.rows() != self.y.len() {
            return Err(Error::Dimension {
                context: "dataset targets",
                expected: self.x.rows(),
                got: self.y.len(),
            });
        }
        if self.feature_names.len() != self.x.cols() {
            return Err(Error::Dimension {
                context: "feature names",
                expected: self.x.cols(),
                got: self.feature_names.len(),
            });
        }
        if self.x.as_slice().iter().chain(&self.y).any(|v| v.is_nan()) {
            return Err(Error::InvalidArgument("dataset contains NaN".into()));
        }
        let classes = match self.task {
            Task::Regression => None,
            Task::Binary => Some(2),
            Task::Multiclass { classes } => Some(classes),
        };
        if let Some(k) = classes {
            for (row, &label) in self.y.iter().enumerate() {
                if label < 0.0 || label.fract() != 0.0 || label as usize >= k {
                    return Err(Error::LabelOutOfRange {
                        row,
                        label,
                        classes: k,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            feature_names: self.feature_names.clone(),
            task: self.task,
        }
    }

    /// Targets as an `n × 1` matrix.
    pub fn y_matrix(&self) -> DMatrix {
        DMatrix::column_vector(self.y.clone())
    }

    /// Writes a header row then one row per sample; targets in the last column.
    /// Floats use the shortest representation that round-trips exactly.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.feature_names.clone();
        header.push("y".to_string());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| format!("{v:?}")).collect();
            rec.push(format!("{:?}", self.y[i]));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// The 194-point two-spiral classification set.
pub fn gen_two_spiral() -> Dataset {
    let n = 194;
    let mut x = DMatrix::zeros(n, 2);
    let mut y = Vec::with_capacity(n);
    for i in 1..=n {
        let parity = (i % 2) as f64;
        let k = (i - i % 2) as f64;
        let sign = if i % 2 == 1 { -1.0 } else { 1.0 };
        let radius = 6.5 * sign * (1.0 - k / 208.0);
        let angle = k * std::f64::consts::PI / 32.0;
        x.set(i - 1, 0, radius * angle.sin());
        x.set(i - 1, 1, radius * angle.cos());
        y.push(parity);
    }
    Dataset {
        x,
        y,
        feature_names: vec!["x1".into(), "x2".into()],
        task: Task::Binary,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// `y = x³ + 2x + 3 + ε`, `x ~ U[−4, 4]`, `ε ~ N(0, 9)`
    Cubic,
    /// `y = x − 0.3 sin(2πx) + ε`, `x ~ U[0, 0.6]`, `ε ~ N(0, 0.02²)`
    Sine,
}

impl SyntheticKind {
    pub fn noiseless_mean(self, x: f64) -> f64 {
        match self {
            SyntheticKind::Cubic => x * x * x + 2.0 * x + 3.0,
            SyntheticKind::Sine => x - 0.3 * (2.0 * std::f64::consts::PI * x).sin(),
        }
    }

    pub fn input_range(self) -> (f64, f64) {
        match self {
            SyntheticKind::Cubic => (-4.0, 4.0),
            SyntheticKind::Sine => (0.0, 0.6),
        }
    }

    pub fn noise_std(self) -> f64 {
        match self {
            SyntheticKind::Cubic => 3.0,
            SyntheticKind::Sine => 0.02,
        }
    }
}

impl std::str::FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cubic" => Ok(SyntheticKind::Cubic),
            "sine" => Ok(SyntheticKind::Sine),
            other => Err(Error::InvalidArgument(format!("unknown synthetic kind `{other}`"))),
        }
    }
}

pub fn gen_synthetic_1d(kind: SyntheticKind, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs n >= 1".into()));
    }
    let mut rng = rng_for(seed, "synthetic_1d", 0);
    let (lo, hi) = kind.input_range();
    let noise = Normal::new(0.0, kind.noise_std()).expect("positive std");
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.random_range(lo..hi);
        xs.push(x);
        ys.push(kind.noiseless_mean(x) + noise.sample(&mut rng));
    }
    Ok(Dataset {
        x: DMatrix::column_vector(xs),
        y: ys,
        feature_names: vec!["x".into()],
        task: Task::Regression,
    })
}

/// `y = slope·x + N(0, noise_std²)` with `x ~ U[−2, 2]`.
pub fn gen_linear_gaussian(n: usize, slope: f64, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("linear dataset needs n >= 1".into()));
    }
    let noise = Normal::new(0.0, noise_std)
        .map_err(|e| Error::InvalidArgument(format!("noise std {noise_std}: {e}")))?;
    let mut rng = rng_for(seed, "linear_gaussian", 0);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let ys = xs.iter().map(|x| slope * x + noise.sample(&mut rng)).collect();
    Ok(Dataset {
        x: DMatrix::column_vector(xs),
        y: ys,
        feature_names: vec!["x".into()],
        task: Task::Regression,
    })
}

/// Which CSV column is the target, and which are features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: String,
    /// All non-target columns when absent.
    #[serde(default)]
    pub features: Option<Vec<String>>,
    #[serde(default = "default_task")]
    pub task: Task,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_task() -> Task {
    Task::Regression
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn regression(target: &str) -> Self {
        CsvSchema {
            target: target.to_string(),
            features: None,
            task: Task::Regression,
            delimiter: ',',
        }
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    read_csv(file, path, schema)
}

pub fn read_csv<R: Read>(input: R, path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Empty(format!("{} has no header row", path.display())));
    }
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found in {}", path.display())))
    };
    let target_idx = col(&schema.target)?;
    let feature_names: Vec<String> = match &schema.features {
        Some(f) => f.clone(),
        None => headers.iter().filter(|h| **h != schema.target).cloned().collect(),
    };
    let feature_idx = feature_names.iter().map(|f| col(f)).collect::<Result<Vec<_>>>()?;

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            let cell = rec.get(i).unwrap_or("");
            cell.parse::<f64>().map_err(|e| Error::Parse {
                path: PathBuf::from(path),
                row: row + 1,
                column: headers[i].clone(),
                detail: format!("`{cell}`: {e}"),
            })
        };
        for &i in &feature_idx {
            xs.push(parse(i)?);
        }
        ys.push(parse(target_idx)?);
    }
    if ys.is_empty() {
        return Err(Error::Empty(format!("{} has no data rows", path.display())));
    }
    let n = ys.len();
    let checksum: f64 = xs.iter().chain(&ys).sum();
    log::info!(
        "loaded {}: {n} rows, {} features, value checksum {checksum:.6e}",
        path.display(),
        feature_names.len()
    );
    Dataset::new(
        DMatrix::from_vec(n, feature_names.len(), xs),
        ys,
        feature_names,
        schema.task,
    )
}

/// Training-split statistics for standardizing features and targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    /// Targets are multiplied by this before standardization.
    pub y_scale: f64,
    pub normalize_target: bool,
    /// Columns whose training std was zero (left unscaled).
    pub constant_columns: Vec<usize>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl NormStats {
    /// The identity transform on `p` features.
    pub fn identity(p: usize) -> Self {
        NormStats {
            x_mean: vec![0.0; p],
            x_std: vec![1.0; p],
            y_mean: 0.0,
            y_std: 1.0,
            y_scale: 1.0,
            normalize_target: false,
            constant_columns: vec![],
        }
    }

    /// Fits on a training split. Classification targets are left untouched.
    pub fn fit(train: &Dataset, y_scale: f64) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("cannot fit normalization on an empty split".into()));
        }
        let p = train.feature_dim();
        let mut x_mean = Vec::with_capacity(p);
        let mut x_std = Vec::with_capacity(p);
        let mut constant_columns = Vec::new();
        for j in 0..p {
            let (m, s) = mean_std((0..train.len()).map(|i| train.x.get(i, j)));
            x_mean.push(m);
            if s > 0.0 {
                x_std.push(s);
            } else {
                log::warn!("feature column {j} is constant on the training split; leaving it unscaled");
                constant_columns.push(j);
                x_std.push(1.0);
            }
        }
        let normalize_target = train.task == Task::Regression;
        let (mut y_mean, mut y_std) = (0.0, 1.0);
        if normalize_target {
            let (m, s) = mean_std(train.y.iter().map(|y| y * y_scale));
            y_mean = m;
            y_std = if s > 0.0 { s } else { 1.0 };
        }
        Ok(NormStats {
            x_mean,
            x_std,
            y_mean,
            y_std,
            y_scale,
            normalize_target,
            constant_columns,
        })
    }

    pub fn apply_features(&self, x: &DMatrix) -> Result<DMatrix> {
        if x.cols() != self.x_mean.len() {
            return Err(Error::Dimension {
                context: "normalization features",
                expected: self.x_mean.len(),
                got: x.cols(),
            });
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.x_mean[j]) / self.x_std[j];
            }
        }
        Ok(out)
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        if self.normalize_target {
            (y * self.y_scale - self.y_mean) / self.y_std
        } else {
            y
        }
    }

    /// Maps a normalized prediction back to the original target units.
    pub fn denormalize(&self, y: f64) -> f64 {
        if self.normalize_target {
            (y * self.y_std + self.y_mean) / self.y_scale
        } else {
            y
        }
    }

    /// Maps a normalized spread (std, interval width) back to original units.
    pub fn denormalize_scale(&self, s: f64) -> f64 {
        if self.normalize_target {
            s * self.y_std / self.y_scale
        } else {
            s
        }
    }

    /// Response after the optional ×scale step but before standardization.
    pub fn scaled_target(&self, y: f64) -> f64 {
        if self.normalize_target {
            y * self.y_scale
        } else {
            y
        }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        Ok(Dataset {
            x: self.apply_features(&data.x)?,
            y: data.y.iter().map(|&y| self.normalize_target(y)).collect(),
            feature_names: data.feature_names.clone(),
            task: data.task,
        })
    }
}

/// Seeded random split with `floor(n · train_frac)` training rows.
pub fn split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("cannot split {n} rows")));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_frac} must lie in (0, 1)")));
    }
    let n_train = (n as f64 * train_frac).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} rows at {train_frac} leaves an empty side"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_for(seed, "split", 0));
    Ok((data.subset(&idx[..n_train]), data.subset(&idx[n_train..])))
}

/// `value / divisor` for byte-valued pixels.
pub fn scale_pixels(pixels: &[u8], divisor: f64) -> Vec<f64> {
    pixels.iter().map(|&p| p as f64 / divisor).collect()
}

/// A decoded IDX image file: `count` images of `rows × cols` bytes.
#[derive(Debug, Clone)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32_be(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

pub fn parse_idx_images(buf: &[u8]) -> Result<IdxImages> {
    if read_u32_be(buf, 0)? != 0x0000_0803 {
        return Err(Error::Format("not an IDX image file (magic 0x803)".into()));
    }
    let count = read_u32_be(buf, 4)? as usize;
    let rows = read_u32_be(buf, 8)? as usize;
    let cols = read_u32_be(buf, 12)? as usize;
    let body = &buf[16..];
    if body.len() != count * rows * cols {
        return Err(Error::Format(format!(
            "IDX image file declares {count}x{rows}x{cols} but holds {} bytes",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<u8>> {
    if read_u32_be(buf, 0)? != 0x0000_0801 {
        return Err(Error::Format("not an IDX label file (magic 0x801)".into()));
    }
    let count = read_u32_be(buf, 4)? as usize;
    let body = &buf[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "IDX label file declares {count} labels but holds {}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

/// Reads a file, gunzipping it when the name ends in `.gz`.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Loads an IDX image/label pair as a 10-class dataset with pixels divided by
/// `divisor`, keeping at most `limit` images (the first ones in file order).
pub fn load_idx_dataset(images: &Path, labels: &Path, limit: Option<usize>, divisor: f64) -> Result<Dataset> {
    let imgs = parse_idx_images(&read_maybe_gz(images)?)?;
    let labs = parse_idx_labels(&read_maybe_gz(labels)?)?;
    if imgs.count != labs.len() {
        return Err(Error::Dimension {
            context: "IDX labels",
            expected: imgs.count,
            got: labs.len(),
        });
    }
    let n = limit.map_or(imgs.count, |l| l.min(imgs.count));
    let p = imgs.rows * imgs.cols;
    let x = DMatrix::from_vec(n, p, scale_pixels(&imgs.pixels[..n * p], divisor));
    let y = labs[..n].iter().map(|&l| l as f64).collect();
    let classes = 10;
    Dataset::new(
        x,
        y,
        (0..p).map(|k| format!("px{k}")).collect(),
        Task::Multiclass { classes },
    )
}
