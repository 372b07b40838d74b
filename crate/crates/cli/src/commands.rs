//! The `generate`, `train`, `eval` and `predict` commands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;

use naeb_core::data::{
    gen_linear_gaussian, gen_synthetic_1d, gen_two_spiral, load_csv, load_idx_dataset, split, Dataset, NormStats,
};
use naeb_core::eval::{
    classify, credible_interval, metric_error_rate, metric_nll, metric_qice, metric_rmse, predictive_samples,
    summarize, MetricsReport, PredictMode, PredictiveSamples,
};
use naeb_core::linalg::DMatrix;
use naeb_core::models::{BaseNetSpec, Hypernet, HypernetSpec, Task};
use naeb_core::seeding::{derive_seed, rng_for};
use naeb_core::training::{train, train_from, FittedModel, TraceRow};
use naeb_core::variational::{PriorConfig, VariationalParams};
use naeb_core::Error as CoreError;

use crate::config::{ExperimentConfig, HypernetConfig, Metric, SourceConfig};

pub const METRICS_JSON: &str = "metrics.json";
pub const TRACE_CSV: &str = "trace.csv";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const INTERVALS_CSV: &str = "intervals.csv";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const NORM_JSON: &str = "norm.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    fn config(msg: impl Into<String>) -> Self {
        CliError::Config(vec![msg.into()])
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Divergence { .. } => CliError::Divergence(e.to_string()),
            CoreError::Schema(_)
            | CoreError::Parse { .. }
            | CoreError::LabelOutOfRange { .. }
            | CoreError::Dimension { .. }
            | CoreError::Empty(_)
            | CoreError::Format(_)
            | CoreError::InvalidArgument(_) => CliError::config(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// One train/evaluation split, before and after normalization.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub index: usize,
    pub norm: NormStats,
    pub train: Dataset,
    /// Held-out rows in original units; the training rows when there is no test set.
    pub eval_raw: Dataset,
}

/// Everything derived from a validated config before any training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub base: BaseNetSpec,
    pub hyper: HypernetSpec,
    /// `Some` for a fixed (frozen) hypernetwork.
    pub fixed_hypernet: Option<Hypernet>,
    pub prior: PriorConfig,
    pub data: Dataset,
    pub test: Option<Dataset>,
    pub splits: Vec<SplitData>,
}

/// Loads the raw data (and the separate test set, if any).
pub fn load_data(cfg: &ExperimentConfig) -> CliResult<(Dataset, Option<Dataset>)> {
    let data_seed = derive_seed(cfg.seed, "data", 0);
    Ok(match &cfg.dataset.source {
        SourceConfig::TwoSpiral => (gen_two_spiral(), None),
        SourceConfig::Synthetic1d { function, n } => (gen_synthetic_1d(*function, *n, data_seed)?, None),
        SourceConfig::LinearGaussian { n, slope, noise_std } => {
            (gen_linear_gaussian(*n, *slope, *noise_std, data_seed)?, None)
        }
        SourceConfig::Csv { path, schema } => (load_csv(path, schema)?, None),
        SourceConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
            pixel_divisor,
        } => {
            let train = load_idx_dataset(train_images, train_labels, *train_limit, *pixel_divisor)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(load_idx_dataset(i, l, *test_limit, *pixel_divisor)?),
                _ => None,
            };
            (train, test)
        }
    })
}

fn output_dim(task: Task) -> usize {
    match task {
        Task::Regression | Task::Binary => 1,
        Task::Multiclass { classes } => classes,
    }
}

/// Validates `cfg` fully, loads the data and builds every split.
/// No training happens here; all problems are reported together.
pub fn prepare(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let (data, test) = load_data(cfg)?;
    let mut problems = Vec::new();
    let p = data.feature_dim();
    if let Some(t) = &test {
        if t.feature_dim() != p {
            problems.push(format!(
                "dataset.source.test_images have {} features but the training images have {p}",
                t.feature_dim()
            ));
        }
    }

    let mut layer_dims = vec![p];
    layer_dims.extend_from_slice(&cfg.model.hidden);
    layer_dims.push(output_dim(data.task));
    let base = BaseNetSpec::new(layer_dims, cfg.model.activation, data.task)?.with_noise(cfg.model.noise);
    let d = base.weight_count();

    let (hyper, fixed_hypernet) = match &cfg.model.hypernet {
        HypernetConfig::Mlp { hidden, latent_dim } => {
            let r = latent_dim.unwrap_or_else(|| HypernetSpec::default_latent_dim(p));
            (HypernetSpec::new(r, hidden, d), None)
        }
        HypernetConfig::FixedLinear { a, b } => {
            if a.len() != d {
                problems.push(format!(
                    "model.hypernet.a has {} rows but the base network has {d} weights",
                    a.len()
                ));
            }
            let r = a[0].len();
            let flat: Vec<f64> = a.iter().flatten().copied().collect();
            let h = if flat.len() == a.len() * r {
                Some(Hypernet::linear(&DMatrix::from_vec(a.len(), r, flat), b)?)
            } else {
                None
            };
            (HypernetSpec::new(r, &[], a.len()), h)
        }
    };
    let r = hyper.latent_dim();
    let prior = cfg.prior.clone().unwrap_or_else(|| PriorConfig::standard(r));
    if prior.dim() != r {
        problems.push(format!("prior.mu has {} entries but the latent dimension is {r}", prior.dim()));
    }

    let regression = data.task == Task::Regression;
    for m in cfg.eval.metrics.iter().flatten() {
        match m {
            Metric::Rmse | Metric::Qice if !regression => {
                problems.push(format!("eval.metrics: {} needs a regression task", m.name()))
            }
            Metric::ErrorRate if regression => {
                problems.push("eval.metrics: error_rate needs a classification task".into())
            }
            _ => {}
        }
    }
    if let Some(pred) = &cfg.predict {
        if pred.inputs.is_none() && p != 1 {
            problems.push(format!("predict.grid needs a single feature, the data has {p}"));
        }
    }
    if let Some(s) = &cfg.dataset.split {
        let n_train = (data.len() as f64 * s.train_frac).floor() as usize;
        if n_train == 0 || n_train == data.len() {
            problems.push(format!(
                "dataset.split.train_frac {} leaves an empty side for {} rows",
                s.train_frac,
                data.len()
            ));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }

    let mut splits = Vec::new();
    let reps = cfg.dataset.split.as_ref().map_or(1, |s| s.repetitions);
    for index in 0..reps {
        let (train_raw, eval_raw) = match (&cfg.dataset.split, &test) {
            (Some(s), _) => split(&data, s.train_frac, derive_seed(cfg.seed, "split", index as u64))?,
            (None, Some(t)) => (data.clone(), t.clone()),
            (None, None) => (data.clone(), data.clone()),
        };
        let norm = if cfg.dataset.normalize {
            NormStats::fit(&train_raw, cfg.dataset.target_scale)?
        } else {
            NormStats::identity(p)
        };
        splits.push(SplitData {
            index,
            train: norm.apply(&train_raw)?,
            norm,
            eval_raw,
        });
    }

    Ok(Prepared {
        config: cfg.clone(),
        base,
        hyper,
        fixed_hypernet,
        prior,
        data,
        test,
        splits,
    })
}

fn split_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("split_{index}"))
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the generated (or loaded) data as CSV.
pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<PathBuf>> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let (data, test) = load_data(cfg)?;
    fs::create_dir_all(out)?;
    let mut written = vec![out.join("data.csv")];
    data.save_csv(&written[0])?;
    if let Some(t) = test {
        written.push(out.join("test.csv"));
        t.save_csv(&written[1])?;
    }
    info!("wrote {} rows to {}", data.len(), written[0].display());
    Ok(written)
}

/// Trains one model per split; checkpoints go to `out/split_<s>/`.
pub fn cmd_train(prep: &Prepared, out: &Path) -> CliResult<Vec<FittedModel>> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&prep.config)?)?;
    let mut models = Vec::new();
    for s in &prep.splits {
        let mut tc = prep.config.train.clone();
        tc.seed = derive_seed(prep.config.seed, "train", s.index as u64);
        info!(
            "split {}: training on {} rows, {} base weights, latent dim {}",
            s.index,
            s.train.len(),
            prep.base.weight_count(),
            prep.hyper.latent_dim()
        );
        let model = match &prep.fixed_hypernet {
            Some(h) => {
                let mut rng = rng_for(tc.seed, "init", 0);
                let alpha = VariationalParams::init_uniform(h.latent_dim(), &mut rng);
                train_from(&prep.base, h.clone(), alpha, &prep.prior, &s.train, &tc)?
            }
            None => train(&prep.base, &prep.hyper, &prep.prior, &s.train, &tc)?,
        };
        let dir = split_dir(out, s.index);
        model.save(&dir)?;
        fs::write(dir.join(NORM_JSON), serde_json::to_string_pretty(&s.norm)?)?;
        model.write_trace_csv(fs::File::create(dir.join(TRACE_CSV))?)?;
        if let Some(last) = model.trace.last() {
            info!("split {}: final ELBO probe {:.4}", s.index, last.elbo_estimate);
        }
        models.push(model);
    }
    write_combined_trace(&out.join(TRACE_CSV), &models)?;
    Ok(models)
}

fn write_combined_trace(path: &Path, models: &[FittedModel]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["split", "epoch", "elbo_estimate", "penalty", "wallclock"])?;
    for (s, m) in models.iter().enumerate() {
        for TraceRow {
            epoch,
            elbo_estimate,
            penalty,
            wallclock,
        } in &m.trace
        {
            w.write_record([s.to_string(), epoch.to_string(), fmt(*elbo_estimate), fmt(*penalty), fmt(*wallclock)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads the checkpoint of split `index` and checks it against the config.
pub fn load_checkpoint(prep: &Prepared, root: &Path, index: usize) -> CliResult<(FittedModel, NormStats)> {
    let dir = split_dir(root, index);
    if !dir.is_dir() {
        return Err(CliError::config(format!("checkpoint directory {} does not exist", dir.display())));
    }
    let model = FittedModel::load(&dir)?;
    let norm: NormStats = serde_json::from_str(&fs::read_to_string(dir.join(NORM_JSON))?)?;
    let mut problems = Vec::new();
    if model.base != prep.base {
        problems.push(format!(
            "checkpoint base network {:?} does not match the configured {:?}",
            model.base.layer_dims, prep.base.layer_dims
        ));
    }
    if model.hypernet.spec != prep.hyper {
        problems.push(format!(
            "checkpoint hypernetwork {:?} does not match the configured {:?}",
            model.hypernet.spec.layer_dims, prep.hyper.layer_dims
        ));
    }
    if norm.x_mean.len() != prep.data.feature_dim() {
        problems.push(format!(
            "checkpoint normalization covers {} features, the data has {}",
            norm.x_mean.len(),
            prep.data.feature_dim()
        ));
    }
    if problems.is_empty() {
        Ok((model, norm))
    } else {
        Err(CliError::Config(problems))
    }
}

fn default_metrics(task: Task) -> Vec<Metric> {
    match task {
        Task::Regression => vec![Metric::Rmse, Metric::Nll, Metric::Qice],
        _ => vec![Metric::ErrorRate, Metric::Nll],
    }
}

/// Metrics of one split on its evaluation rows, in original target units.
pub fn evaluate_split(
    prep: &Prepared,
    model: &FittedModel,
    norm: &NormStats,
    s: &SplitData,
    out_csv: Option<&Path>,
) -> CliResult<BTreeMap<Metric, f64>> {
    let e = &prep.config.eval;
    let metrics = e.metrics.clone().unwrap_or_else(|| default_metrics(prep.base.task));
    let x = norm.apply_features(&s.eval_raw.x)?;
    let targets = &s.eval_raw.y;
    let mut rng = rng_for(prep.config.seed, "eval", s.index as u64);
    let regression = prep.base.task == Task::Regression;
    let mode = if regression {
        PredictMode::WithNoise
    } else {
        PredictMode::MeanOnly
    };
    let pred = predictive_samples(model, &x, e.draws, &mut rng, mode)?.denormalize(norm);

    let mut values = BTreeMap::new();
    for m in metrics {
        let v = match m {
            Metric::Rmse => metric_rmse(&pred.mean_prediction()?, targets)?,
            Metric::Nll => metric_nll(&pred, targets)?,
            Metric::Qice => match &pred {
                PredictiveSamples::Regression(r) => {
                    metric_qice(targets, r.observed.as_ref().expect("with-noise draws"), e.qice_bins)?
                }
                PredictiveSamples::Classification(_) => unreachable!("validated"),
            },
            Metric::ErrorRate => {
                let avg = pred.average_probs()?;
                let labels: Vec<usize> = (0..avg.rows()).map(|i| classify(avg.row(i))).collect();
                metric_error_rate(&labels, targets)?
            }
        };
        values.insert(m, v);
    }
    if let Some(path) = out_csv {
        write_eval_rows(path, &pred, targets, e.level)?;
    }
    Ok(values)
}

fn write_eval_rows(path: &Path, pred: &PredictiveSamples, targets: &[f64], level: f64) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    match pred {
        PredictiveSamples::Regression(_) => {
            w.write_record(["row", "target", "mean", "lo", "hi"])?;
            let mean = pred.mean_prediction()?;
            for (i, (&t, &m)) in targets.iter().zip(&mean).enumerate() {
                let ci = credible_interval(&pred.draws_at(i, 0), level)?;
                w.write_record([i.to_string(), fmt(t), fmt(m), fmt(ci.lo), fmt(ci.hi)])?;
            }
        }
        PredictiveSamples::Classification(_) => {
            let avg = pred.average_probs()?;
            let mut header = vec!["row".to_string(), "target".into(), "predicted".into()];
            header.extend((0..avg.cols()).map(|k| format!("p_{k}")));
            w.write_record(&header)?;
            for (i, &t) in targets.iter().enumerate() {
                let mut rec = vec![i.to_string(), fmt(t), classify(avg.row(i)).to_string()];
                rec.extend(avg.row(i).iter().map(|&p| fmt(p)));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Evaluates every split checkpoint under `checkpoint` and writes
/// `metrics.json` plus one `eval_split_<s>.csv` per split into `out`.
pub fn cmd_eval(prep: &Prepared, checkpoint: &Path, out: &Path) -> CliResult<MetricsReport> {
    fs::create_dir_all(out)?;
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in &prep.splits {
        let (model, norm) = load_checkpoint(prep, checkpoint, s.index)?;
        let csv_path = out.join(format!("eval_split_{}.csv", s.index));
        let values = evaluate_split(prep, &model, &norm, s, Some(&csv_path))?;
        for (m, v) in values {
            info!("split {}: {} = {v:.6}", s.index, m.name());
            per_metric.entry(m.name().to_string()).or_default().push(v);
        }
    }
    let report = summarize(per_metric);
    let mut f = fs::File::create(out.join(METRICS_JSON))?;
    f.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(report)
}

/// Feature rows for `predict`: the inputs CSV or the configured grid.
pub fn predict_inputs(prep: &Prepared) -> CliResult<(Vec<String>, DMatrix)> {
    let pred = prep
        .config
        .predict
        .as_ref()
        .ok_or_else(|| CliError::config("predict block is missing from the config"))?;
    let names = prep.data.feature_names.clone();
    if let Some(path) = &pred.inputs {
        let mut rdr = csv::Reader::from_path(path)?;
        let header = rdr.headers()?.clone();
        let mut cols = Vec::with_capacity(names.len());
        for n in &names {
            let j = header.iter().position(|h| h == n).ok_or_else(|| {
                CliError::config(format!("predict.inputs: column `{n}` missing from {}", path.display()))
            })?;
            cols.push(j);
        }
        let mut values = Vec::new();
        let mut rows = 0;
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (&j, n) in cols.iter().zip(&names) {
                let v: f64 = rec.get(j).unwrap_or("").trim().parse().map_err(|_| {
                    CliError::config(format!("predict.inputs: row {}, column `{n}` is not a number", r + 1))
                })?;
                values.push(v);
            }
            rows += 1;
        }
        if rows == 0 {
            return Err(CliError::config(format!("predict.inputs: {} has no rows", path.display())));
        }
        Ok((names, DMatrix::from_vec(rows, cols.len(), values)))
    } else {
        let g = pred.grid.as_ref().expect("validated");
        let step = if g.points > 1 {
            (g.hi - g.lo) / (g.points - 1) as f64
        } else {
            0.0
        };
        let xs = (0..g.points).map(|i| g.lo + step * i as f64).collect();
        Ok((names, DMatrix::column_vector(xs)))
    }
}

/// Predictive means and shortest credible intervals at the `predict` inputs,
/// using the checkpoint of split `split_index`.
pub fn cmd_predict(prep: &Prepared, checkpoint: &Path, split_index: usize, out: &Path) -> CliResult<PredictiveSamples> {
    if split_index >= prep.splits.len() {
        return Err(CliError::config(format!(
            "--split {split_index} is out of range for {} splits",
            prep.splits.len()
        )));
    }
    let pcfg = prep
        .config
        .predict
        .as_ref()
        .ok_or_else(|| CliError::config("predict block is missing from the config"))?;
    let (names, x_raw) = predict_inputs(prep)?;
    let (model, norm) = load_checkpoint(prep, checkpoint, split_index)?;
    let x = norm.apply_features(&x_raw)?;
    let draws = pcfg.draws.unwrap_or(prep.config.eval.draws);
    let level = prep.config.eval.level;
    let mode = if pcfg.with_noise {
        PredictMode::WithNoise
    } else {
        PredictMode::MeanOnly
    };
    let mut rng = rng_for(prep.config.seed, "predict", split_index as u64);
    let pred = predictive_samples(&model, &x, draws, &mut rng, mode)?.denormalize(&norm);

    fs::create_dir_all(out)?;
    let mut pw = csv::Writer::from_path(out.join(PREDICTIONS_CSV))?;
    let mut iw = csv::Writer::from_path(out.join(INTERVALS_CSV))?;
    let classes = match &pred {
        PredictiveSamples::Regression(_) => 1,
        PredictiveSamples::Classification(c) => c.probs[0].cols(),
    };
    let mut ph = names.clone();
    let mut ih = names.clone();
    match &pred {
        PredictiveSamples::Regression(_) => {
            ph.push("mean".into());
            ih.extend(["lo".to_string(), "hi".into()]);
        }
        PredictiveSamples::Classification(_) => {
            ph.extend((0..classes).map(|k| format!("p_{k}")));
            ph.push("predicted".into());
            for k in 0..classes {
                ih.extend([format!("lo_{k}"), format!("hi_{k}")]);
            }
        }
    }
    pw.write_record(&ph)?;
    iw.write_record(&ih)?;
    let means = match &pred {
        PredictiveSamples::Regression(_) => Some(pred.mean_prediction()?),
        PredictiveSamples::Classification(_) => None,
    };
    let avg = match &pred {
        PredictiveSamples::Classification(_) => Some(pred.average_probs()?),
        PredictiveSamples::Regression(_) => None,
    };
    for i in 0..x_raw.rows() {
        let feats: Vec<String> = x_raw.row(i).iter().map(|&v| fmt(v)).collect();
        let mut prec = feats.clone();
        let mut irec = feats;
        match (&means, &avg) {
            (Some(m), _) => prec.push(fmt(m[i])),
            (_, Some(a)) => {
                prec.extend(a.row(i).iter().map(|&p| fmt(p)));
                prec.push(classify(a.row(i)).to_string());
            }
            _ => unreachable!(),
        }
        for k in 0..classes {
            let ci = credible_interval(&pred.draws_at(i, k), level)?;
            irec.extend([fmt(ci.lo), fmt(ci.hi)]);
        }
        pw.write_record(&prec)?;
        iw.write_record(&irec)?;
    }
    pw.flush()?;
    iw.flush()?;

    if pcfg.dump_samples {
        let mut sw = csv::Writer::from_path(out.join(SAMPLES_CSV))?;
        sw.write_record(["row", "draw", "class", "value"])?;
        for i in 0..x_raw.rows() {
            for k in 0..classes {
                for (m, v) in pred.draws_at(i, k).into_iter().enumerate() {
                    sw.write_record([i.to_string(), m.to_string(), k.to_string(), fmt(v)])?;
                }
            }
        }
        sw.flush()?;
    }
    info!("wrote predictions for {} inputs to {}", x_raw.rows(), out.display());
    Ok(pred)
}
