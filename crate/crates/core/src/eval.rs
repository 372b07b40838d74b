//! Monte Carlo predictive distribution, credible intervals and metrics.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, sigmoid, DMatrix};
use crate::models::Task;
use crate::training::FittedModel;
use crate::variational::sample_latent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// Network outputs only.
    #[default]
    MeanOnly,
    /// Adds one observation-noise draw per sample (regression).
    WithNoise,
}

/// `M` posterior draws of a regression predictive at `N` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionDraws {
    /// `N × M` network outputs `f_{G(z_m)}(x_n)`.
    pub mean: DMatrix,
    /// Observation noise std of each draw.
    pub noise_std: Vec<f64>,
    /// `N × M` outputs plus sampled noise, in `with_noise` mode.
    pub observed: Option<DMatrix>,
}

/// `M` draws of class-probability vectors at `N` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassDraws {
    /// One `N × K` matrix per draw; rows sum to 1.
    pub probs: Vec<DMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PredictiveSamples {
    Regression(RegressionDraws),
    Classification(ClassDraws),
}

fn softmax_rows(logits: &DMatrix) -> DMatrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|v| *v = (*v - lse).exp());
    }
    out
}

/// Draws `z̃_m ~ q_α̂` and evaluates the base network at `x` for each.
pub fn predictive_samples<R: Rng + ?Sized>(
    model: &FittedModel,
    x: &DMatrix,
    draws: usize,
    rng: &mut R,
    mode: PredictMode,
) -> Result<PredictiveSamples> {
    if draws == 0 {
        return Err(Error::InvalidArgument("predictive needs M >= 1 draws".into()));
    }
    let zs = sample_latent(&model.alpha, rng, draws);
    let n = x.rows();
    match model.base.task {
        Task::Regression => {
            let mut mean = DMatrix::zeros(n, draws);
            let mut noise_std = Vec::with_capacity(draws);
            for (m, z) in zs.iter().enumerate() {
                let w = model.hypernet.forward(z)?;
                let out = model.base.forward(&w, x)?;
                for i in 0..n {
                    mean.set(i, m, out.get(i, 0));
                }
                noise_std.push(model.base.noise_std(w.as_slice()).expect("regression noise"));
            }
            let observed = (mode == PredictMode::WithNoise).then(|| {
                let mut obs = mean.clone();
                for i in 0..n {
                    for (m, s) in noise_std.iter().enumerate() {
                        let e: f64 = rng.sample(StandardNormal);
                        obs.set(i, m, obs.get(i, m) + s * e);
                    }
                }
                obs
            });
            Ok(PredictiveSamples::Regression(RegressionDraws {
                mean,
                noise_std,
                observed,
            }))
        }
        Task::Binary | Task::Multiclass { .. } => {
            let mut probs = Vec::with_capacity(draws);
            for z in &zs {
                let w = model.hypernet.forward(z)?;
                let out = model.base.forward(&w, x)?;
                probs.push(match model.base.task {
                    Task::Binary => DMatrix::from_fn(n, 2, |i, k| {
                        let p = sigmoid(out.get(i, 0));
                        if k == 1 {
                            p
                        } else {
                            1.0 - p
                        }
                    }),
                    _ => softmax_rows(&out),
                });
            }
            Ok(PredictiveSamples::Classification(ClassDraws { probs }))
        }
    }
}

impl PredictiveSamples {
    pub fn draws(&self) -> usize {
        match self {
            PredictiveSamples::Regression(r) => r.mean.cols(),
            PredictiveSamples::Classification(c) => c.probs.len(),
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            PredictiveSamples::Regression(r) => r.mean.rows(),
            PredictiveSamples::Classification(c) => c.probs[0].rows(),
        }
    }

    /// Regression draws mapped back to original target units.
    pub fn denormalize(&self, stats: &NormStats) -> PredictiveSamples {
        match self {
            PredictiveSamples::Regression(r) => {
                let map = |m: &DMatrix| {
                    DMatrix::from_vec(
                        m.rows(),
                        m.cols(),
                        m.as_slice().iter().map(|&v| stats.denormalize(v)).collect(),
                    )
                };
                PredictiveSamples::Regression(RegressionDraws {
                    mean: map(&r.mean),
                    noise_std: r.noise_std.iter().map(|&s| stats.denormalize_scale(s)).collect(),
                    observed: r.observed.as_ref().map(map),
                })
            }
            other => other.clone(),
        }
    }

    /// Predictive mean per input (regression), averaged over draws.
    pub fn mean_prediction(&self) -> Result<Vec<f64>> {
        match self {
            PredictiveSamples::Regression(r) => Ok((0..r.mean.rows())
                .map(|i| r.mean.row(i).iter().sum::<f64>() / r.mean.cols() as f64)
                .collect()),
            PredictiveSamples::Classification(_) => {
                Err(Error::InvalidArgument("mean prediction is defined for regression".into()))
            }
        }
    }

    /// `N × K` average of the per-draw probability vectors.
    pub fn average_probs(&self) -> Result<DMatrix> {
        match self {
            PredictiveSamples::Classification(c) => {
                let mut avg = DMatrix::zeros(c.probs[0].rows(), c.probs[0].cols());
                for p in &c.probs {
                    for (a, v) in avg.as_mut_slice().iter_mut().zip(p.as_slice()) {
                        *a += v;
                    }
                }
                let inv = 1.0 / c.probs.len() as f64;
                avg.as_mut_slice().iter_mut().for_each(|v| *v *= inv);
                Ok(avg)
            }
            PredictiveSamples::Regression(_) => {
                Err(Error::InvalidArgument("class probabilities are defined for classification".into()))
            }
        }
    }

    /// The `M` draws at input `i`: outputs (or noisy outputs when present)
    /// for regression, the class-`k` probabilities for classification.
    pub fn draws_at(&self, i: usize, class: usize) -> Vec<f64> {
        match self {
            PredictiveSamples::Regression(r) => r.observed.as_ref().unwrap_or(&r.mean).row(i).to_vec(),
            PredictiveSamples::Classification(c) => c.probs.iter().map(|p| p.get(i, class)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CredibleInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

impl CredibleInterval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

fn window_len(level: f64, m: usize) -> usize {
    // guard against level·M landing a hair above an integer
    ((level * m as f64) - 1e-9).ceil().max(1.0) as usize
}

/// Narrowest window of `⌈level·M⌉` sorted samples; ties go to the lowest start.
pub fn credible_interval(samples: &[f64], level: f64) -> Result<CredibleInterval> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument(format!("level {level} must lie in (0, 1)")));
    }
    let m = samples.len();
    let needed = (1.0 / (1.0 - level) - 1e-9).ceil() as usize;
    if m < needed {
        return Err(Error::InvalidArgument(format!(
            "{m} samples are too few for a {level} interval (need {needed})"
        )));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("NaN among interval samples".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let k = window_len(level, m);
    let mut best = 0;
    for i in 1..=m - k {
        if s[i + k - 1] - s[i] < s[best + k - 1] - s[best] {
            best = i;
        }
    }
    Ok(CredibleInterval {
        lo: s[best],
        hi: s[best + k - 1],
        level,
    })
}

/// Empirical percentile (`q` in `[0, 100]`) of sorted data, interpolating
/// linearly between order statistics.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Equal-tail interval over order statistics: the window of `⌈level·M⌉`
/// sorted samples that leaves the same count (±1) outside on each side.
pub fn equal_tail_interval(samples: &[f64], level: f64) -> CredibleInterval {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let k = window_len(level, s.len());
    let start = (s.len() - k) / 2;
    CredibleInterval {
        lo: s[start],
        hi: s[start + k - 1],
        level,
    }
}

/// Binary: class 1 iff `p_1 ≥ 1/2`. Multiclass: argmax, ties to the lowest index.
pub fn classify(avg_probs: &[f64]) -> usize {
    if avg_probs.len() == 2 {
        return usize::from(avg_probs[1] >= 0.5);
    }
    let mut best = 0;
    for (k, &p) in avg_probs.iter().enumerate() {
        if p > avg_probs[best] {
            best = k;
        }
    }
    best
}

fn check_len(context: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Dimension {
            context,
            expected: a,
            got: b,
        });
    }
    if a == 0 {
        return Err(Error::Empty(format!("{context}: no rows")));
    }
    Ok(())
}

pub fn metric_rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check_len("rmse targets", preds.len(), targets.len())?;
    let sse: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

/// Mean over inputs of `−log p̂(y|x)` where `p̂` is the draw-averaged
/// predictive density (Gaussian mixture) or probability.
pub fn metric_nll(predictive: &PredictiveSamples, targets: &[f64]) -> Result<f64> {
    check_len("nll targets", predictive.inputs(), targets.len())?;
    let n = targets.len();
    let mut total = 0.0;
    match predictive {
        PredictiveSamples::Regression(r) => {
            let log_m = (r.mean.cols() as f64).ln();
            let mut terms = vec![0.0; r.mean.cols()];
            for (i, &y) in targets.iter().enumerate() {
                for ((t, &mu), &s) in terms.iter_mut().zip(r.mean.row(i)).zip(&r.noise_std) {
                    let d = (y - mu) / s;
                    *t = -0.5 * d * d - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
                }
                total -= log_sum_exp(&terms) - log_m;
            }
        }
        PredictiveSamples::Classification(_) => {
            let avg = predictive.average_probs()?;
            for (i, &y) in targets.iter().enumerate() {
                let k = y as usize;
                if y < 0.0 || y.fract() != 0.0 || k >= avg.cols() {
                    return Err(Error::LabelOutOfRange {
                        row: i,
                        label: y,
                        classes: avg.cols(),
                    });
                }
                total -= avg.get(i, k).ln();
            }
        }
    }
    Ok(total / n as f64)
}

pub fn metric_error_rate(labels: &[usize], targets: &[f64]) -> Result<f64> {
    check_len("error-rate targets", labels.len(), targets.len())?;
    let wrong = labels.iter().zip(targets).filter(|(l, t)| **l as f64 != **t).count();
    Ok(wrong as f64 / labels.len() as f64)
}

/// Quantile interval coverage error. `generated` is `N × S`: row `n` holds
/// the samples for target `n`.
pub fn metric_qice(targets: &[f64], generated: &DMatrix, bins: usize) -> Result<f64> {
    check_len("qice targets", generated.rows(), targets.len())?;
    if bins == 0 || generated.cols() < bins {
        return Err(Error::InvalidArgument(format!(
            "QICE with {bins} bins needs at least {bins} samples per row, got {}",
            generated.cols()
        )));
    }
    let mut counts = vec![0usize; bins];
    let mut sorted = Vec::with_capacity(generated.cols());
    for (i, &y) in targets.iter().enumerate() {
        sorted.clear();
        sorted.extend_from_slice(generated.row(i));
        sorted.sort_by(f64::total_cmp);
        for (m, c) in counts.iter_mut().enumerate() {
            let lo = percentile_sorted(&sorted, 100.0 * m as f64 / bins as f64);
            let hi = percentile_sorted(&sorted, 100.0 * (m + 1) as f64 / bins as f64);
            if y >= lo && y <= hi {
                *c += 1;
            }
        }
    }
    let n = targets.len() as f64;
    let ideal = 1.0 / bins as f64;
    Ok(counts.iter().map(|&c| (c as f64 / n - ideal).abs()).sum::<f64>() / bins as f64)
}

/// Hellinger distance between the true binary conditional `ℓ0` (logit `f0`)
/// and a model's class-1 probability `p_hat`, with `x` uniform on `[0,1]^p`
/// and a midpoint grid of `resolution` points per axis.
pub fn hellinger_binary(
    f0: impl Fn(&[f64]) -> f64,
    p_hat: impl Fn(&DMatrix) -> Result<Vec<f64>>,
    dim: usize,
    resolution: usize,
) -> Result<f64> {
    if dim == 0 || dim > 2 {
        return Err(Error::InvalidArgument(format!(
            "Hellinger grid quadrature supports 1 or 2 input dimensions, got {dim}"
        )));
    }
    if resolution == 0 {
        return Err(Error::InvalidArgument("grid resolution must be >= 1".into()));
    }
    let h = 1.0 / resolution as f64;
    let points = resolution.pow(dim as u32);
    let grid = DMatrix::from_fn(points, dim, |i, j| {
        let idx = if j == 0 { i % resolution } else { i / resolution };
        (idx as f64 + 0.5) * h
    });
    let ph = p_hat(&grid)?;
    check_len("hellinger grid", points, ph.len())?;
    let mut acc = 0.0;
    for (i, &p) in ph.iter().enumerate() {
        let p0 = sigmoid(f0(grid.row(i)));
        let p = p.clamp(0.0, 1.0);
        acc += (p0.sqrt() - p.sqrt()).powi(2) + ((1.0 - p0).sqrt() - (1.0 - p).sqrt()).powi(2);
    }
    Ok((0.5 * acc / points as f64).sqrt().min(1.0))
}

/// `ℓ̂(1, x)`: the class-1 probability averaged over `M` posterior draws.
pub fn posterior_class1_prob<R: Rng + ?Sized>(
    model: &FittedModel,
    x: &DMatrix,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if model.base.task != Task::Binary {
        return Err(Error::InvalidArgument("class-1 probability needs a binary model".into()));
    }
    let avg = predictive_samples(model, x, draws, rng, PredictMode::MeanOnly)?.average_probs()?;
    Ok((0..avg.rows()).map(|i| avg.get(i, 1)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation across splits (0 for a single split).
    pub std: f64,
    pub per_split: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MetricSummary {
            mean,
            std,
            per_split: values,
        }
    }
}

/// `{metric → {mean, std, per_split}}`, keys sorted.
pub type MetricsReport = BTreeMap<String, MetricSummary>;

pub fn summarize(per_split: BTreeMap<String, Vec<f64>>) -> MetricsReport {
    per_split
        .into_iter()
        .map(|(k, v)| (k, MetricSummary::from_values(v)))
        .collect()
}
