//! Stochastic variational training of `(α, η)`, the ELBO, its Monte Carlo
//! gradients, optimizers, and a point-estimate baseline.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Block, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{sigmoid, DMatrix};
use crate::models::{
    jacobian_probes, load_weights, save_weights, BaseNetSpec, Hypernet, HypernetSpec, JacobianMode, Task,
    WeightVector,
};
use crate::seeding::rng_for;
use crate::variational::{
    kl_closed_form, kl_gradient, log_prior, log_q, AlphaGrad, PriorConfig, VariationalParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradEstimator {
    /// `∇_α log q_α(z) · (log L + τ log(π0/q_α))`
    #[default]
    Score,
    /// Differentiates through `z = m + ϱ ⊙ ε`; the KL part uses its closed form.
    Pathwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchWeighting {
    /// `τ_b = 2^{B−b} / (2^B − 1)`
    #[default]
    Exponential,
    /// `τ_b = 1/B`
    Uniform,
}

impl BatchWeighting {
    pub fn weights(self, batches: usize) -> Result<Vec<f64>> {
        match self {
            BatchWeighting::Exponential => minibatch_weights(batches),
            BatchWeighting::Uniform if batches >= 1 => Ok(vec![1.0 / batches as f64; batches]),
            BatchWeighting::Uniform => Err(Error::InvalidArgument("need at least one minibatch".into())),
        }
    }
}

/// `τ_b = 2^{B−b} / (2^B − 1)` for `b = 1..B`.
pub fn minibatch_weights(batches: usize) -> Result<Vec<f64>> {
    if batches == 0 {
        return Err(Error::InvalidArgument("need at least one minibatch".into()));
    }
    // 2^{-b} / (1 - 2^{-B}) avoids overflow for large B
    let denom = 1.0 - 0.5f64.powi(batches.min(i32::MAX as usize) as i32);
    Ok((1..=batches)
        .map(|b| 0.5f64.powi(b.min(i32::MAX as usize) as i32) / denom)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    /// `β_t = lr / (1 + decay · t)`
    SgdSchedule {
        lr: f64,
        #[serde(default)]
        decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn sgd(lr: f64, decay: f64) -> Self {
        OptimizerConfig::SgdSchedule { lr, decay }
    }

    /// Problems found, each naming the offending field.
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        match *self {
            OptimizerConfig::SgdSchedule { lr, decay } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    out.push(format!("{prefix}.lr must be a positive number, got {lr}"));
                }
                if !(decay >= 0.0 && decay.is_finite()) {
                    out.push(format!("{prefix}.decay must be >= 0, got {decay}"));
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    out.push(format!("{prefix}.lr must be a positive number, got {lr}"));
                }
                if !(0.0..1.0).contains(&beta1) {
                    out.push(format!("{prefix}.beta1 must lie in [0, 1), got {beta1}"));
                }
                if !(0.0..1.0).contains(&beta2) {
                    out.push(format!("{prefix}.beta2 must lie in [0, 1), got {beta2}"));
                }
                if !(eps > 0.0) {
                    out.push(format!("{prefix}.eps must be positive, got {eps}"));
                }
            }
        }
        out
    }
}

/// Per-parameter-group optimizer memory.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, len: usize) -> Self {
        let moments = matches!(config, OptimizerConfig::Adam { .. });
        OptimizerState {
            config,
            first: if moments { vec![0.0; len] } else { vec![] },
            second: if moments { vec![0.0; len] } else { vec![] },
        }
    }

    /// One ascent step on `params` along `scale · grads`; `t` counts from 0.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], scale: f64, t: u64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                context: "optimizer gradient",
                expected: params.len(),
                got: grads.len(),
            });
        }
        match self.config {
            OptimizerConfig::SgdSchedule { lr, decay } => {
                let beta = scale * lr / (1.0 + decay * t as f64);
                for (p, g) in params.iter_mut().zip(grads) {
                    *p += beta * g;
                }
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                if self.first.len() != params.len() {
                    return Err(Error::Dimension {
                        context: "optimizer state",
                        expected: self.first.len(),
                        got: params.len(),
                    });
                }
                let k = (t + 1).min(i32::MAX as u64) as i32;
                let c1 = 1.0 - beta1.powi(k);
                let c2 = 1.0 - beta2.powi(k);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let g = g * scale;
                    *m = flush_subnormal(beta1 * *m + (1.0 - beta1) * g);
                    *v = flush_subnormal(beta2 * *v + (1.0 - beta2) * g * g);
                    *p += lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

// Moments of parameters that stop receiving gradient (dead ReLU units) decay
// geometrically into the subnormal range, where arithmetic is very slow.
fn flush_subnormal(x: f64) -> f64 {
    if x.abs() < f64::MIN_POSITIVE {
        0.0
    } else {
        x
    }
}

/// Ascent update `params ← params + step(grads)` at iteration `t`.
pub fn optimizer_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64], t: u64) -> Result<()> {
    state.step(params, grads, 1.0, t)
}

fn default_samples() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_probe_samples() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Monte Carlo samples `H` per step.
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Full batch when absent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub batch_weighting: BatchWeighting,
    #[serde(default)]
    pub lambda_jr: f64,
    /// Defaults to [`JacobianMode::default_for`] the latent size.
    #[serde(default)]
    pub jacobian: Option<JacobianMode>,
    #[serde(default)]
    pub grad_alpha_estimator: GradEstimator,
    /// Global gradient-norm clip over `(α, η)`; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// When false `η` stays at its initial value.
    #[serde(default = "default_true")]
    pub train_eta: bool,
    /// Fixed latent draws used for the per-epoch ELBO trace.
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerConfig, epochs: usize) -> Self {
        TrainConfig {
            samples: default_samples(),
            optimizer,
            epochs,
            batch_size: None,
            batch_weighting: BatchWeighting::default(),
            lambda_jr: 0.0,
            jacobian: None,
            grad_alpha_estimator: GradEstimator::default(),
            grad_clip: None,
            train_eta: true,
            probe_samples: default_probe_samples(),
            seed: 0,
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = self.optimizer.problems(&format!("{prefix}.optimizer"));
        if self.samples == 0 {
            out.push(format!("{prefix}.samples must be >= 1"));
        }
        if self.batch_size == Some(0) {
            out.push(format!("{prefix}.batch_size must be >= 1"));
        }
        if !(self.lambda_jr >= 0.0 && self.lambda_jr.is_finite()) {
            out.push(format!("{prefix}.lambda_jr must be >= 0, got {}", self.lambda_jr));
        }
        if let Some(JacobianMode::Estimate { probes: 0 }) = self.jacobian {
            out.push(format!("{prefix}.jacobian.probes must be >= 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                out.push(format!("{prefix}.grad_clip must be positive, got {c}"));
            }
        }
        if self.probe_samples == 0 {
            out.push(format!("{prefix}.probe_samples must be >= 1"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems("train");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(p.join("; ")))
        }
    }
}

fn check_labels(base: &BaseNetSpec, y: &[f64]) -> Result<()> {
    let classes = match base.task {
        Task::Regression => return Ok(()),
        Task::Binary => 2,
        Task::Multiclass { classes } => classes,
    };
    for (row, &label) in y.iter().enumerate() {
        if !(label >= 0.0 && label.fract() == 0.0 && (label as usize) < classes) {
            return Err(Error::LabelOutOfRange { row, label, classes });
        }
    }
    Ok(())
}

/// `log L(D; w)`: the summed per-row log-density of the base network's likelihood.
pub fn log_likelihood(base: &BaseNetSpec, w: &WeightVector, x: &DMatrix, y: &[f64]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::Empty("log-likelihood of an empty batch".into()));
    }
    if w.len() != base.weight_count() {
        return Err(Error::Dimension {
            context: "weight vector",
            expected: base.weight_count(),
            got: w.len(),
        });
    }
    if x.rows() != y.len() {
        return Err(Error::Dimension {
            context: "batch targets",
            expected: x.rows(),
            got: y.len(),
        });
    }
    check_labels(base, y)?;
    let mut tape = Tape::new();
    let wv = tape.data("w");
    let xv = tape.data("x");
    let yv = tape.data("y");
    base.build_loglik(&mut tape, wv, 0, xv, yv);
    tape.forward(&[
        ("w", &DMatrix::row_vector(w.0.clone())),
        ("x", x),
        ("y", &DMatrix::column_vector(y.to_vec())),
    ])
}

fn check_model(base: &BaseNetSpec, hyper: &HypernetSpec, prior: &PriorConfig) -> Result<()> {
    base.validate()?;
    hyper.validate()?;
    prior.validate()?;
    if hyper.output_dim() != base.weight_count() {
        return Err(Error::Dimension {
            context: "hypernetwork output vs base weight count",
            expected: base.weight_count(),
            got: hyper.output_dim(),
        });
    }
    if hyper.latent_dim() != prior.dim() {
        return Err(Error::Dimension {
            context: "prior vs latent dimension",
            expected: hyper.latent_dim(),
            got: prior.dim(),
        });
    }
    Ok(())
}

/// Tape computing `log L(D; G_η(z_h))` for `H` stacked latent rows, with no gradients.
struct LikelihoodGraph {
    tape: Tape,
    lik: Vec<Var>,
}

impl LikelihoodGraph {
    fn new(base: &BaseNetSpec, hyper: &HypernetSpec, samples: usize) -> Self {
        let mut tape = Tape::new();
        let eta = tape.data("eta");
        let z = tape.data("z");
        let x = tape.data("x");
        let y = tape.data("y");
        let (w, _) = hyper.build_forward(&mut tape, eta, z);
        let d = hyper.output_dim();
        let lik: Vec<Var> = (0..samples)
            .map(|h| base.build_loglik(&mut tape, w, h * d, x, y))
            .collect();
        let mut total = lik[0];
        for &l in &lik[1..] {
            total = tape.add(total, l);
        }
        tape.set_root(total);
        LikelihoodGraph { tape, lik }
    }

    fn logliks(&mut self, eta: &DMatrix, z: &DMatrix, x: &DMatrix, y: &DMatrix) -> Result<Vec<f64>> {
        self.tape.forward(&[("eta", eta), ("z", z), ("x", x), ("y", y)])?;
        Ok(self.lik.iter().map(|&v| self.tape.value(v).get(0, 0)).collect())
    }
}

fn stack_rows(rows: &[Vec<f64>]) -> DMatrix {
    let cols = rows.first().map_or(0, Vec::len);
    DMatrix::from_vec(rows.len(), cols, rows.concat())
}

/// `KL(q_α‖π0)` and the per-draw `log L(D; G_η(z_h))` for `z_h ~ q_α`.
pub fn elbo_terms<R: Rng + ?Sized>(
    alpha: &VariationalParams,
    hypernet: &Hypernet,
    base: &BaseNetSpec,
    prior: &PriorConfig,
    data: &Dataset,
    samples: usize,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    if samples == 0 {
        return Err(Error::InvalidArgument("ELBO needs H >= 1 samples".into()));
    }
    let zs = crate::variational::sample_latent(alpha, rng, samples);
    elbo_terms_at(alpha, hypernet, base, prior, data, &zs)
}

fn elbo_terms_at(
    alpha: &VariationalParams,
    hypernet: &Hypernet,
    base: &BaseNetSpec,
    prior: &PriorConfig,
    data: &Dataset,
    zs: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    check_model(base, &hypernet.spec, prior)?;
    if data.is_empty() {
        return Err(Error::Empty("ELBO of an empty dataset".into()));
    }
    check_labels(base, &data.y)?;
    let kl = kl_closed_form(alpha, prior)?;
    let mut graph = LikelihoodGraph::new(base, &hypernet.spec, zs.len());
    let eta = DMatrix::row_vector(hypernet.eta.clone());
    let lik = graph.logliks(&eta, &stack_rows(zs), &data.x, &data.y_matrix())?;
    Ok((kl, lik))
}

/// `−KL(q_α‖π0) + (1/H) Σ_h log L(D; G_η(z_h))`.
pub fn elbo_estimate<R: Rng + ?Sized>(
    alpha: &VariationalParams,
    hypernet: &Hypernet,
    base: &BaseNetSpec,
    prior: &PriorConfig,
    data: &Dataset,
    samples: usize,
    rng: &mut R,
) -> Result<f64> {
    let (kl, lik) = elbo_terms(alpha, hypernet, base, prior, data, samples, rng)?;
    Ok(-kl + lik.iter().sum::<f64>() / lik.len() as f64)
}

/// Result of one Monte Carlo gradient evaluation.
#[derive(Debug, Clone)]
pub struct StepEstimate {
    /// H-sample average of the `α` gradient.
    pub alpha: AlphaGrad,
    /// Per-draw `log L(D_b; G_η(z_h))`.
    pub loglik: Vec<f64>,
    /// Per-draw `‖∂G/∂z‖²_F` (empty when the penalty is off).
    pub penalty: Vec<f64>,
    /// Latent draws used.
    pub z: Vec<Vec<f64>>,
}

/// Reusable tape for `∇_α` and `∇_η` of the per-batch objective
/// `−τ KL(q_α‖π0) + E_q[log L(D_b; G_η(z)) − (λ/2)‖∂G_η/∂z‖²_F]`.
///
/// `η` lives on the tape; its gradient (summed over the `H` draws) is read
/// with [`GradientEstimator::eta_grad`] after [`GradientEstimator::estimate`].
pub struct GradientEstimator {
    base: BaseNetSpec,
    hyper: HypernetSpec,
    prior: PriorConfig,
    samples: usize,
    lambda_jr: f64,
    jacobian: JacobianMode,
    estimator: GradEstimator,
    tape: Tape,
    eta: Var,
    z: Var,
    lik: Vec<Var>,
    pen: Vec<Var>,
}

impl GradientEstimator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        base: &BaseNetSpec,
        hypernet: &Hypernet,
        prior: &PriorConfig,
        samples: usize,
        lambda_jr: f64,
        jacobian: Option<JacobianMode>,
        estimator: GradEstimator,
        eta_grad: bool,
    ) -> Result<Self> {
        let hyper = &hypernet.spec;
        check_model(base, hyper, prior)?;
        if samples == 0 {
            return Err(Error::InvalidArgument("gradient estimate needs H >= 1 samples".into()));
        }
        if !(lambda_jr >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_jr must be >= 0, got {lambda_jr}")));
        }
        let jacobian = jacobian.unwrap_or_else(|| JacobianMode::default_for(hyper.latent_dim()));
        let mut tape = Tape::new();
        let eta = if eta_grad { tape.input("eta") } else { tape.data("eta") };
        let z = tape.input("z");
        let x = tape.data("x");
        let y = tape.data("y");
        let (w, pre) = hyper.build_forward(&mut tape, eta, z);
        let d = hyper.output_dim();
        let mut lik = Vec::with_capacity(samples);
        let mut pen = Vec::new();
        let mut total: Option<Var> = None;
        let probes = (lambda_jr > 0.0).then(|| tape.data("probes"));
        for h in 0..samples {
            let l = base.build_loglik(&mut tape, w, h * d, x, y);
            lik.push(l);
            let mut obj = l;
            if let Some(probes) = probes {
                let rows: Vec<Var> = pre
                    .iter()
                    .zip(&hyper.layer_dims[1..])
                    .map(|(&p, &width)| tape.view(Block::new(p, h * width, 1, width)))
                    .collect();
                let j = hyper.build_jacobian_probe(&mut tape, eta, &rows, probes);
                pen.push(j);
                let scaled = tape.scale(j, -0.5 * lambda_jr);
                obj = tape.add(l, scaled);
            }
            total = Some(match total {
                None => obj,
                Some(t) => tape.add(t, obj),
            });
        }
        tape.set_root(total.expect("samples >= 1"));
        let mut est = GradientEstimator {
            base: base.clone(),
            hyper: hyper.clone(),
            prior: prior.clone(),
            samples,
            lambda_jr,
            jacobian,
            estimator,
            tape,
            eta,
            z,
            lik,
            pen,
        };
        est.set_eta(&hypernet.eta)?;
        Ok(est)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn set_eta(&mut self, eta: &[f64]) -> Result<()> {
        if eta.len() != self.hyper.param_count() {
            return Err(Error::Dimension {
                context: "hypernetwork parameters",
                expected: self.hyper.param_count(),
                got: eta.len(),
            });
        }
        let v = self.tape.input_value_mut(self.eta);
        v.reset(1, eta.len());
        v.as_mut_slice().copy_from_slice(eta);
        Ok(())
    }

    pub fn eta(&self) -> &[f64] {
        self.tape.value(self.eta).as_slice()
    }

    /// `Σ_h ∇_η` of the per-draw objective from the last estimate (divide by `H`
    /// for the average). Empty when built without `η` gradients.
    pub fn eta_grad(&self) -> &[f64] {
        self.tape.adjoint(self.eta).as_slice()
    }

    /// Applies an optimizer step to `η` using `scale · eta_grad()`.
    pub fn step_eta(&mut self, opt: &mut OptimizerState, scale: f64, t: u64) -> Result<()> {
        let (value, grad) = self.tape.input_and_adjoint_mut(self.eta);
        if grad.is_empty() {
            return Err(Error::Usage("estimator was built without eta gradients"));
        }
        opt.step(value.as_mut_slice(), grad.as_slice(), scale, t)
    }

    /// Draws `H` latents, evaluates the batch objective and its gradients.
    /// `tau` is the KL weight of this batch.
    pub fn estimate<R: Rng + ?Sized>(
        &mut self,
        alpha: &VariationalParams,
        x: &DMatrix,
        y: &DMatrix,
        tau: f64,
        rng: &mut R,
    ) -> Result<StepEstimate> {
        let r = self.hyper.latent_dim();
        if alpha.dim() != r {
            return Err(Error::Dimension {
                context: "variational dimension",
                expected: r,
                got: alpha.dim(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::Empty("gradient of an empty batch".into()));
        }
        check_labels(&self.base, y.as_slice())?;
        let eps: Vec<Vec<f64>> = (0..self.samples)
            .map(|_| (0..r).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let zs: Vec<Vec<f64>> = eps.iter().map(|e| alpha.reparameterize(e)).collect();
        self.tape.bind("z", &stack_rows(&zs))?;
        self.tape.bind("x", x)?;
        self.tape.bind("y", y)?;
        if !self.pen.is_empty() {
            let probes = jacobian_probes(self.jacobian, r, rng);
            self.tape.bind("probes", &probes)?;
        }
        self.tape.evaluate()?;
        self.tape.backpropagate()?;

        let loglik: Vec<f64> = self.lik.iter().map(|&v| self.tape.value(v).get(0, 0)).collect();
        let penalty: Vec<f64> = self.pen.iter().map(|&v| self.tape.value(v).get(0, 0)).collect();
        let inv_h = 1.0 / self.samples as f64;
        let mut g = AlphaGrad::zeros(r);
        match self.estimator {
            GradEstimator::Score => {
                for (h, z) in zs.iter().enumerate() {
                    let mut payoff = loglik[h] + tau * (log_prior(&self.prior, z)? - log_q(alpha, z)?);
                    if let Some(p) = penalty.get(h) {
                        payoff -= 0.5 * self.lambda_jr * p;
                    }
                    g.add_scaled(&alpha.score(z)?, payoff * inv_h);
                }
            }
            GradEstimator::Pathwise => {
                let gz = self.tape.adjoint(self.z);
                let sig: Vec<f64> = alpha.rho.iter().map(|&p| sigmoid(p)).collect();
                for (h, e) in eps.iter().enumerate() {
                    let row = gz.row(h);
                    for j in 0..r {
                        g.m[j] += row[j] * inv_h;
                        g.rho[j] += row[j] * e[j] * sig[j] * inv_h;
                    }
                }
                g.add_scaled(&kl_gradient(alpha, &self.prior)?, -tau);
            }
        }
        Ok(StepEstimate {
            alpha: g,
            loglik,
            penalty,
            z: zs,
        })
    }
}

/// H-sample estimate of `∇_α` of the batch objective (`τ = 1`).
#[allow(clippy::too_many_arguments)]
pub fn grad_alpha<R: Rng + ?Sized>(
    alpha: &VariationalParams,
    hypernet: &Hypernet,
    base: &BaseNetSpec,
    prior: &PriorConfig,
    batch: &Dataset,
    samples: usize,
    rng: &mut R,
    estimator: GradEstimator,
) -> Result<AlphaGrad> {
    let mut est = GradientEstimator::new(base, hypernet, prior, samples, 0.0, None, estimator, false)?;
    Ok(est.estimate(alpha, &batch.x, &batch.y_matrix(), 1.0, rng)?.alpha)
}

/// H-sample average of `∇_η log L(D_b; G_η(z_h))`.
pub fn grad_eta<R: Rng + ?Sized>(
    alpha: &VariationalParams,
    hypernet: &Hypernet,
    base: &BaseNetSpec,
    prior: &PriorConfig,
    batch: &Dataset,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut est = GradientEstimator::new(base, hypernet, prior, samples, 0.0, None, GradEstimator::Score, true)?;
    est.estimate(alpha, &batch.x, &batch.y_matrix(), 1.0, rng)?;
    let inv_h = 1.0 / samples as f64;
    Ok(est.eta_grad().iter().map(|g| g * inv_h).collect())
}

/// One row of the training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub elbo_estimate: f64,
    pub penalty: f64,
    /// Seconds since training started.
    pub wallclock: f64,
}

/// Variational parameters, hypernetwork and architecture after training.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub alpha: VariationalParams,
    pub hypernet: Hypernet,
    pub base: BaseNetSpec,
    pub prior: PriorConfig,
    pub trace: Vec<TraceRow>,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    alpha: VariationalParams,
    prior: PriorConfig,
    base: BaseNetSpec,
    hypernet: HypernetSpec,
}

pub const MODEL_JSON: &str = "model.json";
pub const ETA_BIN: &str = "eta.bin";

impl FittedModel {
    /// Writes `model.json` (α, prior, architectures) and `eta.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let header = ModelHeader {
            alpha: self.alpha.clone(),
            prior: self.prior.clone(),
            base: self.base.clone(),
            hypernet: self.hypernet.spec.clone(),
        };
        std::fs::write(dir.join(MODEL_JSON), serde_json::to_string_pretty(&header)?)?;
        save_weights(&dir.join(ETA_BIN), &self.hypernet.eta)
    }

    /// Reads a checkpoint written by [`FittedModel::save`]; the trace is not stored there.
    pub fn load(dir: &Path) -> Result<Self> {
        let header: ModelHeader = serde_json::from_str(&std::fs::read_to_string(dir.join(MODEL_JSON))?)?;
        let eta = load_weights(&dir.join(ETA_BIN))?;
        let hypernet = Hypernet::from_parts(header.hypernet, eta)?;
        check_model(&header.base, &hypernet.spec, &header.prior)?;
        if header.alpha.dim() != header.prior.dim() {
            return Err(Error::Dimension {
                context: "checkpoint variational dimension",
                expected: header.prior.dim(),
                got: header.alpha.dim(),
            });
        }
        Ok(FittedModel {
            alpha: header.alpha,
            hypernet,
            base: header.base,
            prior: header.prior,
            trace: vec![],
        })
    }

    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.trace.is_empty() {
            w.write_record(["epoch", "elbo_estimate", "penalty", "wallclock"])?;
        }
        for row in &self.trace {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Initializes `α ~ Unif[−1,1]`, `η` uniformly by fan-in, then runs [`train_from`].
pub fn train(
    base: &BaseNetSpec,
    hyper: &HypernetSpec,
    prior: &PriorConfig,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<FittedModel> {
    let mut rng = rng_for(cfg.seed, "init", 0);
    let alpha = VariationalParams::init_uniform(hyper.latent_dim(), &mut rng);
    let hypernet = Hypernet::init(hyper.clone(), &mut rng)?;
    train_from(base, hypernet, alpha, prior, data, cfg)
}

/// Minibatched stochastic ascent on the ELBO from a given starting point.
pub fn train_from(
    base: &BaseNetSpec,
    hypernet: Hypernet,
    mut alpha: VariationalParams,
    prior: &PriorConfig,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<FittedModel> {
    cfg.validate()?;
    check_model(base, &hypernet.spec, prior)?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if data.feature_dim() != base.input_dim() {
        return Err(Error::Dimension {
            context: "dataset features vs base input",
            expected: base.input_dim(),
            got: data.feature_dim(),
        });
    }
    if data.task != base.task {
        return Err(Error::InvalidArgument(format!(
            "dataset task {:?} does not match model task {:?}",
            data.task, base.task
        )));
    }
    check_labels(base, &data.y)?;
    if alpha.dim() != prior.dim() {
        return Err(Error::Dimension {
            context: "variational dimension",
            expected: prior.dim(),
            got: alpha.dim(),
        });
    }

    let n = data.len();
    let r = alpha.dim();
    let bs = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let batches = n.div_ceil(bs);
    let tau = cfg.batch_weighting.weights(batches)?;
    let mut est = GradientEstimator::new(
        base,
        &hypernet,
        prior,
        cfg.samples,
        cfg.lambda_jr,
        cfg.jacobian,
        cfg.grad_alpha_estimator,
        cfg.train_eta,
    )?;
    let spec = hypernet.spec.clone();
    drop(hypernet);
    let mut opt_alpha = OptimizerState::new(cfg.optimizer, 2 * r);
    let mut opt_eta = OptimizerState::new(
        cfg.optimizer,
        if cfg.train_eta { spec.param_count() } else { 0 },
    );
    let mut probe_rng = rng_for(cfg.seed, "probe", 0);
    let probe_eps: Vec<Vec<f64>> = (0..cfg.probe_samples)
        .map(|_| (0..r).map(|_| probe_rng.sample(StandardNormal)).collect())
        .collect();
    let mut probe = LikelihoodGraph::new(base, &spec, cfg.probe_samples);
    let y_all = data.y_matrix();

    let start = Instant::now();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let inv_h = 1.0 / cfg.samples as f64;
    let mut t: u64 = 0;
    let mut params = vec![0.0; 2 * r];
    let mut grads = vec![0.0; 2 * r];
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if batches > 1 {
            order.shuffle(&mut rng_for(cfg.seed, "shuffle", epoch as u64));
        }
        let mut mc = rng_for(cfg.seed, "mc", epoch as u64);
        let mut penalty_sum = 0.0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let (xb, yb) = if batches == 1 {
                (data.x.clone(), y_all.clone())
            } else {
                (
                    data.x.select_rows(chunk),
                    DMatrix::column_vector(chunk.iter().map(|&i| data.y[i]).collect()),
                )
            };
            let s = est.estimate(&alpha, &xb, &yb, tau[b], &mut mc)?;
            penalty_sum += s.penalty.iter().sum::<f64>() * inv_h;

            grads[..r].copy_from_slice(&s.alpha.m);
            grads[r..].copy_from_slice(&s.alpha.rho);
            let eta_norm2 = if cfg.train_eta {
                est.eta_grad().iter().map(|g| g * g).sum::<f64>() * inv_h * inv_h
            } else {
                0.0
            };
            let alpha_norm2 = grads.iter().map(|g| g * g).sum::<f64>();
            let objective = s.loglik.iter().sum::<f64>() * inv_h;
            if !(objective.is_finite() && alpha_norm2.is_finite() && eta_norm2.is_finite()) {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    step: t,
                    diagnostic: format!(
                        "batch log-likelihood {objective}, |grad alpha| {}, |grad eta| {}, |m| {}, |rho| {}, |eta| {}",
                        alpha_norm2.sqrt(),
                        eta_norm2.sqrt(),
                        norm(&alpha.m),
                        norm(&alpha.rho),
                        norm(est.eta())
                    ),
                });
            }
            let mut clip = 1.0;
            if let Some(c) = cfg.grad_clip {
                let total = (alpha_norm2 + eta_norm2).sqrt();
                if total > c {
                    clip = c / total;
                }
            }

            params[..r].copy_from_slice(&alpha.m);
            params[r..].copy_from_slice(&alpha.rho);
            opt_alpha.step(&mut params, &grads, clip, t)?;
            alpha.m.copy_from_slice(&params[..r]);
            alpha.rho.copy_from_slice(&params[r..]);
            if cfg.train_eta {
                est.step_eta(&mut opt_eta, clip * inv_h, t)?;
            }
            t += 1;
        }

        let z = stack_rows(&probe_eps.iter().map(|e| alpha.reparameterize(e)).collect::<Vec<_>>());
        let eta = DMatrix::row_vector(est.eta().to_vec());
        let lik = probe.logliks(&eta, &z, &data.x, &y_all)?;
        let elbo = -kl_closed_form(&alpha, prior)? + lik.iter().sum::<f64>() / lik.len() as f64;
        if !elbo.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch + 1,
                step: t,
                diagnostic: format!(
                    "ELBO probe {elbo}, |m| {}, |rho| {}, |eta| {}",
                    norm(&alpha.m),
                    norm(&alpha.rho),
                    norm(est.eta())
                ),
            });
        }
        let row = TraceRow {
            epoch: epoch + 1,
            elbo_estimate: elbo,
            penalty: penalty_sum / batches as f64,
            wallclock: start.elapsed().as_secs_f64(),
        };
        log::debug!("epoch {} elbo {:.6} penalty {:.6}", row.epoch, row.elbo_estimate, row.penalty);
        trace.push(row);
    }

    let hypernet = Hypernet::from_parts(spec, est.eta().to_vec())?;
    Ok(FittedModel {
        alpha,
        hypernet,
        base: base.clone(),
        prior: prior.clone(),
        trace,
    })
}

/// Per-layer `U(±1/√fan_in)` weights with `log σ = 0` for learned noise.
pub fn init_base_weights<R: Rng + ?Sized>(base: &BaseNetSpec, rng: &mut R) -> WeightVector {
    let mut w = Vec::with_capacity(base.weight_count());
    for d in base.layer_dims.windows(2) {
        let bound = 1.0 / (d[0] as f64).sqrt();
        for _ in 0..(d[0] + 1) * d[1] {
            w.push(rng.random_range(-bound..bound));
        }
    }
    if base.has_learned_noise() {
        w.push(0.0);
    }
    WeightVector(w)
}

/// Maximum-likelihood training of `f_w` by minibatch ascent on the mean
/// per-row log-likelihood. Only the optimizer, epoch, batch, clip and seed
/// fields of `cfg` are used.
pub fn train_baseline_sgd(base: &BaseNetSpec, data: &Dataset, cfg: &TrainConfig) -> Result<WeightVector> {
    cfg.validate()?;
    base.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set is empty".into()));
    }
    if data.feature_dim() != base.input_dim() {
        return Err(Error::Dimension {
            context: "dataset features vs base input",
            expected: base.input_dim(),
            got: data.feature_dim(),
        });
    }
    check_labels(base, &data.y)?;
    let init = init_base_weights(base, &mut rng_for(cfg.seed, "baseline_init", 0));
    let mut tape = Tape::new();
    let w = tape.input("w");
    let x = tape.data("x");
    let y = tape.data("y");
    let ll = base.build_loglik(&mut tape, w, 0, x, y);
    tape.set_root(ll);
    tape.bind("w", &DMatrix::row_vector(init.0))?;

    let n = data.len();
    let bs = cfg.batch_size.unwrap_or(n).clamp(1, n);
    let batches = n.div_ceil(bs);
    let mut opt = OptimizerState::new(cfg.optimizer, base.weight_count());
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if batches > 1 {
            order.shuffle(&mut rng_for(cfg.seed, "baseline_shuffle", epoch as u64));
        }
        for chunk in order.chunks(bs) {
            tape.bind("x", &data.x.select_rows(chunk))?;
            tape.bind("y", &DMatrix::column_vector(chunk.iter().map(|&i| data.y[i]).collect()))?;
            let value = tape.evaluate()?;
            tape.backpropagate()?;
            let scale = 1.0 / chunk.len() as f64;
            let (wv, g) = tape.input_and_adjoint_mut(w);
            let gnorm = norm(g.as_slice()) * scale;
            if !(value.is_finite() && gnorm.is_finite()) {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    step: t,
                    diagnostic: format!(
                        "batch log-likelihood {value}, |grad w| {gnorm}, |w| {}",
                        norm(wv.as_slice())
                    ),
                });
            }
            let clip = match cfg.grad_clip {
                Some(c) if gnorm > c => c / gnorm,
                _ => 1.0,
            };
            opt.step(wv.as_mut_slice(), g.as_slice(), scale * clip, t)?;
            t += 1;
        }
    }
    Ok(WeightVector(tape.value(w).as_slice().to_vec()))
}
