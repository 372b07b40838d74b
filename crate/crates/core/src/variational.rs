//! Factorized Gaussian prior on the latent `z`, the mean-field Gaussian
//! variational family, and the closed-form KL between them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{sigmoid, softplus};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// `π0(z) = Π_j N(z_j; μ_j, ζ_j²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub mu: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl PriorConfig {
    pub fn standard(r: usize) -> Self {
        PriorConfig {
            mu: vec![0.0; r],
            zeta: vec![1.0; r],
        }
    }

    pub fn new(mu: Vec<f64>, zeta: Vec<f64>) -> Result<Self> {
        let p = PriorConfig { mu, zeta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.len() != self.zeta.len() {
            return Err(Error::Dimension {
                context: "prior zeta",
                expected: self.mu.len(),
                got: self.zeta.len(),
            });
        }
        if let Some(z) = self.zeta.iter().find(|z| !(**z > 0.0 && z.is_finite())) {
            return Err(Error::InvalidArgument(format!("prior std {z} must be positive")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// `q_α(z) = Π_j N(z_j; m_j, ϱ_j²)` with `ϱ_j = log(1 + e^{ρ_j})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalParams {
    pub m: Vec<f64>,
    pub rho: Vec<f64>,
}

/// Gradient with respect to `(m, ρ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaGrad {
    pub m: Vec<f64>,
    pub rho: Vec<f64>,
}

impl AlphaGrad {
    pub fn zeros(r: usize) -> Self {
        AlphaGrad {
            m: vec![0.0; r],
            rho: vec![0.0; r],
        }
    }

    pub fn add_scaled(&mut self, other: &AlphaGrad, c: f64) {
        for (a, b) in self.m.iter_mut().zip(&other.m) {
            *a += c * b;
        }
        for (a, b) in self.rho.iter_mut().zip(&other.rho) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        self.m.iter_mut().chain(self.rho.iter_mut()).for_each(|v| *v *= c);
    }
}

impl VariationalParams {
    pub fn new(m: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if m.len() != rho.len() {
            return Err(Error::Dimension {
                context: "variational rho",
                expected: m.len(),
                got: rho.len(),
            });
        }
        Ok(VariationalParams { m, rho })
    }

    /// `m_j, ρ_j ~ Unif[−1, 1]` i.i.d.
    pub fn init_uniform<R: Rng + ?Sized>(r: usize, rng: &mut R) -> Self {
        let m = (0..r).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let rho = (0..r).map(|_| rng.random_range(-1.0..=1.0)).collect();
        VariationalParams { m, rho }
    }

    /// Parameters whose standard deviations equal `std` exactly (up to the softplus inverse).
    pub fn from_mean_std(m: Vec<f64>, std: &[f64]) -> Result<Self> {
        let rho = std.iter().map(|&s| crate::linalg::softplus_inverse(s)).collect();
        VariationalParams::new(m, rho)
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    /// `ϱ_j = log(1 + e^{ρ_j})`
    pub fn varrho(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// `z = m + ϱ ⊙ ε` for a given standard-normal `ε`.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.m
            .iter()
            .zip(&self.rho)
            .zip(eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect()
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                context: "latent vector",
                expected: self.dim(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Score `∇_(m,ρ) log q_α(z)`; the `ρ` part is chain-ruled through the
    /// softplus with factor `e^ρ / (1 + e^ρ)`.
    pub fn score(&self, z: &[f64]) -> Result<AlphaGrad> {
        self.check_dim(z)?;
        let mut g = AlphaGrad::zeros(self.dim());
        for j in 0..self.dim() {
            let s = softplus(self.rho[j]);
            let d = z[j] - self.m[j];
            g.m[j] = d / (s * s);
            let d_varrho = -1.0 / s + d * d / (s * s * s);
            g.rho[j] = d_varrho * sigmoid(self.rho[j]);
        }
        Ok(g)
    }
}

fn gaussian_log_density(mean: &[f64], std: &[f64], z: &[f64]) -> f64 {
    mean.iter()
        .zip(std)
        .zip(z)
        .map(|((m, s), x)| {
            let d = (x - m) / s;
            -0.5 * LOG_2PI - s.ln() - 0.5 * d * d
        })
        .sum()
}

/// Draws `count` latent vectors from `q_α`.
pub fn sample_latent<R: Rng + ?Sized>(alpha: &VariationalParams, rng: &mut R, count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let eps: Vec<f64> = (0..alpha.dim()).map(|_| rng.sample(StandardNormal)).collect();
            alpha.reparameterize(&eps)
        })
        .collect()
}

/// `log q_α(z)`
pub fn log_q(alpha: &VariationalParams, z: &[f64]) -> Result<f64> {
    alpha.check_dim(z)?;
    Ok(gaussian_log_density(&alpha.m, &alpha.varrho(), z))
}

/// `log π0(z)`
pub fn log_prior(prior: &PriorConfig, z: &[f64]) -> Result<f64> {
    if z.len() != prior.dim() {
        return Err(Error::Dimension {
            context: "latent vector",
            expected: prior.dim(),
            got: z.len(),
        });
    }
    Ok(gaussian_log_density(&prior.mu, &prior.zeta, z))
}

fn check_pair(alpha: &VariationalParams, prior: &PriorConfig) -> Result<()> {
    if alpha.dim() != prior.dim() {
        return Err(Error::Dimension {
            context: "prior vs variational dimension",
            expected: prior.dim(),
            got: alpha.dim(),
        });
    }
    Ok(())
}

/// `KL(q_α ‖ π0) = Σ_j log(ζ_j/ϱ_j) + (ϱ_j² + (m_j − μ_j)²)/(2ζ_j²) − ½`.
pub fn kl_closed_form(alpha: &VariationalParams, prior: &PriorConfig) -> Result<f64> {
    check_pair(alpha, prior)?;
    let mut kl = 0.0;
    for j in 0..alpha.dim() {
        let s = softplus(alpha.rho[j]);
        let (mu, zeta) = (prior.mu[j], prior.zeta[j]);
        let d = alpha.m[j] - mu;
        kl += (zeta / s).ln() + (s * s + d * d) / (2.0 * zeta * zeta) - 0.5;
    }
    Ok(kl)
}

/// `∇_(m,ρ) KL(q_α ‖ π0)`.
pub fn kl_gradient(alpha: &VariationalParams, prior: &PriorConfig) -> Result<AlphaGrad> {
    check_pair(alpha, prior)?;
    let mut g = AlphaGrad::zeros(alpha.dim());
    for j in 0..alpha.dim() {
        let s = softplus(alpha.rho[j]);
        let z2 = prior.zeta[j] * prior.zeta[j];
        g.m[j] = (alpha.m[j] - prior.mu[j]) / z2;
        g.rho[j] = (-1.0 / s + s / z2) * sigmoid(alpha.rho[j]);
    }
    Ok(g)
}
