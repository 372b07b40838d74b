//! Variational empirical Bayes for neural networks: a Gaussian latent `z` is
//! pushed through a hypernetwork `G_η` to produce the weights of a base network,
//! and a mean-field posterior over `z` is fitted by stochastic ELBO ascent.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod models;
pub mod seeding;
pub mod training;
pub mod variational;

pub use data::{Dataset, NormStats};
pub use error::{Error, Result};
pub use eval::{MetricsReport, PredictiveSamples};
pub use linalg::DMatrix;
pub use models::{Activation, BaseNetSpec, Hypernet, HypernetSpec, NoiseModel, Task, WeightVector};
pub use training::{FittedModel, TrainConfig};
pub use variational::{PriorConfig, VariationalParams};
