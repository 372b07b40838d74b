//! The base network `f_w`, the hypernetwork `G_η: ℝ^r → ℝ^D`, and the
//! Jacobian penalty `‖∂G_η/∂z‖²_F`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Block, Noise, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::linalg::{affine_rows, softplus, DMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[serde(rename = "softplus")]
    SoftplusAct,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::SoftplusAct => softplus(x),
        }
    }

    fn unary(self) -> Unary {
        match self {
            Activation::Relu => Unary::Relu,
            Activation::SoftplusAct => Unary::Softplus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Binary,
    Multiclass { classes: usize },
}

/// How the Gaussian observation noise of a regression model is set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// One extra weight coordinate holds `log σ`, generated like any other weight.
    Learned,
    /// A fixed standard deviation (in normalized target units).
    Fixed(f64),
}

/// Architecture of the task network `f_w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseNetSpec {
    /// `[p, h₁, …, out]`
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub task: Task,
    #[serde(default = "default_noise")]
    pub noise: NoiseModel,
}

fn default_noise() -> NoiseModel {
    NoiseModel::Learned
}

impl BaseNetSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation, task: Task) -> Result<Self> {
        let spec = BaseNetSpec {
            layer_dims,
            activation,
            task,
            noise: NoiseModel::Learned,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Self {
        self.noise = noise;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(
                "layer_dims needs at least input and output widths".into(),
            ));
        }
        if self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        let out = *self.layer_dims.last().unwrap();
        let expected = match self.task {
            Task::Regression | Task::Binary => 1,
            Task::Multiclass { classes } => classes,
        };
        if out != expected {
            return Err(Error::Dimension {
                context: "base network output width",
                expected,
                got: out,
            });
        }
        if let (Task::Regression, NoiseModel::Fixed(s)) = (self.task, self.noise) {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!("fixed noise sigma {s} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn has_learned_noise(&self) -> bool {
        self.task == Task::Regression && self.noise == NoiseModel::Learned
    }

    /// Weights and biases of all affine layers.
    pub fn layer_weight_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    /// Total `D`, including the noise coordinate when learned.
    pub fn weight_count(&self) -> usize {
        self.layer_weight_count() + usize::from(self.has_learned_noise())
    }

    /// Position of the `log σ` coordinate, when present.
    pub fn noise_index(&self) -> Option<usize> {
        self.has_learned_noise().then(|| self.layer_weight_count())
    }

    /// Weight and bias blocks of each layer inside a flat vector held by `src`.
    pub fn layer_blocks(&self, src: Var) -> Vec<(Block, Block)> {
        layer_blocks(&self.layer_dims, src, 0)
    }

    /// Appends `f_w(x)` to the tape. `w` holds the flat weight vector, `x` is `n × p`.
    pub fn build_forward(&self, tape: &mut Tape, w: Var, x: Var) -> Var {
        let blocks = self.layer_blocks(w);
        let mut h = x;
        let last = blocks.len() - 1;
        for (k, (wb, bb)) in blocks.into_iter().enumerate() {
            h = tape.affine(h, wb, Some(bb));
            if k != last {
                h = tape.unary(self.activation.unary(), h);
            }
        }
        h
    }

    /// [`BaseNetSpec::build_forward`] for the weight vector stored at `offset` inside `w`.
    pub fn build_forward_at(&self, tape: &mut Tape, w: Var, offset: usize, x: Var) -> Var {
        let blocks = layer_blocks(&self.layer_dims, w, offset);
        let mut h = x;
        let last = blocks.len() - 1;
        for (k, (wb, bb)) in blocks.into_iter().enumerate() {
            h = tape.affine(h, wb, Some(bb));
            if k != last {
                h = tape.unary(self.activation.unary(), h);
            }
        }
        h
    }

    /// Appends `log L(D; w) = Σ_i log p(y_i | x_i, w)` for the weight vector at
    /// `offset` inside `w`. `y` is `n × 1`; class labels are stored as floats.
    pub fn build_loglik(&self, tape: &mut Tape, w: Var, offset: usize, x: Var, y: Var) -> Var {
        let out = self.build_forward_at(tape, w, offset, x);
        match self.task {
            Task::Regression => {
                let noise = match self.noise {
                    NoiseModel::Fixed(s) => Noise::Fixed(s),
                    NoiseModel::Learned => {
                        let at = offset + self.layer_weight_count();
                        Noise::LogSigma(tape.view(Block::new(w, at, 1, 1)))
                    }
                };
                tape.gaussian_loglik(out, y, noise)
            }
            Task::Binary => tape.bernoulli_loglik(out, y),
            Task::Multiclass { .. } => tape.categorical_loglik(out, y),
        }
    }

    /// Observation noise std implied by `w` (regression only).
    pub fn noise_std(&self, w: &[f64]) -> Option<f64> {
        match (self.task, self.noise) {
            (Task::Regression, NoiseModel::Fixed(s)) => Some(s),
            (Task::Regression, NoiseModel::Learned) => Some(w[self.layer_weight_count()].exp()),
            _ => None,
        }
    }

    /// Plain forward pass (no tape) for a batch `x` (`n × p`); returns `n × out`.
    pub fn forward(&self, w: &WeightVector, x: &DMatrix) -> Result<DMatrix> {
        if w.len() != self.weight_count() {
            return Err(Error::Dimension {
                context: "weight vector",
                expected: self.weight_count(),
                got: w.len(),
            });
        }
        if x.cols() != self.input_dim() {
            return Err(Error::Dimension {
                context: "base network input",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(dense_forward(&self.layer_dims, w.as_slice(), x, |v| self.activation.apply(v)))
    }

    /// Splits a weight vector into per-layer `(W, b)` matrices.
    pub fn unpack(&self, w: &WeightVector) -> Result<UnpackedWeights> {
        if w.len() != self.weight_count() {
            return Err(Error::Dimension {
                context: "weight vector",
                expected: self.weight_count(),
                got: w.len(),
            });
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for d in self.layer_dims.windows(2) {
            let (fan_in, fan_out) = (d[0], d[1]);
            let wm = DMatrix::from_vec(fan_out, fan_in, w.0[off..off + fan_in * fan_out].to_vec());
            off += fan_in * fan_out;
            let b = w.0[off..off + fan_out].to_vec();
            off += fan_out;
            layers.push((wm, b));
        }
        Ok(UnpackedWeights {
            layers,
            log_sigma: self.noise_index().map(|i| w.0[i]),
        })
    }

    pub fn pack(&self, u: &UnpackedWeights) -> Result<WeightVector> {
        let mut out = Vec::with_capacity(self.weight_count());
        if u.layers.len() + 1 != self.layer_dims.len() {
            return Err(Error::Dimension {
                context: "layer count",
                expected: self.layer_dims.len() - 1,
                got: u.layers.len(),
            });
        }
        for (k, (wm, b)) in u.layers.iter().enumerate() {
            if wm.shape() != (self.layer_dims[k + 1], self.layer_dims[k])
                || b.len() != self.layer_dims[k + 1]
            {
                return Err(Error::InvalidArgument(format!("layer {k} has the wrong shape")));
            }
            out.extend_from_slice(wm.as_slice());
            out.extend_from_slice(b);
        }
        match (self.has_learned_noise(), u.log_sigma) {
            (true, Some(s)) => out.push(s),
            (false, None) => {}
            _ => return Err(Error::InvalidArgument("noise coordinate mismatch".into())),
        }
        Ok(WeightVector(out))
    }
}

fn layer_blocks(dims: &[usize], src: Var, start: usize) -> Vec<(Block, Block)> {
    let mut off = start;
    dims.windows(2)
        .map(|d| {
            let (fan_in, fan_out) = (d[0], d[1]);
            let w = Block::new(src, off, fan_out, fan_in);
            off += fan_in * fan_out;
            let b = Block::new(src, off, 1, fan_out);
            off += fan_out;
            (w, b)
        })
        .collect()
}

/// Tape-free MLP forward over the layers `dims` packed at the start of
/// `params`; `act` follows every layer but the last. Matches the tape graph bit for bit.
fn dense_forward(dims: &[usize], params: &[f64], x: &DMatrix, act: impl Fn(f64) -> f64) -> DMatrix {
    let mut h = x.clone();
    let mut next = DMatrix::zeros(0, 0);
    let mut off = 0;
    let layers = dims.len() - 1;
    for (k, d) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (d[0], d[1]);
        let w = &params[off..off + fan_in * fan_out];
        off += fan_in * fan_out;
        let b = &params[off..off + fan_out];
        off += fan_out;
        affine_rows(&h, w, Some(b), fan_out, &mut next);
        if k + 1 != layers {
            next.as_mut_slice().iter_mut().for_each(|v| *v = act(*v));
        }
        std::mem::swap(&mut h, &mut next);
    }
    h
}

/// Per-layer weights as produced by [`BaseNetSpec::unpack`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnpackedWeights {
    /// `(W, b)` with `W` shaped `out × in`.
    pub layers: Vec<(DMatrix, Vec<f64>)>,
    pub log_sigma: Option<f64>,
}

/// Flat weight vector `w ∈ ℝ^D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Hypernetwork architecture `[r, g₁, …, D]`: ReLU hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypernetSpec {
    pub layer_dims: Vec<usize>,
}

impl HypernetSpec {
    pub fn new(latent_dim: usize, hidden: &[usize], output_dim: usize) -> Self {
        let mut layer_dims = vec![latent_dim];
        layer_dims.extend_from_slice(hidden);
        layer_dims.push(output_dim);
        HypernetSpec { layer_dims }
    }

    /// Default latent size for tabular regression: ten latent coordinates per feature.
    pub fn default_latent_dim(feature_dim: usize) -> usize {
        10 * feature_dim
    }

    pub fn latent_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 || self.layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(
                "hypernetwork layer_dims must have at least two positive entries".into(),
            ));
        }
        Ok(())
    }

    pub fn layer_blocks(&self, eta: Var) -> Vec<(Block, Block)> {
        layer_blocks(&self.layer_dims, eta, 0)
    }

    /// Appends `G_η(z)` to the tape; `z` is `H × r`, the result `H × D`.
    /// Also returns the hidden pre-activations (used to gate Jacobian products).
    pub fn build_forward(&self, tape: &mut Tape, eta: Var, z: Var) -> (Var, Vec<Var>) {
        let blocks = self.layer_blocks(eta);
        let last = blocks.len() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut h = z;
        for (k, (wb, bb)) in blocks.into_iter().enumerate() {
            h = tape.affine(h, wb, Some(bb));
            if k != last {
                pre.push(h);
                h = tape.relu(h);
            }
        }
        (h, pre)
    }

    /// Appends `Σ_k ‖J probe_k‖²` where `J = ∂G_η/∂z` at the point whose
    /// pre-activations are `pre` and `probes` is `K × r`.
    pub fn build_jacobian_probe(&self, tape: &mut Tape, eta: Var, pre: &[Var], probes: Var) -> Var {
        let blocks = self.layer_blocks(eta);
        let mut v = probes;
        for (k, (wb, _)) in blocks.into_iter().enumerate() {
            v = tape.affine(v, wb, None);
            if let Some(&gate) = pre.get(k) {
                v = tape.gate(v, gate);
            }
        }
        tape.sum_squares(v)
    }
}

/// A hypernetwork with concrete parameters `η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypernet {
    pub spec: HypernetSpec,
    pub eta: Vec<f64>,
}

/// Exact Frobenius norm, or the random-probe estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum JacobianMode {
    Exact,
    Estimate { probes: usize },
}

impl JacobianMode {
    /// Exact up to latent size 64, a 64-probe estimate above that.
    pub fn default_for(latent_dim: usize) -> Self {
        if latent_dim <= 64 {
            JacobianMode::Exact
        } else {
            JacobianMode::Estimate { probes: 64 }
        }
    }
}

/// Probe matrix for [`HypernetSpec::build_jacobian_probe`], scaled so that
/// the probe sum is an (unbiased, for `Estimate`) value of `‖J‖²_F`.
pub fn jacobian_probes<R: Rng + ?Sized>(mode: JacobianMode, latent_dim: usize, rng: &mut R) -> DMatrix {
    match mode {
        JacobianMode::Exact => DMatrix::identity(latent_dim),
        JacobianMode::Estimate { probes } => {
            let k = probes.max(1);
            let scale = 1.0 / (k as f64).sqrt();
            DMatrix::from_fn(k, latent_dim, |_, _| {
                scale * rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
        }
    }
}

impl Hypernet {
    /// Uniform `U(−1/√fan_in, 1/√fan_in)` initialization of every weight and bias.
    pub fn init<R: Rng + ?Sized>(spec: HypernetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut eta = Vec::with_capacity(spec.param_count());
        for d in spec.layer_dims.windows(2) {
            let bound = 1.0 / (d[0] as f64).sqrt();
            for _ in 0..(d[0] + 1) * d[1] {
                eta.push(rng.random_range(-bound..bound));
            }
        }
        Ok(Hypernet { spec, eta })
    }

    pub fn from_parts(spec: HypernetSpec, eta: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if eta.len() != spec.param_count() {
            return Err(Error::Dimension {
                context: "hypernetwork parameters",
                expected: spec.param_count(),
                got: eta.len(),
            });
        }
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite hypernetwork parameter".into()));
        }
        Ok(Hypernet { spec, eta })
    }

    /// Single linear layer `w = A z + b` (`A` is `D × r`).
    pub fn linear(a: &DMatrix, b: &[f64]) -> Result<Self> {
        let spec = HypernetSpec {
            layer_dims: vec![a.cols(), a.rows()],
        };
        let mut eta = a.as_slice().to_vec();
        eta.extend_from_slice(b);
        Hypernet::from_parts(spec, eta)
    }

    /// The identity map on `ℝ^r`.
    pub fn identity(r: usize) -> Self {
        Hypernet::linear(&DMatrix::identity(r), &vec![0.0; r]).expect("identity hypernet")
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn eta_matrix(&self) -> DMatrix {
        DMatrix::row_vector(self.eta.clone())
    }

    /// `w = G_η(z)`.
    pub fn forward(&self, z: &[f64]) -> Result<WeightVector> {
        if z.len() != self.latent_dim() {
            return Err(Error::Dimension {
                context: "latent vector",
                expected: self.latent_dim(),
                got: z.len(),
            });
        }
        let zm = DMatrix::row_vector(z.to_vec());
        let w = dense_forward(&self.spec.layer_dims, &self.eta, &zm, |v| v.max(0.0));
        Ok(WeightVector(w.into_vec()))
    }

    /// `‖∂G_η/∂z‖²_F` at `z` together with its gradient with respect to `η`.
    pub fn jacobian_frobenius_sq<R: Rng + ?Sized>(
        &self,
        z: &[f64],
        mode: JacobianMode,
        rng: &mut R,
    ) -> Result<(f64, Vec<f64>)> {
        if z.len() != self.latent_dim() {
            return Err(Error::Dimension {
                context: "latent vector",
                expected: self.latent_dim(),
                got: z.len(),
            });
        }
        let mut tape = Tape::new();
        let eta = tape.input("eta");
        let zv = tape.data("z");
        let probes = tape.data("probes");
        let (_, pre) = self.spec.build_forward(&mut tape, eta, zv);
        let root = self.spec.build_jacobian_probe(&mut tape, eta, &pre, probes);
        tape.set_root(root);
        let zm = DMatrix::row_vector(z.to_vec());
        let pm = jacobian_probes(mode, self.latent_dim(), rng);
        let value = tape.forward(&[("eta", &self.eta_matrix()), ("z", &zm), ("probes", &pm)])?;
        tape.backpropagate()?;
        Ok((value, tape.adjoint(eta).as_slice().to_vec()))
    }
}

const WEIGHT_MAGIC: &[u8; 8] = b"NAEBWVEC";
const WEIGHT_VERSION: u32 = 1;

/// Writes a flat little-endian `f64` vector behind a 16-byte header:
/// 8-byte magic, `u32` version, `u32` length.
pub fn write_weights<W: Write>(mut out: W, values: &[f64]) -> Result<()> {
    let len = u32::try_from(values.len())
        .map_err(|_| Error::Format("weight vector too long for the file header".into()))?;
    out.write_all(WEIGHT_MAGIC)?;
    out.write_all(&WEIGHT_VERSION.to_le_bytes())?;
    out.write_all(&len.to_le_bytes())?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_weights<R: Read>(mut input: R) -> Result<Vec<f64>> {
    let mut header = [0u8; 16];
    input.read_exact(&mut header)?;
    if &header[..8] != WEIGHT_MAGIC {
        return Err(Error::Format("bad weight file magic".into()));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != WEIGHT_VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let len = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != len * 8 {
        return Err(Error::Format(format!(
            "weight file declares {len} values but holds {} bytes",
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn save_weights(path: &Path, values: &[f64]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_weights(f, values)
}

pub fn load_weights(path: &Path) -> Result<Vec<f64>> {
    read_weights(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> DMatrix {
        DMatrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn weight_count_formula() {
        let s = BaseNetSpec::new(vec![2, 20, 20, 1], Activation::Relu, Task::Binary).unwrap();
        assert_eq!(s.weight_count(), 3 * 20 + 21 * 20 + 21);
        let r = BaseNetSpec::new(vec![6, 100, 50, 1], Activation::Relu, Task::Regression).unwrap();
        assert_eq!(r.weight_count(), 7 * 100 + 101 * 50 + 51 + 1);
        assert_eq!(r.with_noise(NoiseModel::Fixed(1.0)).weight_count(), 7 * 100 + 101 * 50 + 51);
    }

    #[test]
    fn output_width_must_match_task() {
        assert!(BaseNetSpec::new(vec![4, 3], Activation::Relu, Task::Regression).is_err());
        assert!(BaseNetSpec::new(vec![4, 3], Activation::Relu, Task::Multiclass { classes: 3 }).is_ok());
    }

    #[test]
    fn identity_hypernet_is_identity() {
        let h = Hypernet::identity(4);
        let z = [0.5, -1.0, 2.0, 3.5];
        assert_eq!(h.forward(&z).unwrap().0, z.to_vec());
    }

    #[test]
    fn linear_hypernet_matches_matmul() {
        let mut r = rng(1);
        let a = random_matrix(5, 3, &mut r);
        let b: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();
        let h = Hypernet::linear(&a, &b).unwrap();
        let z = vec![0.3, -0.2, 0.9];
        let expected = a.matmul(&DMatrix::column_vector(z.clone()));
        let got = h.forward(&z).unwrap();
        for i in 0..5 {
            assert!((got.0[i] - (expected.as_slice()[i] + b[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn relu_hypernet_at_zero_latent() {
        // hand-unrolled: hidden = relu(b1); out = W2 · hidden + b2
        let spec = HypernetSpec::new(2, &[3], 2);
        let eta = vec![
            0.1, 0.2, -0.3, 0.4, 0.5, 0.6, // W1 (3x2)
            0.5, -1.0, 2.0, // b1
            1.0, 2.0, 3.0, -1.0, 0.0, 1.0, // W2 (2x3)
            0.25, -0.25, // b2
        ];
        let h = Hypernet::from_parts(spec, eta).unwrap();
        let hidden = [0.5, 0.0, 2.0];
        let w = h.forward(&[0.0, 0.0]).unwrap();
        let o0 = 1.0 * hidden[0] + 2.0 * hidden[1] + 3.0 * hidden[2] + 0.25;
        let o1 = -1.0 * hidden[0] + 0.0 * hidden[1] + 1.0 * hidden[2] - 0.25;
        assert_eq!(w.0, vec![o0, o1]);
    }

    #[test]
    fn hypernet_dimension_mismatch() {
        assert!(matches!(
            Hypernet::identity(3).forward(&[1.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let s = BaseNetSpec::new(vec![3, 5, 2], Activation::Relu, Task::Multiclass { classes: 2 }).unwrap();
        let w = WeightVector(vec![0.0; s.weight_count()]);
        let x = DMatrix::from_vec(2, 3, vec![1., 2., 3., -4., 5., 6.]);
        let out = s.forward(&w, &x).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_base_is_affine() {
        let s = BaseNetSpec::new(vec![3, 2], Activation::Relu, Task::Multiclass { classes: 2 }).unwrap();
        let mut r = rng(2);
        let wm = random_matrix(2, 3, &mut r);
        let b = vec![0.5, -0.5];
        let w = s
            .pack(&UnpackedWeights {
                layers: vec![(wm.clone(), b.clone())],
                log_sigma: None,
            })
            .unwrap();
        let x = random_matrix(4, 3, &mut r);
        let expected = x.matmul(&wm.transpose());
        let got = s.forward(&w, &x).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                assert!((got.get(i, j) - expected.get(i, j) - b[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn base_forward_gradient_matches_fd() {
        let s = BaseNetSpec::new(vec![2, 20, 20, 1], Activation::Relu, Task::Binary).unwrap();
        let mut r = rng(3);
        let w: Vec<f64> = (0..s.weight_count()).map(|_| r.random_range(-0.8..0.8)).collect();
        let x = random_matrix(5, 2, &mut r);
        let weights = DMatrix::from_fn(5, 1, |i, _| 0.3 + 0.1 * i as f64);
        let mut tape = Tape::new();
        let wv = tape.input("w");
        let xv = tape.data("x");
        let cw = tape.constant(weights);
        let out = s.build_forward(&mut tape, wv, xv);
        let out = tape.mul(out, cw);
        tape.sum(out);
        let wm = DMatrix::row_vector(w.clone());
        tape.forward(&[("w", &wm), ("x", &x)]).unwrap();
        let g = tape.backward().unwrap().remove("w").unwrap();
        let h = 1e-5;
        for j in 0..w.len() {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm_ = w.clone();
            wm_[j] -= h;
            let fp = tape.forward(&[("w", &DMatrix::row_vector(wp)), ("x", &x)]).unwrap();
            let fm = tape.forward(&[("w", &DMatrix::row_vector(wm_)), ("x", &x)]).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let a = g.as_slice()[j];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1.0) < 1e-4, "w[{j}]: {a} vs {fd}");
        }
    }

    /// ∂ f_{G_η(z)}(x) / ∂z through the whole composition.
    #[test]
    fn composition_gradient_wrt_latent_matches_fd() {
        let base = BaseNetSpec::new(vec![2, 4, 1], Activation::SoftplusAct, Task::Regression)
            .unwrap()
            .with_noise(NoiseModel::Fixed(1.0));
        let mut r = rng(4);
        let hyper = Hypernet::init(HypernetSpec::new(3, &[6], base.weight_count()), &mut r).unwrap();
        let x = random_matrix(3, 2, &mut r);
        let mut tape = Tape::new();
        let eta = tape.data("eta");
        let z = tape.input("z");
        let xv = tape.data("x");
        let (w, _) = hyper.spec.build_forward(&mut tape, eta, z);
        let out = base.build_forward(&mut tape, w, xv);
        tape.sum(out);
        let em = hyper.eta_matrix();
        let z0 = vec![0.2, -0.4, 0.9];
        tape.forward(&[("eta", &em), ("z", &DMatrix::row_vector(z0.clone())), ("x", &x)]).unwrap();
        let g = tape.backward().unwrap().remove("z").unwrap();
        for j in 0..3 {
            let h = 1e-5;
            let mut zp = z0.clone();
            zp[j] += h;
            let mut zm = z0.clone();
            zm[j] -= h;
            let fp = tape.forward(&[("eta", &em), ("z", &DMatrix::row_vector(zp)), ("x", &x)]).unwrap();
            let fm = tape.forward(&[("eta", &em), ("z", &DMatrix::row_vector(zm)), ("x", &x)]).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let a = g.as_slice()[j];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1.0) < 1e-4);
        }
    }

    #[test]
    fn identity_jacobian_norm_is_r() {
        let h = Hypernet::identity(5);
        let (v, _) = h.jacobian_frobenius_sq(&[0.1; 5], JacobianMode::Exact, &mut rng(0)).unwrap();
        assert!((v - 5.0).abs() < 1e-12);
    }

    #[test]
    fn linear_jacobian_norm_is_sum_of_squares() {
        let mut r = rng(5);
        let a = random_matrix(7, 4, &mut r);
        let h = Hypernet::linear(&a, &[0.0; 7]).unwrap();
        let (v, g) = h.jacobian_frobenius_sq(&[1.0, 2.0, 3.0, 4.0], JacobianMode::Exact, &mut r).unwrap();
        assert!((v - a.sum_squares()).abs() < 1e-12);
        // d/dA Σ A² = 2A; the bias does not enter
        for (k, &gk) in g.iter().enumerate() {
            let expected = if k < 28 { 2.0 * a.as_slice()[k] } else { 0.0 };
            assert!((gk - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_linear_map_has_zero_jacobian() {
        let h = Hypernet::linear(&DMatrix::zeros(3, 2), &[1.0, 2.0, 3.0]).unwrap();
        let (v, _) = h.jacobian_frobenius_sq(&[0.5, 0.5], JacobianMode::Exact, &mut rng(0)).unwrap();
        assert_eq!(v, 0.0);
    }

    /// Exact mode against an independent finite-difference Jacobian.
    #[test]
    fn exact_jacobian_matches_fd_jacobian() {
        let mut r = rng(6);
        let h = Hypernet::init(HypernetSpec::new(3, &[8, 8], 5), &mut r).unwrap();
        let z = [0.3, -0.7, 1.1];
        let mut fro = 0.0;
        for j in 0..3 {
            let eps = 1e-6;
            let mut zp = z;
            zp[j] += eps;
            let mut zm = z;
            zm[j] -= eps;
            let (wp, wm) = (h.forward(&zp).unwrap(), h.forward(&zm).unwrap());
            for i in 0..5 {
                let d = (wp.0[i] - wm.0[i]) / (2.0 * eps);
                fro += d * d;
            }
        }
        let (v, _) = h.jacobian_frobenius_sq(&z, JacobianMode::Exact, &mut r).unwrap();
        assert!((v - fro).abs() / fro < 1e-6);
    }

    #[test]
    fn jacobian_gradient_wrt_eta_matches_fd() {
        let mut r = rng(7);
        let h = Hypernet::init(HypernetSpec::new(3, &[6], 4), &mut r).unwrap();
        let z = [0.4, -0.2, 0.8];
        let (_, g) = h.jacobian_frobenius_sq(&z, JacobianMode::Exact, &mut r).unwrap();
        for k in 0..h.eta.len() {
            let eps = 1e-5;
            let mut hp = h.clone();
            hp.eta[k] += eps;
            let mut hm = h.clone();
            hm.eta[k] -= eps;
            let fp = hp.jacobian_frobenius_sq(&z, JacobianMode::Exact, &mut r).unwrap().0;
            let fm = hm.jacobian_frobenius_sq(&z, JacobianMode::Exact, &mut r).unwrap().0;
            let fd = (fp - fm) / (2.0 * eps);
            assert!((g[k] - fd).abs() / g[k].abs().max(fd.abs()).max(1.0) < 1e-4, "eta[{k}]");
        }
    }

    #[test]
    fn probe_estimate_tracks_exact() {
        let mut r = rng(8);
        let h = Hypernet::init(HypernetSpec::new(8, &[32], 16), &mut r).unwrap();
        let z: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();
        let (exact, _) = h.jacobian_frobenius_sq(&z, JacobianMode::Exact, &mut r).unwrap();
        let trials = 100;
        let mut mean_rel = 0.0;
        for _ in 0..trials {
            let (est, _) = h
                .jacobian_frobenius_sq(&z, JacobianMode::Estimate { probes: 64 }, &mut r)
                .unwrap();
            mean_rel += (est - exact).abs() / exact;
        }
        mean_rel /= trials as f64;
        assert!(mean_rel < 0.25, "mean relative error {mean_rel}");
    }

    #[test]
    fn weight_file_round_trip_and_header() {
        let v = vec![1.5, -2.25, f64::MIN_POSITIVE, 0.0];
        let mut buf = Vec::new();
        write_weights(&mut buf, &v).unwrap();
        assert_eq!(buf.len(), 16 + 32);
        assert_eq!(&buf[..8], b"NAEBWVEC");
        assert_eq!(read_weights(&buf[..]).unwrap(), v);
        buf[0] = b'X';
        assert!(read_weights(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(
            dims in proptest::collection::vec(1usize..6, 1..4),
            seed in any::<u64>(),
        ) {
            let mut layer_dims = dims.clone();
            layer_dims.push(1);
            let s = BaseNetSpec::new(layer_dims, Activation::Relu, Task::Regression).unwrap();
            let mut r = rng(seed);
            let w = WeightVector((0..s.weight_count()).map(|_| r.random_range(-5.0..5.0)).collect());
            let u = s.unpack(&w).unwrap();
            prop_assert_eq!(s.pack(&u).unwrap(), w);
        }

        #[test]
        fn jacobian_norm_is_nonnegative(seed in any::<u64>()) {
            let mut r = rng(seed);
            let h = Hypernet::init(HypernetSpec::new(3, &[5], 4), &mut r).unwrap();
            let z: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let (v, _) = h.jacobian_frobenius_sq(&z, JacobianMode::Exact, &mut r).unwrap();
            prop_assert!(v >= 0.0);
        }
    }
}
