//! Reverse-mode automatic differentiation on a static tape.
//!
//! A [`Tape`] is built once (nodes are appended in topological order by
//! construction), then evaluated any number of times with fresh input
//! bindings. Every evaluation caches node values; [`Tape::backward`] then
//! propagates adjoints from a scalar root back to the named inputs.
//!
//! Weight matrices are never materialized as separate nodes: an affine node
//! reads its weights straight out of a flat parameter node through a
//! [`Block`], and scatters its weight gradient back into that node's
//! adjoint. Both the hypernetwork (weights carved from `η`) and the base
//! network (weights carved from the generated `w`) use this.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{affine_rows, axpy, sigmoid, softplus, DMatrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A row-major `rows × cols` window into the flat data of another node,
/// starting at `offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub src: Var,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn new(src: Var, offset: usize, rows: usize, cols: usize) -> Self {
        Block {
            src,
            offset,
            rows,
            cols,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn end(&self) -> usize {
        self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Softplus,
    Sigmoid,
    Exp,
    Log,
    Square,
    Tanh,
}

/// Observation noise of a Gaussian log-likelihood node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Noise {
    /// Fixed standard deviation.
    Fixed(f64),
    /// A `1 × 1` node holding `log σ`.
    LogSigma(Var),
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Constant(DMatrix),
    View(Block),
    Affine { x: Var, w: Block, b: Option<Block> },
    Unary(Unary, Var),
    Gate { x: Var, gate: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var, f64),
    Sum(Var),
    SumSquares(Var),
    LogSoftmax(Var),
    GaussianLogLik { mean: Var, target: Var, noise: Noise },
    BernoulliLogLik { logits: Var, target: Var },
    CategoricalLogLik { logits: Var, labels: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Constant(_) => "constant",
            Op::View(_) => "view",
            Op::Affine { .. } => "affine",
            Op::Unary(..) => "unary",
            Op::Gate { .. } => "gate",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::LogSoftmax(_) => "log_softmax",
            Op::GaussianLogLik { .. } => "gaussian_loglik",
            Op::BernoulliLogLik { .. } => "bernoulli_loglik",
            Op::CategoricalLogLik { .. } => "categorical_loglik",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Input | Op::Constant(_) => vec![],
            Op::View(b) => vec![b.src],
            Op::Affine { x, w, b } => {
                let mut p = vec![x, w.src];
                if let Some(b) = b {
                    p.push(b.src);
                }
                p
            }
            Op::Unary(_, a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::LogSoftmax(a) => vec![a],
            Op::Gate { x, gate } => vec![x, gate],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::GaussianLogLik {
                mean,
                target,
                noise,
            } => match noise {
                Noise::Fixed(_) => vec![mean, target],
                Noise::LogSigma(s) => vec![mean, target, s],
            },
            Op::BernoulliLogLik { logits, target } => vec![logits, target],
            Op::CategoricalLogLik { logits, labels } => vec![logits, labels],
        }
    }
}

/// Gradients of the root with respect to every differentiable named input.
pub type Gradients = HashMap<String, DMatrix>;

/// A static reverse-mode tape with a scalar root.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    values: Vec<DMatrix>,
    adjoints: Vec<DMatrix>,
    inputs: Vec<(String, Var, bool)>,
    root: Option<Var>,
    evaluated: bool,
}

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, needs_grad: bool) -> Var {
        for p in op.parents() {
            assert!(p.0 < self.ops.len(), "node refers to a later node");
        }
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.values.push(DMatrix::default());
        self.adjoints.push(DMatrix::default());
        self.evaluated = false;
        Var(self.ops.len() - 1)
    }

    fn push_derived(&mut self, op: Op) -> Var {
        let needs = op.parents().iter().any(|p| self.needs_grad[p.0]);
        self.push(op, needs)
    }

    /// A differentiable named input.
    pub fn input(&mut self, name: &str) -> Var {
        self.named(name, true)
    }

    /// A named input treated as a constant (data, labels, probes).
    pub fn data(&mut self, name: &str) -> Var {
        self.named(name, false)
    }

    fn named(&mut self, name: &str, differentiable: bool) -> Var {
        assert!(
            self.inputs.iter().all(|(n, _, _)| n != name),
            "duplicate input name `{name}`"
        );
        let v = self.push(
            Op::Input,
            differentiable,
        );
        self.inputs.push((name.to_string(), v, differentiable));
        v
    }

    pub fn constant(&mut self, value: DMatrix) -> Var {
        self.push(Op::Constant(value), false)
    }

    /// Materializes a block of another node as its own node.
    pub fn view(&mut self, block: Block) -> Var {
        self.push_derived(Op::View(block))
    }

    /// `x · Wᵀ + b` with `W` (`out × in`) and `b` (`out` entries) read from blocks.
    pub fn affine(&mut self, x: Var, w: Block, b: Option<Block>) -> Var {
        assert_ne!(x, w.src, "affine input cannot alias its weights");
        if let Some(b) = b {
            assert_ne!(x, b.src, "affine input cannot alias its bias");
            assert_eq!(b.len(), w.rows, "bias length must equal output width");
        }
        self.push_derived(Op::Affine { x, w, b })
    }

    pub fn unary(&mut self, f: Unary, a: Var) -> Var {
        self.push_derived(Op::Unary(f, a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }

    /// `x ⊙ 1(gate > 0)`; `gate` is treated as a constant and may be a single
    /// row broadcast over the rows of `x`.
    pub fn gate(&mut self, x: Var, gate: Var) -> Var {
        let needs = self.needs_grad[x.0];
        self.push(Op::Gate { x, gate }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push_derived(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push_derived(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push_derived(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.push_derived(Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.push_derived(Op::Offset(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.push_derived(Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        self.push_derived(Op::SumSquares(a))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.push_derived(Op::LogSoftmax(a))
    }

    /// `Σᵢ log N(targetᵢ; meanᵢ, σ²)`.
    pub fn gaussian_loglik(&mut self, mean: Var, target: Var, noise: Noise) -> Var {
        self.push_derived(Op::GaussianLogLik {
            mean,
            target,
            noise,
        })
    }

    /// `Σᵢ yᵢ fᵢ − log(1 + e^{fᵢ})` for targets in {0, 1}.
    pub fn bernoulli_loglik(&mut self, logits: Var, target: Var) -> Var {
        let needs = self.needs_grad[logits.0];
        self.push(Op::BernoulliLogLik { logits, target }, needs)
    }

    /// `Σᵢ log softmax(logitsᵢ)[labelᵢ]` with labels stored as `n × 1` floats.
    pub fn categorical_loglik(&mut self, logits: Var, labels: Var) -> Var {
        let needs = self.needs_grad[logits.0];
        self.push(Op::CategoricalLogLik { logits, labels }, needs)
    }

    /// Marks the scalar root. Defaults to the last node.
    pub fn set_root(&mut self, v: Var) {
        self.root = Some(v);
    }

    pub fn root(&self) -> Option<Var> {
        self.root.or_else(|| self.ops.len().checked_sub(1).map(Var))
    }

    /// Value cached by the last forward pass.
    pub fn value(&self, v: Var) -> &DMatrix {
        &self.values[v.0]
    }

    /// Adjoint from the last backward pass.
    pub fn adjoint(&self, v: Var) -> &DMatrix {
        &self.adjoints[v.0]
    }

    pub fn input_var(&self, name: &str) -> Option<Var> {
        self.inputs
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|&(_, v, _)| v)
    }

    /// Evaluates every node with the given bindings and returns the root value.
    pub fn forward(&mut self, inputs: &[(&str, &DMatrix)]) -> Result<f64> {
        self.evaluated = false;
        for (name, var, _) in &self.inputs {
            let bound = inputs
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::UnboundInput(name.clone()))?;
            self.values[var.0].assign(bound.1);
        }
        self.evaluate()
    }

    /// Mutable access to the stored value of an input node, so large inputs
    /// can be updated in place between calls to [`Tape::evaluate`].
    pub fn input_value_mut(&mut self, v: Var) -> &mut DMatrix {
        assert!(matches!(self.ops[v.0], Op::Input), "node {} is not an input", v.0);
        self.evaluated = false;
        &mut self.values[v.0]
    }

    /// The stored value of an input together with its adjoint from the last
    /// backward pass (empty when the input is not differentiable).
    pub fn input_and_adjoint_mut(&mut self, v: Var) -> (&mut DMatrix, &DMatrix) {
        assert!(matches!(self.ops[v.0], Op::Input), "node {} is not an input", v.0);
        self.evaluated = false;
        (&mut self.values[v.0], &self.adjoints[v.0])
    }

    /// Copies `value` into the named input.
    pub fn bind(&mut self, name: &str, value: &DMatrix) -> Result<()> {
        let v = self
            .input_var(name)
            .ok_or_else(|| Error::UnboundInput(name.to_string()))?;
        self.input_value_mut(v).assign(value);
        Ok(())
    }

    /// Evaluates every node using the input values already stored on the tape.
    pub fn evaluate(&mut self) -> Result<f64> {
        self.evaluated = false;
        for i in 0..self.ops.len() {
            if matches!(self.ops[i], Op::Input) {
                continue;
            }
            let mut out = std::mem::take(&mut self.values[i]);
            let res = eval_node(i, &self.ops[i], &self.values, &mut out);
            self.values[i] = out;
            res?;
        }
        self.evaluated = true;
        let root = self.root().ok_or(Error::Usage("empty tape"))?;
        let v = &self.values[root.0];
        if v.shape() != (1, 1) {
            return Err(Error::Shape {
                node: root.0,
                op: self.ops[root.0].name(),
                detail: format!("root must be 1x1, got {}x{}", v.rows(), v.cols()),
            });
        }
        Ok(v.get(0, 0))
    }

    /// Propagates adjoints from the root; afterwards [`Tape::adjoint`] holds
    /// `∂root/∂node` for every node that depends on a differentiable input.
    pub fn backpropagate(&mut self) -> Result<()> {
        if !self.evaluated {
            return Err(Error::Usage("backward called before forward"));
        }
        let root = self.root().ok_or(Error::Usage("empty tape"))?;
        for (i, adj) in self.adjoints.iter_mut().enumerate() {
            if self.needs_grad[i] && i <= root.0 {
                let (r, c) = self.values[i].shape();
                adj.reset(r, c);
            } else {
                adj.reset(0, 0);
            }
        }
        if !self.needs_grad[root.0] {
            return Ok(());
        }
        self.adjoints[root.0].as_mut_slice()[0] = 1.0;
        for i in (0..=root.0).rev() {
            if !self.needs_grad[i] || matches!(self.ops[i], Op::Input | Op::Constant(_)) {
                continue;
            }
            let (before, after) = self.adjoints.split_at_mut(i);
            backprop_node(&self.ops[i], &self.values, &self.needs_grad, &after[0], &self.values[i], before);
        }
        Ok(())
    }

    /// Runs [`Tape::backpropagate`] and returns gradients for all
    /// differentiable named inputs.
    pub fn backward(&mut self) -> Result<Gradients> {
        self.backpropagate()?;
        let mut out = Gradients::new();
        for (name, var, differentiable) in &self.inputs {
            if *differentiable {
                let adj = &self.adjoints[var.0];
                let g = if adj.is_empty() {
                    let (r, c) = self.values[var.0].shape();
                    DMatrix::zeros(r, c)
                } else {
                    adj.clone()
                };
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail,
    }
}

fn block_slice<'a>(values: &'a [DMatrix], b: &Block) -> Option<&'a [f64]> {
    values[b.src.0].as_slice().get(b.offset..b.end())
}

fn eval_node(i: usize, op: &Op, values: &[DMatrix], out: &mut DMatrix) -> Result<()> {
    match op {
        Op::Input => unreachable!(),
        Op::Constant(c) => out.assign(c),
        Op::View(b) => {
            let s = block_slice(values, b).ok_or_else(|| {
                shape_err(i, op, format!("block {}..{} out of range", b.offset, b.end()))
            })?;
            out.reset(b.rows, b.cols);
            out.as_mut_slice().copy_from_slice(s);
        }
        Op::Affine { x, w, b } => {
            let xv = &values[x.0];
            if xv.cols() != w.cols {
                return Err(shape_err(
                    i,
                    op,
                    format!("input has {} columns, weights expect {}", xv.cols(), w.cols),
                ));
            }
            let ws = block_slice(values, w).ok_or_else(|| {
                shape_err(i, op, format!("weight block {}..{} out of range", w.offset, w.end()))
            })?;
            let bs = match b {
                Some(b) => Some(block_slice(values, b).ok_or_else(|| {
                    shape_err(i, op, format!("bias block {}..{} out of range", b.offset, b.end()))
                })?),
                None => None,
            };
            affine_rows(xv, ws, bs, w.rows, out);
        }
        Op::Unary(f, a) => {
            let av = &values[a.0];
            out.reset(av.rows(), av.cols());
            let f = *f;
            for (y, &x) in out.as_mut_slice().iter_mut().zip(av.as_slice()) {
                *y = match f {
                    Unary::Relu => x.max(0.0),
                    Unary::Softplus => softplus(x),
                    Unary::Sigmoid => sigmoid(x),
                    Unary::Exp => x.exp(),
                    Unary::Log => x.ln(),
                    Unary::Square => x * x,
                    Unary::Tanh => x.tanh(),
                };
            }
        }
        Op::Gate { x, gate } => {
            let (xv, gv) = (&values[x.0], &values[gate.0]);
            if gv.cols() != xv.cols() || (gv.rows() != 1 && gv.rows() != xv.rows()) {
                return Err(shape_err(
                    i,
                    op,
                    format!("gate {:?} does not broadcast to {:?}", gv.shape(), xv.shape()),
                ));
            }
            out.assign(xv);
            for r in 0..xv.rows() {
                let g = if gv.rows() == 1 { gv.row(0) } else { gv.row(r) };
                for (y, &gi) in out.row_mut(r).iter_mut().zip(g) {
                    if gi <= 0.0 {
                        *y = 0.0;
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (av, bv) = (&values[a.0], &values[b.0]);
            if av.shape() != bv.shape() {
                return Err(shape_err(
                    i,
                    op,
                    format!("operands {:?} and {:?}", av.shape(), bv.shape()),
                ));
            }
            out.assign(av);
            let ys = out.as_mut_slice();
            match op {
                Op::Add(..) => ys.iter_mut().zip(bv.as_slice()).for_each(|(y, b)| *y += b),
                Op::Sub(..) => ys.iter_mut().zip(bv.as_slice()).for_each(|(y, b)| *y -= b),
                _ => ys.iter_mut().zip(bv.as_slice()).for_each(|(y, b)| *y *= b),
            }
        }
        Op::Scale(a, c) => {
            out.assign(&values[a.0]);
            out.as_mut_slice().iter_mut().for_each(|y| *y *= c);
        }
        Op::Offset(a, c) => {
            out.assign(&values[a.0]);
            out.as_mut_slice().iter_mut().for_each(|y| *y += c);
        }
        Op::Sum(a) => {
            let s = values[a.0].sum();
            out.reset(1, 1);
            out.as_mut_slice()[0] = s;
        }
        Op::SumSquares(a) => {
            let s = values[a.0].sum_squares();
            out.reset(1, 1);
            out.as_mut_slice()[0] = s;
        }
        Op::LogSoftmax(a) => {
            let av = &values[a.0];
            out.assign(av);
            for r in 0..av.rows() {
                let row = out.row_mut(r);
                let lse = crate::linalg::log_sum_exp(row);
                row.iter_mut().for_each(|y| *y -= lse);
            }
        }
        Op::GaussianLogLik {
            mean,
            target,
            noise,
        } => {
            let (mv, tv) = (&values[mean.0], &values[target.0]);
            if mv.len() != tv.len() {
                return Err(shape_err(
                    i,
                    op,
                    format!("mean has {} entries, target {}", mv.len(), tv.len()),
                ));
            }
            let log_sigma = match noise {
                Noise::Fixed(s) => s.ln(),
                Noise::LogSigma(v) => {
                    let sv = &values[v.0];
                    if sv.len() != 1 {
                        return Err(shape_err(i, op, "log sigma must be 1x1".into()));
                    }
                    sv.as_slice()[0]
                }
            };
            let inv_var = (-2.0 * log_sigma).exp();
            let sse: f64 = mv
                .as_slice()
                .iter()
                .zip(tv.as_slice())
                .map(|(m, t)| (t - m) * (t - m))
                .sum();
            let n = mv.len() as f64;
            out.reset(1, 1);
            out.as_mut_slice()[0] = -n * (HALF_LOG_2PI + log_sigma) - 0.5 * inv_var * sse;
        }
        Op::BernoulliLogLik { logits, target } => {
            let (fv, tv) = (&values[logits.0], &values[target.0]);
            if fv.len() != tv.len() {
                return Err(shape_err(
                    i,
                    op,
                    format!("logits have {} entries, targets {}", fv.len(), tv.len()),
                ));
            }
            let s: f64 = fv
                .as_slice()
                .iter()
                .zip(tv.as_slice())
                .map(|(&f, &y)| y * f - softplus(f))
                .sum();
            out.reset(1, 1);
            out.as_mut_slice()[0] = s;
        }
        Op::CategoricalLogLik { logits, labels } => {
            let (fv, lv) = (&values[logits.0], &values[labels.0]);
            if fv.rows() != lv.len() {
                return Err(shape_err(
                    i,
                    op,
                    format!("{} logit rows, {} labels", fv.rows(), lv.len()),
                ));
            }
            let k = fv.cols();
            let mut s = 0.0;
            for r in 0..fv.rows() {
                let label = lv.as_slice()[r];
                let idx = label as usize;
                if label < 0.0 || label.fract() != 0.0 || idx >= k {
                    return Err(Error::LabelOutOfRange {
                        row: r,
                        label,
                        classes: k,
                    });
                }
                let row = fv.row(r);
                s += row[idx] - crate::linalg::log_sum_exp(row);
            }
            out.reset(1, 1);
            out.as_mut_slice()[0] = s;
        }
    }
    Ok(())
}

fn backprop_node(
    op: &Op,
    values: &[DMatrix],
    needs: &[bool],
    adj_out: &DMatrix,
    out: &DMatrix,
    adj: &mut [DMatrix],
) {
    let go = adj_out.as_slice();
    match *op {
        Op::Input | Op::Constant(_) => {}
        Op::View(b) => {
            if needs[b.src.0] {
                let dst = &mut adj[b.src.0].as_mut_slice()[b.offset..b.end()];
                dst.iter_mut().zip(go).for_each(|(d, g)| *d += g);
            }
        }
        Op::Affine { x, w, b } => {
            let xv = &values[x.0];
            let (n, fan_in, fan_out) = (xv.rows(), w.cols, w.rows);
            if needs[x.0] {
                let ws = &values[w.src.0].as_slice()[w.offset..w.end()];
                let ax = &mut adj[x.0];
                for (o, wo) in ws.chunks_exact(fan_in).enumerate() {
                    for r in 0..n {
                        let g = go[r * fan_out + o];
                        if g != 0.0 {
                            axpy(g, wo, ax.row_mut(r));
                        }
                    }
                }
            }
            if needs[w.src.0] {
                // Output-major so each weight row stays in cache across the batch;
                // every entry still accumulates over rows in increasing order.
                let aw = &mut adj[w.src.0].as_mut_slice()[w.offset..w.end()];
                for (o, awo) in aw.chunks_exact_mut(fan_in).enumerate() {
                    for r in 0..n {
                        let g = go[r * fan_out + o];
                        if g != 0.0 {
                            axpy(g, xv.row(r), awo);
                        }
                    }
                }
            }
            if let Some(b) = b {
                if needs[b.src.0] {
                    let ab = &mut adj[b.src.0].as_mut_slice()[b.offset..b.end()];
                    for r in 0..n {
                        let gr = &go[r * fan_out..(r + 1) * fan_out];
                        ab.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
        }
        Op::Unary(f, a) => {
            if !needs[a.0] {
                return;
            }
            let xs = values[a.0].as_slice();
            let ys = out.as_slice();
            let da = adj[a.0].as_mut_slice();
            for k in 0..da.len() {
                let (x, y, g) = (xs[k], ys[k], go[k]);
                da[k] += g * match f {
                    Unary::Relu => {
                        if x > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Unary::Softplus => sigmoid(x),
                    Unary::Sigmoid => y * (1.0 - y),
                    Unary::Exp => y,
                    Unary::Log => 1.0 / x,
                    Unary::Square => 2.0 * x,
                    Unary::Tanh => 1.0 - y * y,
                };
            }
        }
        Op::Gate { x, gate } => {
            if !needs[x.0] {
                return;
            }
            let gv = &values[gate.0];
            let ax = &mut adj[x.0];
            let cols = ax.cols();
            for r in 0..ax.rows() {
                let g = if gv.rows() == 1 { gv.row(0) } else { gv.row(r) };
                let gr = &go[r * cols..(r + 1) * cols];
                for ((d, &gi), &o) in ax.row_mut(r).iter_mut().zip(g).zip(gr) {
                    if gi > 0.0 {
                        *d += o;
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs[a.0] {
                adj[a.0].as_mut_slice().iter_mut().zip(go).for_each(|(d, g)| *d += g);
            }
            if needs[b.0] {
                adj[b.0]
                    .as_mut_slice()
                    .iter_mut()
                    .zip(go)
                    .for_each(|(d, g)| *d += sign * g);
            }
        }
        Op::Mul(a, b) => {
            if needs[a.0] {
                let bv = values[b.0].as_slice();
                adj[a.0]
                    .as_mut_slice()
                    .iter_mut()
                    .zip(go.iter().zip(bv))
                    .for_each(|(d, (g, bb))| *d += g * bb);
            }
            if needs[b.0] {
                let av = values[a.0].as_slice();
                adj[b.0]
                    .as_mut_slice()
                    .iter_mut()
                    .zip(go.iter().zip(av))
                    .for_each(|(d, (g, aa))| *d += g * aa);
            }
        }
        Op::Scale(a, c) => {
            if needs[a.0] {
                adj[a.0].as_mut_slice().iter_mut().zip(go).for_each(|(d, g)| *d += c * g);
            }
        }
        Op::Offset(a, _) => {
            if needs[a.0] {
                adj[a.0].as_mut_slice().iter_mut().zip(go).for_each(|(d, g)| *d += g);
            }
        }
        Op::Sum(a) => {
            if needs[a.0] {
                let g = go[0];
                adj[a.0].as_mut_slice().iter_mut().for_each(|d| *d += g);
            }
        }
        Op::SumSquares(a) => {
            if needs[a.0] {
                let g = go[0];
                let xs = values[a.0].as_slice();
                adj[a.0]
                    .as_mut_slice()
                    .iter_mut()
                    .zip(xs)
                    .for_each(|(d, x)| *d += 2.0 * g * x);
            }
        }
        Op::LogSoftmax(a) => {
            if !needs[a.0] {
                return;
            }
            let cols = out.cols();
            let da = &mut adj[a.0];
            for r in 0..out.rows() {
                let gr = &go[r * cols..(r + 1) * cols];
                let total: f64 = gr.iter().sum();
                for ((d, &g), &y) in da.row_mut(r).iter_mut().zip(gr).zip(out.row(r)) {
                    *d += g - y.exp() * total;
                }
            }
        }
        Op::GaussianLogLik {
            mean,
            target,
            noise,
        } => {
            let g = go[0];
            let (mv, tv) = (values[mean.0].as_slice(), values[target.0].as_slice());
            let log_sigma = match noise {
                Noise::Fixed(s) => s.ln(),
                Noise::LogSigma(v) => values[v.0].as_slice()[0],
            };
            let inv_var = (-2.0 * log_sigma).exp();
            if needs[mean.0] {
                adj[mean.0]
                    .as_mut_slice()
                    .iter_mut()
                    .zip(mv.iter().zip(tv))
                    .for_each(|(d, (m, t))| *d += g * (t - m) * inv_var);
            }
            if needs[target.0] {
                adj[target.0]
                    .as_mut_slice()
                    .iter_mut()
                    .zip(mv.iter().zip(tv))
                    .for_each(|(d, (m, t))| *d -= g * (t - m) * inv_var);
            }
            if let Noise::LogSigma(v) = noise {
                if needs[v.0] {
                    let sse: f64 = mv.iter().zip(tv).map(|(m, t)| (t - m) * (t - m)).sum();
                    adj[v.0].as_mut_slice()[0] += g * (-(mv.len() as f64) + inv_var * sse);
                }
            }
        }
        Op::BernoulliLogLik { logits, target } => {
            if needs[logits.0] {
                let g = go[0];
                let (fv, tv) = (values[logits.0].as_slice(), values[target.0].as_slice());
                adj[logits.0]
                    .as_mut_slice()
                    .iter_mut()
                    .zip(fv.iter().zip(tv))
                    .for_each(|(d, (&f, &y))| *d += g * (y - sigmoid(f)));
            }
        }
        Op::CategoricalLogLik { logits, labels } => {
            if needs[logits.0] {
                let g = go[0];
                let fv = &values[logits.0];
                let lv = values[labels.0].as_slice();
                let da = &mut adj[logits.0];
                for r in 0..fv.rows() {
                    let row = fv.row(r);
                    let lse = crate::linalg::log_sum_exp(row);
                    let label = lv[r] as usize;
                    for (c, (d, &f)) in da.row_mut(r).iter_mut().zip(row).enumerate() {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        *d += g * (onehot - (f - lse).exp());
                    }
                }
            }
        }
    }
}
