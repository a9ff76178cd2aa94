//! Scalar reverse-mode differentiation for LIES networks and their losses.
//!
//! A [`Tape`] is an append-only list of scalar nodes; every node refers only
//! to earlier nodes, so the insertion order is a topological order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{activate, Activation, LiesNet, NetError, NEURONS_PER_LAYER};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("seed refers to node {node}, tape has {len} nodes")]
    SeedOutOfRange { node: usize, len: usize },
    #[error("expected {expected} seeds, got {got}")]
    SeedCount { expected: usize, got: usize },
    #[error("gradient tensor shapes do not match the parameters")]
    ShapeMismatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `Σ a_k·b_k` over `pairs[start..start+len]`.
    Dot { start: usize, len: usize },
    /// `Σ a_k` over `args[start..start+len]`.
    Sum { start: usize, len: usize },
    ClipLn(usize, f64),
    ClipExp(usize, f64),
    Sin(usize),
    Abs(usize),
    Exp(usize),
    Square(usize),
    /// `max(k − a, 0)`.
    HingeBelow(usize, f64),
    /// `max(a − k, 0)`.
    HingeAbove(usize, f64),
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    pairs: Vec<(usize, usize)>,
    args: Vec<usize>,
}

fn eval_op(op: &Op, v: &[f64], pairs: &[(usize, usize)], args: &[usize]) -> f64 {
    match *op {
        Op::Leaf => unreachable!("leaves are not recomputed"),
        Op::Add(a, b) => v[a] + v[b],
        Op::Sub(a, b) => v[a] - v[b],
        Op::Mul(a, b) => v[a] * v[b],
        Op::Scale(a, k) => k * v[a],
        Op::Dot { start, len } => pairs[start..start + len].iter().map(|&(a, b)| v[a] * v[b]).sum(),
        Op::Sum { start, len } => args[start..start + len].iter().map(|&a| v[a]).sum(),
        Op::ClipLn(a, c) => {
            if v[a] > c {
                v[a].ln()
            } else {
                c.ln()
            }
        }
        Op::ClipExp(a, c) => {
            if v[a] < c {
                v[a].exp()
            } else {
                c.exp()
            }
        }
        Op::Sin(a) => v[a].sin(),
        Op::Abs(a) => v[a].abs(),
        Op::Exp(a) => v[a].exp(),
        Op::Square(a) => v[a] * v[a],
        Op::HingeBelow(a, k) => (k - v[a]).max(0.0),
        Op::HingeAbove(a, k) => (v[a] - k).max(0.0),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, x: Var) -> f64 {
        self.values[x.0]
    }

    fn push(&mut self, op: Op) -> Var {
        let v = eval_op(&op, &self.values, &self.pairs, &self.args);
        self.ops.push(op);
        self.values.push(v);
        Var(self.ops.len() - 1)
    }

    pub fn leaf(&mut self, value: f64) -> Var {
        self.ops.push(Op::Leaf);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::Scale(a.0, k))
    }

    /// Affine combination `Σ a_k·b_k`; an empty list gives 0.
    pub fn dot(&mut self, terms: impl IntoIterator<Item = (Var, Var)>) -> Var {
        let start = self.pairs.len();
        self.pairs.extend(terms.into_iter().map(|(a, b)| (a.0, b.0)));
        let len = self.pairs.len() - start;
        self.push(Op::Dot { start, len })
    }

    pub fn sum(&mut self, terms: impl IntoIterator<Item = Var>) -> Var {
        let start = self.args.len();
        self.args.extend(terms.into_iter().map(|a| a.0));
        let len = self.args.len() - start;
        self.push(Op::Sum { start, len })
    }

    pub fn clip_ln(&mut self, a: Var, cutoff: f64) -> Var {
        self.push(Op::ClipLn(a.0, cutoff))
    }

    pub fn clip_exp(&mut self, a: Var, cutoff: f64) -> Var {
        self.push(Op::ClipExp(a.0, cutoff))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.push(Op::Sin(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.push(Op::Abs(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.push(Op::Exp(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a.0))
    }

    pub fn hinge_below(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::HingeBelow(a.0, k))
    }

    pub fn hinge_above(&mut self, a: Var, k: f64) -> Var {
        self.push(Op::HingeAbove(a.0, k))
    }

    /// Recomputes every non-leaf value from the recorded leaves.
    pub fn replay(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.values.len());
        for (i, op) in self.ops.iter().enumerate() {
            let x = match op {
                Op::Leaf => self.values[i],
                _ => eval_op(op, &v, &self.pairs, &self.args),
            };
            v.push(x);
        }
        v
    }

    /// Adjoints of `Σ seed_k · node_k` with respect to every node.
    ///
    /// Clipped branches of the log and exp nodes propagate zero; at the
    /// cutoff itself the derivative of the unclipped branch is used. `abs`
    /// has derivative 0 at 0.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Result<Vec<f64>, AutodiffError> {
        let n = self.ops.len();
        let mut adj = vec![0.0; n];
        let mut top = 0;
        for &(x, s) in seeds {
            if x.0 >= n {
                return Err(AutodiffError::SeedOutOfRange { node: x.0, len: n });
            }
            adj[x.0] += s;
            top = top.max(x.0 + 1);
        }
        let v = &self.values;
        for i in (0..top).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            match self.ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    adj[a] += g;
                    adj[b] += g;
                }
                Op::Sub(a, b) => {
                    adj[a] += g;
                    adj[b] -= g;
                }
                Op::Mul(a, b) => {
                    adj[a] += g * v[b];
                    adj[b] += g * v[a];
                }
                Op::Scale(a, k) => adj[a] += g * k,
                Op::Dot { start, len } => {
                    for &(a, b) in &self.pairs[start..start + len] {
                        adj[a] += g * v[b];
                        adj[b] += g * v[a];
                    }
                }
                Op::Sum { start, len } => {
                    for &a in &self.args[start..start + len] {
                        adj[a] += g;
                    }
                }
                Op::ClipLn(a, c) => {
                    if v[a] >= c {
                        adj[a] += g / v[a];
                    }
                }
                Op::ClipExp(a, c) => {
                    if v[a] <= c {
                        adj[a] += g * v[a].exp();
                    }
                }
                Op::Sin(a) => adj[a] += g * v[a].cos(),
                Op::Abs(a) => {
                    if v[a] != 0.0 {
                        adj[a] += g * v[a].signum();
                    }
                }
                Op::Exp(a) => adj[a] += g * v[i],
                Op::Square(a) => adj[a] += 2.0 * g * v[a],
                Op::HingeBelow(a, k) => {
                    if v[a] < k {
                        adj[a] -= g;
                    }
                }
                Op::HingeAbove(a, k) => {
                    if v[a] > k {
                        adj[a] += g;
                    }
                }
            }
        }
        Ok(adj)
    }
}

/// Partial derivatives shaped like a network's parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn zeros_like(net: &LiesNet) -> Self {
        GradientSet { tensors: net.params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect() }
    }

    pub fn matches(&self, net: &LiesNet) -> bool {
        self.tensors.len() == net.params.len()
            && self.tensors.iter().zip(&net.params).all(|(g, p)| g.same_shape(p))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<(), AutodiffError> {
        if self.tensors.len() != other.tensors.len()
            || self.tensors.iter().zip(&other.tensors).any(|(a, b)| !a.same_shape(b))
        {
            return Err(AutodiffError::ShapeMismatch);
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }
}

/// Tape nodes of the parameters, laid out like `net.params`.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub tensors: Vec<Vec<Var>>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, net: &LiesNet) -> Self {
        ParamVars {
            tensors: net.params.iter().map(|p| p.data.iter().map(|v| tape.leaf(*v)).collect()).collect(),
        }
    }

    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.tensors.iter().flatten().copied()
    }

    pub fn gradients(&self, adjoints: &[f64], net: &LiesNet) -> GradientSet {
        let mut g = GradientSet::zeros_like(net);
        for (t, vars) in self.tensors.iter().enumerate() {
            for (k, v) in vars.iter().enumerate() {
                g.tensors[t].data[k] = adjoints[v.0];
            }
        }
        g
    }
}

/// Pre-activation input of one log or exp neuron for one sample.
#[derive(Clone, Copy, Debug)]
pub struct ActivationRecord {
    pub sample: usize,
    pub layer: usize,
    pub neuron: usize,
    pub kind: Activation,
    pub input: Var,
}

/// Result of [`forward`].
#[derive(Clone, Debug)]
pub struct Forward {
    pub tape: Tape,
    pub params: ParamVars,
    pub outputs: Vec<Var>,
    pub records: Vec<ActivationRecord>,
}

impl Forward {
    pub fn output_values(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| self.tape.value(*o)).collect()
    }

    /// Gradient of `Σ seed_k · node_k` with respect to the parameters.
    pub fn backward(&self, net: &LiesNet, seeds: &[(Var, f64)]) -> Result<GradientSet, AutodiffError> {
        let adj = self.tape.backward(seeds)?;
        Ok(self.params.gradients(&adj, net))
    }

    /// Gradient of `Σ seed_k · output_k`; one seed per sample.
    pub fn backward_outputs(&self, net: &LiesNet, seeds: &[f64]) -> Result<GradientSet, AutodiffError> {
        if seeds.len() != self.outputs.len() {
            return Err(AutodiffError::SeedCount { expected: self.outputs.len(), got: seeds.len() });
        }
        let s: Vec<(Var, f64)> = self.outputs.iter().copied().zip(seeds.iter().copied()).collect();
        self.backward(net, &s)
    }
}

/// Records the network applied to every row of `batch` on a fresh tape.
pub fn forward<R: AsRef<[f64]>>(net: &LiesNet, batch: &[R]) -> Result<Forward, AutodiffError> {
    if batch.is_empty() {
        return Err(AutodiffError::EmptyBatch);
    }
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, net);
    let (outputs, records) = record_samples(&mut tape, &params, net, batch)?;
    Ok(Forward { tape, params, outputs, records })
}

/// Appends the network applied to every row of `batch` to an existing tape
/// whose parameter leaves are `params`.
pub fn record_samples<R: AsRef<[f64]>>(
    tape: &mut Tape,
    params: &ParamVars,
    net: &LiesNet,
    batch: &[R],
) -> Result<(Vec<Var>, Vec<ActivationRecord>), AutodiffError> {
    let cfg = net.activation;
    let one = tape.leaf(1.0);
    let mut outputs = Vec::with_capacity(batch.len());
    let mut records = Vec::new();
    let mut z: Vec<Option<Var>> = Vec::with_capacity(net.total_width());
    for (s, row) in batch.iter().enumerate() {
        let u = row.as_ref();
        if u.len() != net.num_vars {
            return Err(NetError::InputWidth { expected: net.num_vars, got: u.len() }.into());
        }
        z.clear();
        z.extend(u.iter().map(|x| Some(tape.leaf(*x))));
        z.push(Some(one));
        for i in 0..net.num_layers() {
            let w = &params.tensors[LiesNet::weight_tensor(i)];
            let gates = &params.tensors[LiesNet::gate_tensor(i)];
            let width = net.input_width(i);
            let mut out = [None; NEURONS_PER_LAYER];
            for (j, kind) in Activation::ORDER.iter().enumerate() {
                if net.dead[i][j] {
                    continue;
                }
                let row = &w[j * width..(j + 1) * width];
                let h = tape.dot(row.iter().zip(&z).filter_map(|(wv, src)| src.map(|x| (*wv, x))));
                let hv = tape.value(h);
                if !hv.is_finite() {
                    return Err(NetError::NonFinite { layer: i, neuron: j, value: hv }.into());
                }
                let a = match kind {
                    Activation::Log => tape.clip_ln(h, cfg.log_cutoff),
                    Activation::Identity => h,
                    Activation::Exp => tape.clip_exp(h, cfg.exp_cutoff),
                    Activation::Sine => tape.sin(h),
                };
                if matches!(kind, Activation::Log | Activation::Exp) {
                    records.push(ActivationRecord { sample: s, layer: i, neuron: j, kind: *kind, input: h });
                }
                let o = tape.mul(gates[j], a);
                let ov = tape.value(o);
                if !ov.is_finite() {
                    return Err(NetError::NonFinite { layer: i, neuron: j, value: ov }.into());
                }
                debug_assert_eq!(tape.value(a), activate(*kind, hv, &cfg));
                out[j] = Some(o);
            }
            z.extend(out);
        }
        let wo = &params.tensors[net.output_tensor()];
        let y = tape.dot(wo.iter().zip(&z).filter_map(|(wv, src)| src.map(|x| (*wv, x))));
        let yv = tape.value(y);
        if !yv.is_finite() {
            return Err(NetError::NonFinite { layer: net.num_layers(), neuron: 0, value: yv }.into());
        }
        outputs.push(y);
    }
    Ok((outputs, records))
}

/// `∂O/∂w` for each sample, one backward pass per sample.
pub fn per_sample_output_grads<'a, R: AsRef<[f64]>>(
    net: &'a LiesNet,
    dataset: &'a [R],
) -> impl Iterator<Item = Result<GradientSet, AutodiffError>> + 'a {
    dataset.iter().map(move |row| {
        let f = forward(net, std::slice::from_ref(row))?;
        f.backward_outputs(net, &[1.0])
    })
}
