//! The LIES network.
//!
//! Every hidden layer has exactly four neurons, one per activation, in the
//! fixed order log, identity, exp, sine. Layer `i` reads the concatenation of
//! the input vector (variables plus a constant-1 channel) and the outputs of
//! all earlier layers; the linear output row reads the concatenation of
//! everything. Each neuron's activation is multiplied by a scalar gate before
//! fan-out, so zeroing a gate removes the neuron. There are no biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{simplify, Expr};
use crate::tensor::Tensor;

pub const NEURONS_PER_LAYER: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("a LIES network needs at least one input variable")]
    NoInputs,
    #[error("input has width {got}, expected {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("non-finite value {value} in layer {layer}, neuron {neuron}")]
    NonFinite { layer: usize, neuron: usize, value: f64 },
    #[error("malformed network snapshot: {0}")]
    Snapshot(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Log,
    Identity,
    Exp,
    Sine,
}

impl Activation {
    pub const ORDER: [Activation; NEURONS_PER_LAYER] =
        [Activation::Log, Activation::Identity, Activation::Exp, Activation::Sine];

    pub fn letter(self) -> char {
        match self {
            Activation::Log => 'L',
            Activation::Identity => 'I',
            Activation::Exp => 'E',
            Activation::Sine => 'S',
        }
    }
}

/// Cutoffs of the clipped log and exp activations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActivationConfig {
    /// Below this input the log activation is constant `ln(log_cutoff)`.
    pub log_cutoff: f64,
    /// Above this input the exp activation is constant `exp(exp_cutoff)`.
    pub exp_cutoff: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        ActivationConfig { log_cutoff: 5e-3, exp_cutoff: 4.0 }
    }
}

impl ActivationConfig {
    pub fn is_valid(&self) -> bool {
        self.log_cutoff > 0.0 && self.exp_cutoff.is_finite()
    }
}

/// Clipped activation value.
pub fn activate(kind: Activation, x: f64, cfg: &ActivationConfig) -> f64 {
    match kind {
        Activation::Log => {
            if x > cfg.log_cutoff {
                x.ln()
            } else {
                cfg.log_cutoff.ln()
            }
        }
        Activation::Identity => x,
        Activation::Exp => {
            if x < cfg.exp_cutoff {
                x.exp()
            } else {
                cfg.exp_cutoff.exp()
            }
        }
        Activation::Sine => x.sin(),
    }
}

/// Derivative of [`activate`]. At the cutoffs the derivative of the active
/// (unclipped) branch is used.
pub fn activate_grad(kind: Activation, x: f64, cfg: &ActivationConfig) -> f64 {
    match kind {
        Activation::Log => {
            if x >= cfg.log_cutoff {
                1.0 / x
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
        Activation::Exp => {
            if x <= cfg.exp_cutoff {
                x.exp()
            } else {
                0.0
            }
        }
        Activation::Sine => x.cos(),
    }
}

/// True when `x` lies where the activation is clipped.
pub fn is_clipped(kind: Activation, x: f64, cfg: &ActivationConfig) -> bool {
    match kind {
        Activation::Log => x <= cfg.log_cutoff,
        Activation::Exp => x >= cfg.exp_cutoff,
        _ => false,
    }
}

/// Address of one scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId {
    pub tensor: usize,
    pub index: usize,
}

/// A LIES network. Parameters are stored as
/// `[W1, g1, W2, g2, ..., Wk, gk, w_out]`: each `W` is `4 × width`, each
/// gate vector `g` is `1 × 4`, and the output row is `1 × total_width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiesNet {
    pub num_vars: usize,
    pub seed: u64,
    pub activation: ActivationConfig,
    pub params: Vec<Tensor>,
    /// Neurons removed by structural cleanup.
    pub dead: Vec<[bool; NEURONS_PER_LAYER]>,
    /// Live log/exp neurons whose incoming weights are all zero.
    pub constant_valued: Vec<[bool; NEURONS_PER_LAYER]>,
}

impl LiesNet {
    /// Network with the default depth of `num_vars + 1` LIES layers.
    pub fn init(num_vars: usize, seed: u64) -> Result<Self, NetError> {
        Self::with_layers(num_vars, num_vars + 1, seed)
    }

    pub fn with_layers(num_vars: usize, layers: usize, seed: u64) -> Result<Self, NetError> {
        Self::with_config(num_vars, layers, seed, ActivationConfig::default(), 1.0)
    }

    /// Weights are drawn uniformly from `±init_scale·sqrt(6/fan_in)`.
    pub fn with_config(
        num_vars: usize,
        layers: usize,
        seed: u64,
        activation: ActivationConfig,
        init_scale: f64,
    ) -> Result<Self, NetError> {
        if num_vars < 1 {
            return Err(NetError::NoInputs);
        }
        if num_vars > 4 {
            log::warn!("{num_vars} input variables is beyond the evaluated regime of 1..=4");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(2 * layers + 1);
        for i in 0..layers {
            let width = num_vars + 1 + NEURONS_PER_LAYER * i;
            params.push(uniform(NEURONS_PER_LAYER, width, init_scale, &mut rng));
            params.push(Tensor::filled(1, NEURONS_PER_LAYER, 1.0));
        }
        let total = num_vars + 1 + NEURONS_PER_LAYER * layers;
        params.push(uniform(1, total, init_scale, &mut rng));
        Ok(LiesNet {
            num_vars,
            seed,
            activation,
            params,
            dead: vec![[false; NEURONS_PER_LAYER]; layers],
            constant_valued: vec![[false; NEURONS_PER_LAYER]; layers],
        })
    }

    pub fn num_layers(&self) -> usize {
        (self.params.len() - 1) / 2
    }

    /// Width of the vector read by layer `i` (0-based).
    pub fn input_width(&self, layer: usize) -> usize {
        self.num_vars + 1 + NEURONS_PER_LAYER * layer
    }

    pub fn total_width(&self) -> usize {
        self.input_width(self.num_layers())
    }

    /// Column of neuron `j` of layer `i` in the concatenated vector.
    pub fn column(&self, layer: usize, neuron: usize) -> usize {
        self.num_vars + 1 + NEURONS_PER_LAYER * layer + neuron
    }

    /// Inverse of [`Self::column`]; `None` for input channels.
    pub fn neuron_of_column(&self, col: usize) -> Option<(usize, usize)> {
        let base = self.num_vars + 1;
        (col >= base).then(|| ((col - base) / NEURONS_PER_LAYER, (col - base) % NEURONS_PER_LAYER))
    }

    pub fn weight_tensor(layer: usize) -> usize {
        2 * layer
    }

    pub fn gate_tensor(layer: usize) -> usize {
        2 * layer + 1
    }

    pub fn output_tensor(&self) -> usize {
        self.params.len() - 1
    }

    pub fn weights(&self, layer: usize) -> &Tensor {
        &self.params[Self::weight_tensor(layer)]
    }

    pub fn gates(&self, layer: usize) -> &Tensor {
        &self.params[Self::gate_tensor(layer)]
    }

    pub fn output(&self) -> &Tensor {
        &self.params[self.output_tensor()]
    }

    pub fn nnz(&self) -> usize {
        self.params.iter().map(Tensor::nnz).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> f64 {
        self.params[id.tensor].data[id.index]
    }

    pub fn set(&mut self, id: ParamId, v: f64) {
        self.params[id.tensor].data[id.index] = v;
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .flat_map(|(t, p)| (0..p.len()).map(move |index| ParamId { tensor: t, index }))
    }

    fn check_input(&self, u: &[f64]) -> Result<(), NetError> {
        if u.len() != self.num_vars {
            return Err(NetError::InputWidth { expected: self.num_vars, got: u.len() });
        }
        Ok(())
    }

    /// Full forward pass for one sample, returning the concatenated vector
    /// (inputs, bias, all neuron outputs), the pre-activations per layer, and
    /// the output.
    pub fn trace(&self, u: &[f64]) -> Result<Trace, NetError> {
        self.check_input(u)?;
        let mut z = Vec::with_capacity(self.total_width());
        z.extend_from_slice(u);
        z.push(1.0);
        let mut pre = Vec::with_capacity(self.num_layers());
        for i in 0..self.num_layers() {
            let w = self.weights(i);
            let g = self.gates(i);
            let mut h_layer = [0.0; NEURONS_PER_LAYER];
            let mut out = [0.0; NEURONS_PER_LAYER];
            for (j, kind) in Activation::ORDER.iter().enumerate() {
                let h: f64 = w.row(j).iter().zip(&z).map(|(a, b)| a * b).sum();
                if !h.is_finite() {
                    return Err(NetError::NonFinite { layer: i, neuron: j, value: h });
                }
                h_layer[j] = h;
                out[j] = if self.dead[i][j] { 0.0 } else { g.data[j] * activate(*kind, h, &self.activation) };
                if !out[j].is_finite() {
                    return Err(NetError::NonFinite { layer: i, neuron: j, value: out[j] });
                }
            }
            z.extend_from_slice(&out);
            pre.push(h_layer);
        }
        let y: f64 = self.output().data.iter().zip(&z).map(|(a, b)| a * b).sum();
        if !y.is_finite() {
            return Err(NetError::NonFinite { layer: self.num_layers(), neuron: 0, value: y });
        }
        Ok(Trace { z, pre, output: y })
    }

    pub fn predict(&self, u: &[f64]) -> Result<f64, NetError> {
        Ok(self.trace(u)?.output)
    }

    /// True when some live log/exp neuron that matters for the output is in
    /// its clipped region for this input.
    pub fn clipping_active(&self, u: &[f64]) -> Result<bool, NetError> {
        let t = self.trace(u)?;
        let live = self.reachable();
        for (i, h) in t.pre.iter().enumerate() {
            for (j, kind) in Activation::ORDER.iter().enumerate() {
                if live[i][j] && self.has_incoming(i, j) && is_clipped(*kind, h[j], &self.activation) {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// Zeroes the incoming row, gate and every outgoing weight of each dead
    /// neuron.
    pub fn enforce_dead(&mut self) {
        for i in 0..self.num_layers() {
            for j in 0..NEURONS_PER_LAYER {
                if self.dead[i][j] {
                    self.zero_neuron(i, j);
                }
            }
        }
    }

    pub(crate) fn zero_neuron(&mut self, layer: usize, neuron: usize) {
        let width = self.input_width(layer);
        let w = Self::weight_tensor(layer);
        self.params[w].data[neuron * width..(neuron + 1) * width].iter_mut().for_each(|v| *v = 0.0);
        self.params[Self::gate_tensor(layer)].data[neuron] = 0.0;
        let col = self.column(layer, neuron);
        for k in layer + 1..self.num_layers() {
            let t = Self::weight_tensor(k);
            for r in 0..NEURONS_PER_LAYER {
                self.params[t].set(r, col, 0.0);
            }
        }
        let o = self.output_tensor();
        self.params[o].data[col] = 0.0;
    }

    pub fn has_incoming(&self, layer: usize, neuron: usize) -> bool {
        self.weights(layer).row(neuron).iter().any(|w| *w != 0.0)
    }

    /// Neurons with a nonzero gate and a path of nonzero weights to the
    /// output.
    pub fn reachable(&self) -> Vec<[bool; NEURONS_PER_LAYER]> {
        let layers = self.num_layers();
        let mut live = vec![[false; NEURONS_PER_LAYER]; layers];
        let out = self.output();
        for i in (0..layers).rev() {
            for j in 0..NEURONS_PER_LAYER {
                if self.dead[i][j] || self.gates(i).data[j] == 0.0 {
                    continue;
                }
                let col = self.column(i, j);
                let feeds_output = out.data[col] != 0.0;
                let feeds_later = (i + 1..layers).any(|k| {
                    (0..NEURONS_PER_LAYER).any(|r| live[k][r] && self.weights(k).get(r, col) != 0.0)
                });
                live[i][j] = feeds_output || feeds_later;
            }
        }
        live
    }

    /// Composes the network symbolically over the given input expressions.
    ///
    /// Zero-weight edges are omitted, unreachable or gated-off neurons are
    /// dropped, and a neuron with no incoming terms is folded to its
    /// zero-input value (`1` for exp, `ln(log_cutoff)` for log, `0` for
    /// identity and sine). The activations are taken unclipped.
    pub fn forward_symbolic(&self, inputs: &[Expr]) -> Expr {
        assert_eq!(inputs.len(), self.num_vars, "one input expression per variable");
        let live = self.reachable();
        let mut z: Vec<Option<Expr>> = inputs.iter().cloned().map(Some).collect();
        z.push(Some(Expr::lit(1.0)));
        for i in 0..self.num_layers() {
            let w = self.weights(i);
            let g = self.gates(i);
            let mut out = Vec::with_capacity(NEURONS_PER_LAYER);
            for (j, kind) in Activation::ORDER.iter().enumerate() {
                if !live[i][j] {
                    out.push(None);
                    continue;
                }
                let terms: Vec<Expr> = w
                    .row(j)
                    .iter()
                    .zip(&z)
                    .filter(|(wv, src)| **wv != 0.0 && src.is_some())
                    .map(|(wv, src)| Expr::lit(*wv) * src.clone().unwrap())
                    .collect();
                let act = if terms.is_empty() {
                    Expr::lit(activate(*kind, 0.0, &self.activation))
                } else {
                    let h = Expr::Sum(terms);
                    match kind {
                        Activation::Log => Expr::ln(h),
                        Activation::Identity => h,
                        Activation::Exp => Expr::exp(h),
                        Activation::Sine => Expr::sin(h),
                    }
                };
                out.push(Some(Expr::lit(g.data[j]) * act));
            }
            z.extend(out);
        }
        let terms: Vec<Expr> = self
            .output()
            .data
            .iter()
            .zip(&z)
            .filter(|(wv, src)| **wv != 0.0 && src.is_some())
            .map(|(wv, src)| Expr::lit(*wv) * src.clone().unwrap())
            .collect();
        simplify(&Expr::Sum(terms))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, NetError> {
        let net: LiesNet = serde_json::from_str(s).map_err(|e| NetError::Snapshot(e.to_string()))?;
        net.validate()?;
        Ok(net)
    }

    /// Checks the shape invariants of a (possibly deserialized) network.
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Snapshot(m));
        if self.num_vars < 1 {
            return Err(NetError::NoInputs);
        }
        if self.params.len() % 2 != 1 {
            return bad(format!("expected an odd number of tensors, got {}", self.params.len()));
        }
        let layers = self.num_layers();
        for i in 0..layers {
            if self.weights(i).shape() != (NEURONS_PER_LAYER, self.input_width(i)) {
                return bad(format!("layer {i} weights have shape {:?}", self.weights(i).shape()));
            }
            if self.gates(i).shape() != (1, NEURONS_PER_LAYER) {
                return bad(format!("layer {i} gates have shape {:?}", self.gates(i).shape()));
            }
        }
        if self.output().shape() != (1, self.total_width()) {
            return bad(format!("output row has shape {:?}", self.output().shape()));
        }
        if self.dead.len() != layers || self.constant_valued.len() != layers {
            return bad("neuron flags do not match the layer count".into());
        }
        if !self.activation.is_valid() {
            return bad("invalid activation cutoffs".into());
        }
        Ok(())
    }
}

/// Values recorded by [`LiesNet::trace`].
#[derive(Clone, Debug)]
pub struct Trace {
    pub z: Vec<f64>,
    pub pre: Vec<[f64; NEURONS_PER_LAYER]>,
    pub output: f64,
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let s = scale * (6.0 / cols as f64).sqrt();
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-s..=s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zeroed(n: usize, layers: usize) -> LiesNet {
        let mut net = LiesNet::with_layers(n, layers, 0).unwrap();
        for p in &mut net.params {
            p.data.iter_mut().for_each(|v| *v = 0.0);
        }
        for i in 0..layers {
            net.params[LiesNet::gate_tensor(i)].data.iter_mut().for_each(|v| *v = 1.0);
        }
        net
    }

    #[test]
    fn layer_count_and_widths() {
        let net = LiesNet::init(2, 7).unwrap();
        assert_eq!(net.num_layers(), 3);
        assert_eq!(net.input_width(0), 3);
        for i in 0..3 {
            assert_eq!(net.weights(i).cols, 3 + 4 * i);
            assert_eq!(net.gates(i).data, vec![1.0; 4]);
        }
        assert_eq!(net.output().cols, 3 + 12);
        assert_eq!(LiesNet::init(0, 1), Err(NetError::NoInputs));
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = LiesNet::init(3, 11).unwrap();
        assert_eq!(a, LiesNet::init(3, 11).unwrap());
        assert_ne!(a, LiesNet::init(3, 12).unwrap());
        for i in 0..a.num_layers() {
            let s = (6.0 / a.input_width(i) as f64).sqrt();
            assert!(a.weights(i).data.iter().all(|w| w.abs() <= s));
        }
    }

    #[test]
    fn activations_clip() {
        let cfg = ActivationConfig::default();
        assert_eq!(activate(Activation::Exp, 0.0, &cfg), 1.0);
        assert!((activate(Activation::Exp, 5.0, &cfg) - 54.598150033144236).abs() < 1e-12);
        assert_eq!(activate(Activation::Log, 1.0, &cfg), 0.0);
        assert!((activate(Activation::Log, 0.001, &cfg) - (-5.298317366548036)).abs() < 1e-12);
        assert_eq!(activate(Activation::Identity, -3.5, &cfg), -3.5);
        assert_eq!(activate(Activation::Sine, 0.0, &cfg), 0.0);
        assert_eq!(activate_grad(Activation::Log, 1e-3, &cfg), 0.0);
        assert_eq!(activate_grad(Activation::Log, cfg.log_cutoff, &cfg), 1.0 / cfg.log_cutoff);
        assert_eq!(activate_grad(Activation::Exp, cfg.exp_cutoff, &cfg), cfg.exp_cutoff.exp());
    }

    #[test]
    fn symbolic_product_via_log_and_exp() {
        // layer 0 L <- x1, layer 1 L <- x2, layer 2 E <- both logs
        let mut net = zeroed(2, 3);
        net.params[0].set(0, 0, 1.0);
        net.params[2].set(0, 1, 1.0);
        let (l0, l1, e2) = (net.column(0, 0), net.column(1, 0), net.column(2, 2));
        let w2 = LiesNet::weight_tensor(2);
        net.params[w2].set(2, l0, 1.0);
        net.params[w2].set(2, l1, 1.0);
        let o = net.output_tensor();
        net.params[o].data[e2] = 1.0;
        let f = net.forward_symbolic(&[Expr::var(0), Expr::var(1)]);
        assert_eq!(f.to_string(), "x1*x2");
        assert!((net.predict(&[2.0, 3.0]).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn pruned_exp_neuron_is_a_constant() {
        let mut net = zeroed(1, 2);
        let o = net.output_tensor();
        let col = net.column(0, 2);
        net.params[o].data[col] = 2.5;
        let f = net.forward_symbolic(&[Expr::var(0)]);
        assert_eq!(f, Expr::lit(2.5));
        assert_eq!(net.predict(&[0.3]).unwrap(), 2.5);
    }

    #[test]
    fn zero_gate_equals_deletion() {
        let net = LiesNet::init(2, 3).unwrap();
        let mut gated = net.clone();
        gated.params[LiesNet::gate_tensor(1)].data[2] = 0.0;
        let mut deleted = net.clone();
        deleted.dead[1][2] = true;
        for u in [[0.1, 0.9], [0.5, 0.5], [1.0, 0.0]] {
            assert_eq!(gated.predict(&u).unwrap(), deleted.predict(&u).unwrap());
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let net = LiesNet::init(3, 5).unwrap();
        let back = LiesNet::from_json(&net.to_json()).unwrap();
        assert_eq!(net, back);
        let mut broken = net.clone();
        broken.params[0] = Tensor::zeros(4, 2);
        assert!(LiesNet::from_json(&broken.to_json()).is_err());
    }
}
