//! Output-sensitivity weight pruning and removal of dead neurons.

use serde::{Deserialize, Serialize};

use crate::autodiff::{per_sample_output_grads, AutodiffError};
use crate::deadline::Deadline;
use crate::net::{Activation, LiesNet, ParamId, NEURONS_PER_LAYER};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub threshold: f64,
    /// `max over samples |w·∂O/∂w|`, shaped like the parameters.
    pub scores: Vec<Tensor>,
    pub pruned: Vec<ParamId>,
    pub removed_neurons: Vec<(usize, usize)>,
    pub constant_neurons: Vec<(usize, usize)>,
    pub nnz_before: usize,
    pub nnz_after: usize,
}

/// Per-parameter sensitivity `max_x |w·∂O/∂w(x)|` over the rows of `u`.
pub fn sensitivity_scores<R: AsRef<[f64]>>(
    net: &LiesNet,
    u: &[R],
    deadline: &Deadline,
) -> Result<Option<Vec<Tensor>>, AutodiffError> {
    let mut scores: Vec<Tensor> = net.params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
    for (k, g) in per_sample_output_grads(net, u).enumerate() {
        if k % 64 == 0 && deadline.expired() {
            return Ok(None);
        }
        let g = g?;
        for ((s, p), gt) in scores.iter_mut().zip(&net.params).zip(&g.tensors) {
            for ((sv, w), gv) in s.data.iter_mut().zip(&p.data).zip(&gt.data) {
                *sv = sv.max((w * gv).abs());
            }
        }
    }
    Ok(Some(scores))
}

/// Zeroes every weight (gates included) whose sensitivity stays below
/// `threshold` on every sample. `None` when the deadline expired.
pub fn gradient_prune<R: AsRef<[f64]>>(
    net: &LiesNet,
    u: &[R],
    threshold: f64,
    deadline: &Deadline,
) -> Result<Option<(LiesNet, PruneReport)>, AutodiffError> {
    let Some(scores) = sensitivity_scores(net, u, deadline)? else { return Ok(None) };
    let mut out = net.clone();
    let mut pruned = Vec::new();
    for (t, s) in scores.iter().enumerate() {
        for (index, sv) in s.data.iter().enumerate() {
            if *sv < threshold {
                let id = ParamId { tensor: t, index };
                if out.get(id) != 0.0 {
                    pruned.push(id);
                }
                out.set(id, 0.0);
            }
        }
    }
    let report = PruneReport {
        threshold,
        scores,
        pruned,
        removed_neurons: Vec::new(),
        constant_neurons: Vec::new(),
        nnz_before: net.nnz(),
        nnz_after: out.nnz(),
    };
    Ok(Some((out, report)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleanupReport {
    pub removed: Vec<(usize, usize)>,
    pub constant: Vec<(usize, usize)>,
}

/// Removes, until nothing changes, neurons with a zero gate, neurons with
/// no nonzero outgoing edge, and sine/identity neurons without input.
/// Log/exp neurons without input are kept and flagged constant-valued.
pub fn structural_cleanup(net: &LiesNet) -> (LiesNet, CleanupReport) {
    let mut out = net.clone();
    let mut report = CleanupReport::default();
    let layers = out.num_layers();
    loop {
        let mut changed = false;
        for i in 0..layers {
            for (j, kind) in Activation::ORDER.iter().enumerate() {
                if out.dead[i][j] {
                    continue;
                }
                let col = out.column(i, j);
                let gate_zero = out.gates(i).data[j] == 0.0;
                let outgoing = out.output().data[col] != 0.0
                    || (i + 1..layers).any(|k| (0..NEURONS_PER_LAYER).any(|r| out.weights(k).get(r, col) != 0.0));
                let incoming = out.has_incoming(i, j);
                let silent = !incoming && matches!(kind, Activation::Identity | Activation::Sine);
                if gate_zero || !outgoing || silent {
                    out.dead[i][j] = true;
                    out.constant_valued[i][j] = false;
                    out.zero_neuron(i, j);
                    report.removed.push((i, j));
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    for i in 0..layers {
        for (j, kind) in Activation::ORDER.iter().enumerate() {
            let flag = !out.dead[i][j] && !out.has_incoming(i, j) && matches!(kind, Activation::Log | Activation::Exp);
            if flag && !out.constant_valued[i][j] {
                report.constant.push((i, j));
            }
            out.constant_valued[i][j] = flag;
        }
    }
    (out, report)
}

/// [`gradient_prune`] followed by [`structural_cleanup`].
pub fn prune_and_clean<R: AsRef<[f64]>>(
    net: &LiesNet,
    u: &[R],
    threshold: f64,
    deadline: &Deadline,
) -> Result<Option<(LiesNet, PruneReport)>, AutodiffError> {
    let Some((pruned, mut report)) = gradient_prune(net, u, threshold, deadline)? else { return Ok(None) };
    let (clean, c) = structural_cleanup(&pruned);
    report.removed_neurons = c.removed;
    report.constant_neurons = c.constant;
    report.nnz_after = clean.nnz();
    Ok(Some((clean, report)))
}
