//! The training objective: exponential fit loss, ADMM proximity, L1 and the
//! activation mask penalty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{forward, AutodiffError, Forward, GradientSet, Var};
use crate::net::{Activation, ActivationConfig, LiesNet};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction and target lengths differ ({pred} vs {target})")]
    LengthMismatch { pred: usize, target: usize },
    #[error("tensor shapes do not match")]
    ShapeMismatch,
    #[error("training diverged: exponential loss {0:e} exceeds the limit")]
    Divergence(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub exp_loss: f64,
    pub admm_loss: f64,
    pub l1_loss: f64,
    pub mask_loss: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(exp_loss: f64, admm_loss: f64, l1_loss: f64, mask_loss: f64) -> Self {
        LossBreakdown { exp_loss, admm_loss, l1_loss, mask_loss, total: exp_loss + admm_loss + l1_loss + mask_loss }
    }

    /// Weighted accumulation, used to average over mini-batches.
    pub fn accumulate(&mut self, other: &LossBreakdown, weight: f64) {
        self.exp_loss += weight * other.exp_loss;
        self.admm_loss += weight * other.admm_loss;
        self.l1_loss += weight * other.l1_loss;
        self.mask_loss += weight * other.mask_loss;
        self.total += weight * other.total;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// L1 coefficient over all weights and gates.
    pub alpha: f64,
    /// Divide the mask penalty by the batch size.
    pub normalize_mask: bool,
    /// An exponential loss above `exp(divergence_exponent)` is a divergence.
    pub divergence_exponent: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { alpha: 1e-4, normalize_mask: false, divergence_exponent: 50.0 }
    }
}

/// `mean(exp(|ŷ − y|))`.
pub fn exp_loss(pred: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(LossError::LengthMismatch { pred: pred.len(), target: target.len() });
    }
    let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs().exp()).sum();
    let v = s / pred.len() as f64;
    if !v.is_finite() {
        return Err(LossError::Divergence(v));
    }
    Ok(v)
}

/// `(ρ/2)·‖W − Z + U‖²` over all tensors.
pub fn admm_penalty(w: &[Tensor], z: &[Tensor], u: &[Tensor], rho: f64) -> Result<f64, LossError> {
    if w.len() != z.len() || w.len() != u.len() {
        return Err(LossError::ShapeMismatch);
    }
    let mut s = 0.0;
    for ((a, b), c) in w.iter().zip(z).zip(u) {
        if !a.same_shape(b) || !a.same_shape(c) {
            return Err(LossError::ShapeMismatch);
        }
        s += a.data.iter().zip(&b.data).zip(&c.data).map(|((x, y), v)| (x - y + v).powi(2)).sum::<f64>();
    }
    Ok(0.5 * rho * s)
}

/// `α·Σ|w|` over all tensors.
pub fn l1_penalty(w: &[Tensor], alpha: f64) -> f64 {
    alpha * w.iter().flat_map(|t| t.data.iter()).map(|v| v.abs()).sum::<f64>()
}

/// Sum of `x_l − x` over log inputs below `x_l` and of `x − x_e` over exp
/// inputs above `x_e`.
pub fn mask_loss(log_inputs: &[f64], exp_inputs: &[f64], cfg: &ActivationConfig) -> f64 {
    let below: f64 = log_inputs.iter().map(|x| (cfg.log_cutoff - x).max(0.0)).sum();
    let above: f64 = exp_inputs.iter().map(|x| (x - cfg.exp_cutoff).max(0.0)).sum();
    below + above
}

/// Current ADMM targets for the proximity term.
#[derive(Clone, Copy, Debug)]
pub struct Proximity<'a> {
    pub z: &'a [Tensor],
    pub u: &'a [Tensor],
    pub rho: f64,
}

/// The full objective for one mini-batch, recorded on a tape.
pub struct Objective {
    pub forward: Forward,
    pub total: Var,
    pub breakdown: LossBreakdown,
}

impl Objective {
    pub fn gradients(&self, net: &LiesNet) -> Result<GradientSet, LossError> {
        Ok(self.forward.backward(net, &[(self.total, 1.0)])?)
    }
}

/// Records `exp + admm + l1 + mask` for a batch of transformed inputs `u`
/// and log targets `v`.
pub fn objective<R: AsRef<[f64]>>(
    net: &LiesNet,
    u: &[R],
    v: &[f64],
    prox: Option<Proximity<'_>>,
    cfg: &LossConfig,
) -> Result<Objective, LossError> {
    if u.len() != v.len() {
        return Err(LossError::LengthMismatch { pred: u.len(), target: v.len() });
    }
    let mut f = forward(net, u)?;
    let n = v.len() as f64;
    let tape = &mut f.tape;

    let mut fit = Vec::with_capacity(v.len());
    for (o, y) in f.outputs.iter().zip(v) {
        let t = tape.leaf(*y);
        let d = tape.sub(*o, t);
        let a = tape.abs(d);
        fit.push(tape.exp(a));
    }
    let s = tape.sum(fit);
    let exp_term = tape.scale(s, 1.0 / n);
    let exp_value = tape.value(exp_term);
    if !exp_value.is_finite() || exp_value > cfg.divergence_exponent.exp() {
        return Err(LossError::Divergence(exp_value));
    }

    let mut terms = vec![exp_term];
    let mut admm_value = 0.0;
    if let Some(p) = prox {
        if p.z.len() != net.params.len() || p.u.len() != net.params.len() {
            return Err(LossError::ShapeMismatch);
        }
        let mut sq = Vec::with_capacity(net.param_count());
        for (t, vars) in f.params.tensors.iter().enumerate() {
            if !p.z[t].same_shape(&net.params[t]) || !p.u[t].same_shape(&net.params[t]) {
                return Err(LossError::ShapeMismatch);
            }
            for (k, w) in vars.iter().enumerate() {
                let target = tape.leaf(p.z[t].data[k] - p.u[t].data[k]);
                let d = tape.sub(*w, target);
                sq.push(tape.square(d));
            }
        }
        let s = tape.sum(sq);
        let a = tape.scale(s, 0.5 * p.rho);
        admm_value = tape.value(a);
        terms.push(a);
    }

    let mut l1_value = 0.0;
    if cfg.alpha != 0.0 {
        let abs: Vec<Var> = f.params.all().map(|w| tape.abs(w)).collect();
        let s = tape.sum(abs);
        let l = tape.scale(s, cfg.alpha);
        l1_value = tape.value(l);
        terms.push(l);
    }

    let act = net.activation;
    let hinges: Vec<Var> = f
        .records
        .iter()
        .map(|r| match r.kind {
            Activation::Log => tape.hinge_below(r.input, act.log_cutoff),
            _ => tape.hinge_above(r.input, act.exp_cutoff),
        })
        .collect();
    let s = tape.sum(hinges);
    let m = tape.scale(s, if cfg.normalize_mask { 1.0 / n } else { 1.0 });
    let mask_value = tape.value(m);
    terms.push(m);

    let total = tape.sum(terms);
    let breakdown = LossBreakdown::new(exp_value, admm_value, l1_value, mask_value);
    Ok(Objective { forward: f, total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_loss_examples() {
        assert_eq!(exp_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert!((exp_loss(&[1.0], &[0.0]).unwrap() - std::f64::consts::E).abs() < 1e-15);
        assert!((exp_loss(&[0.0, 2f64.ln()], &[0.0, 0.0]).unwrap() - 1.5).abs() < 1e-15);
        assert!(matches!(exp_loss(&[1e6], &[0.0]), Err(LossError::Divergence(_))));
    }

    #[test]
    fn admm_penalty_examples() {
        let t = |v: f64| vec![Tensor::from_vec(1, 1, vec![v])];
        assert_eq!(admm_penalty(&t(1.0), &t(1.0), &t(0.0), 0.5).unwrap(), 0.0);
        assert_eq!(admm_penalty(&t(1.0), &t(0.0), &t(0.0), 0.5).unwrap(), 0.25);
        assert_eq!(admm_penalty(&t(1.0), &t(0.0), &t(0.0), 1.0).unwrap(), 0.5);
        let bad = vec![Tensor::zeros(1, 2)];
        assert_eq!(admm_penalty(&t(1.0), &bad, &t(0.0), 1.0), Err(LossError::ShapeMismatch));
    }

    #[test]
    fn l1_examples() {
        let w = vec![Tensor::from_vec(1, 2, vec![1.0, -2.0])];
        assert!((l1_penalty(&w, 0.1) - 0.3).abs() < 1e-15);
        assert_eq!(l1_penalty(&w, 0.0), 0.0);
        assert_eq!(l1_penalty(&[Tensor::zeros(2, 2)], 0.1), 0.0);
    }

    #[test]
    fn mask_examples() {
        let cfg = ActivationConfig::default();
        assert_eq!(mask_loss(&[0.5, 1.0], &[0.0, 3.9], &cfg), 0.0);
        assert_eq!(mask_loss(&[0.0], &[], &cfg), 0.005);
        assert_eq!(mask_loss(&[], &[5.0], &cfg), 1.0);
    }

    #[test]
    fn objective_breakdown_matches_plain_functions() {
        let net = LiesNet::init(2, 3).unwrap();
        let u = vec![vec![0.1, 0.4], vec![0.8, 0.3], vec![0.5, 0.9]];
        let v = vec![0.2, 0.5, 0.1];
        let z: Vec<Tensor> = net.params.iter().map(|p| Tensor::filled(p.rows, p.cols, 0.1)).collect();
        let uu: Vec<Tensor> = net.params.iter().map(|p| Tensor::filled(p.rows, p.cols, -0.05)).collect();
        let cfg = LossConfig::default();
        let obj = objective(&net, &u, &v, Some(Proximity { z: &z, u: &uu, rho: 0.5 }), &cfg).unwrap();
        let pred: Vec<f64> = u.iter().map(|r| net.predict(r).unwrap()).collect();
        let b = obj.breakdown;
        assert!((b.exp_loss - exp_loss(&pred, &v).unwrap()).abs() < 1e-12);
        assert!((b.admm_loss - admm_penalty(&net.params, &z, &uu, 0.5).unwrap()).abs() < 1e-12);
        assert!((b.l1_loss - l1_penalty(&net.params, 1e-4)).abs() < 1e-15);
        let (mut logs, mut exps) = (vec![], vec![]);
        for r in &obj.forward.records {
            let x = obj.forward.tape.value(r.input);
            match r.kind {
                Activation::Log => logs.push(x),
                _ => exps.push(x),
            }
        }
        assert!((b.mask_loss - mask_loss(&logs, &exps, &net.activation)).abs() < 1e-12);
        assert!((b.total - obj.forward.tape.value(obj.total)).abs() < 1e-12);
        assert!(b.exp_loss >= 1.0);
    }
}
