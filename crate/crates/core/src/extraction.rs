//! Reading a formula back from a pruned network, rounding its constants and
//! refitting them.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::deadline::Deadline;
use crate::expr::{differentiate, simplify, Expr};
use crate::net::LiesNet;
use crate::sampling::{Dataset, TransformRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Extract,
    RoundToZero,
    OptimizeCoefficients,
    RoundFinal,
}

/// A formula in the original variables whose constants are handles
/// `0..k` in pre-order.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateFormula {
    pub expr: Expr,
    pub provenance: Provenance,
}

impl CandidateFormula {
    /// Simplifies `e` and turns every constant into a handle.
    pub fn new(e: &Expr, provenance: Provenance) -> Self {
        CandidateFormula { expr: simplify(&e.freeze()).parameterize(), provenance }
    }

    pub fn values(&self) -> Vec<f64> {
        self.expr.handles().into_iter().map(|(_, v)| v).collect()
    }

    pub fn eval(&self, x: &[f64]) -> Option<f64> {
        self.expr.eval_finite(x)
    }

    /// Literal form for display and equivalence checks.
    pub fn frozen(&self) -> Expr {
        self.expr.freeze()
    }

    fn with_values(&self, values: &[f64], provenance: Provenance) -> Self {
        let pairs: Vec<(u32, f64)> = values.iter().enumerate().map(|(i, v)| (i as u32, *v)).collect();
        CandidateFormula { expr: self.expr.with_handle_values(&pairs), provenance }
    }
}

/// Composes the network over `u_j = ln(x_j)/m_j` and maps the output back
/// through `exp`.
pub fn extract(net: &LiesNet, rec: &TransformRecord) -> CandidateFormula {
    let v = net.forward_symbolic(&rec.input_exprs());
    CandidateFormula::new(&Expr::exp(v), Provenance::Extract)
}

/// `max over samples |c − r|·|∂f/∂c|` with the derivative evaluated at
/// `c = r`; `None` when the derivative cannot be evaluated.
fn rounding_score(f: &Expr, id: u32, c: f64, r: f64, ds: &Dataset) -> Option<f64> {
    let d = differentiate(f, id).ok()?;
    let d = d.with_constant(id, r);
    let mut worst: f64 = 0.0;
    for x in &ds.x {
        let g = d.eval_finite(x)?;
        worst = worst.max((c - r).abs() * g.abs());
    }
    Some(worst)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundingLog {
    /// `(old value, new value, score)` of each accepted replacement.
    pub accepted: Vec<(f64, f64, f64)>,
    pub rejected: usize,
    pub interrupted: bool,
}

/// Sets constants to zero, smallest magnitude first, whenever the first
/// order bound `|c|·|∂f/∂c(0)|` stays below `threshold` on every sample.
/// The formula is re-simplified after each accepted substitution.
pub fn round_to_zero(
    f: &CandidateFormula,
    ds: &Dataset,
    threshold: f64,
    deadline: &Deadline,
) -> (CandidateFormula, RoundingLog) {
    let mut cur = CandidateFormula { expr: f.expr.clone(), provenance: Provenance::RoundToZero };
    let mut log = RoundingLog::default();
    let mut rejected: Vec<u64> = Vec::new();
    'outer: loop {
        let mut consts = cur.expr.handles();
        consts.retain(|(_, v)| *v != 0.0 && !rejected.contains(&v.to_bits()));
        consts.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
        for (id, c) in consts {
            if deadline.expired() {
                log.interrupted = true;
                break 'outer;
            }
            match rounding_score(&cur.expr, id, c, 0.0, ds) {
                Some(s) if s < threshold => {
                    log.accepted.push((c, 0.0, s));
                    cur = CandidateFormula::new(&cur.expr.with_constant(id, 0.0), Provenance::RoundToZero);
                    continue 'outer;
                }
                Some(_) => {}
                None => log::warn!("derivative for constant {c} could not be evaluated; keeping it"),
            }
            rejected.push(c.to_bits());
            log.rejected += 1;
        }
        break;
    }
    (cur, log)
}

/// Rounds each constant to one decimal place when the bound
/// `|c − r|·|∂f/∂c(r)|` stays below `threshold` on every sample.
pub fn round_final(
    f: &CandidateFormula,
    ds: &Dataset,
    threshold: f64,
    deadline: &Deadline,
) -> (CandidateFormula, RoundingLog) {
    let mut cur = CandidateFormula { expr: f.expr.clone(), provenance: Provenance::RoundFinal };
    let mut log = RoundingLog::default();
    let mut consts = cur.expr.handles();
    consts.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
    for (id, c) in consts {
        if deadline.expired() {
            log.interrupted = true;
            break;
        }
        let r = (c * 10.0).round() / 10.0;
        if r == c {
            continue;
        }
        match rounding_score(&cur.expr, id, c, r, ds) {
            Some(s) if s < threshold => {
                log.accepted.push((c, r, s));
                cur.expr = cur.expr.with_constant(id, r);
            }
            Some(_) => log.rejected += 1,
            None => {
                log::warn!("derivative for constant {c} could not be evaluated; keeping it");
                log.rejected += 1;
            }
        }
    }
    (CandidateFormula::new(&cur.expr, Provenance::RoundFinal), log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { max_iters: 200, tol: 1e-10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub sse_before: f64,
    pub sse_after: f64,
    pub iterations: usize,
    /// The fit produced non-finite residuals and was undone.
    pub reverted: bool,
    pub interrupted: bool,
}

fn sse(f: &Expr, params: &[f64], ds: &Dataset) -> Option<f64> {
    let mut s = 0.0;
    for (x, y) in ds.x.iter().zip(&ds.y) {
        let r = f.eval_params(x, params).ok()? - y;
        s += r * r;
    }
    s.is_finite().then_some(s)
}

/// Levenberg-Marquardt on `Σ (f(x; c) − y)²` in the original space, with
/// the Jacobian taken from symbolic derivatives. Only improving steps are
/// accepted, so the returned SSE never exceeds the initial one.
pub fn optimize_coefficients(
    f: &CandidateFormula,
    ds: &Dataset,
    cfg: &FitConfig,
    deadline: &Deadline,
) -> (CandidateFormula, FitReport) {
    let start = f.values();
    let k = start.len();
    let mut report = FitReport::default();
    let Some(mut cur_sse) = sse(&f.expr, &start, ds) else {
        report.sse_before = f64::NAN;
        report.sse_after = f64::NAN;
        report.reverted = true;
        return (CandidateFormula { provenance: Provenance::OptimizeCoefficients, ..f.clone() }, report);
    };
    report.sse_before = cur_sse;
    if k == 0 {
        report.sse_after = cur_sse;
        return (CandidateFormula { provenance: Provenance::OptimizeCoefficients, ..f.clone() }, report);
    }
    let derivs: Vec<Option<Expr>> = (0..k as u32).map(|id| differentiate(&f.expr, id).ok()).collect();
    let mut c = start.clone();
    let mut mu = 1e-3;
    let n = ds.len();
    'iter: for it in 0..cfg.max_iters {
        if deadline.expired() {
            report.interrupted = true;
            break;
        }
        report.iterations = it + 1;
        let mut jac = DMatrix::<f64>::zeros(n, k);
        let mut res = DVector::<f64>::zeros(n);
        for (i, (x, y)) in ds.x.iter().zip(&ds.y).enumerate() {
            match f.expr.eval_params(x, &c) {
                Ok(v) if v.is_finite() => res[i] = v - y,
                _ => break 'iter,
            }
            for (j, d) in derivs.iter().enumerate() {
                let g = d.as_ref().map_or(Ok(0.0), |d| d.eval_params(x, &c));
                match g {
                    Ok(g) if g.is_finite() => jac[(i, j)] = g,
                    _ => break 'iter,
                }
            }
        }
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for d in 0..k {
                a[(d, d)] += mu * jtj[(d, d)].max(1e-12);
            }
            let Some(ch) = a.cholesky() else {
                mu *= 10.0;
                continue;
            };
            let step = ch.solve(&(-&jtr));
            let trial: Vec<f64> = c.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            match sse(&f.expr, &trial, ds) {
                Some(s) if s < cur_sse => {
                    let rel = (cur_sse - s) / cur_sse.max(1e-300);
                    c = trial;
                    cur_sse = s;
                    mu = (mu / 3.0).max(1e-12);
                    improved = true;
                    if rel < cfg.tol {
                        break 'iter;
                    }
                    break;
                }
                _ => mu *= 4.0,
            }
            if mu > 1e12 {
                break;
            }
        }
        if !improved || cur_sse == 0.0 {
            break;
        }
    }
    let out = if c.iter().all(|v| v.is_finite()) {
        f.with_values(&c, Provenance::OptimizeCoefficients)
    } else {
        report.reverted = true;
        cur_sse = report.sse_before;
        f.with_values(&start, Provenance::OptimizeCoefficients)
    };
    report.sse_after = cur_sse;
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn data(f: impl Fn(&[f64]) -> f64) -> Dataset {
        let mut x = Vec::new();
        for i in 0..9 {
            for j in 0..9 {
                x.push(vec![1.0 + 0.5 * i as f64, 1.0 + 0.5 * j as f64]);
            }
        }
        let y = x.iter().map(|r| f(r)).collect();
        Dataset { x, y }
    }

    fn cand(s: &str) -> CandidateFormula {
        CandidateFormula::new(&parse(s).unwrap(), Provenance::Extract)
    }

    #[test]
    fn tiny_sine_term_is_dropped() {
        let ds = data(|x| x[0] * x[1]);
        let (f, log) = round_to_zero(&cand("x1*x2 + 0.000001*sin(x1)"), &ds, 0.1, &Deadline::none());
        assert_eq!(f.frozen().to_string(), "x1*x2");
        assert_eq!(log.accepted.len(), 1);
    }

    #[test]
    fn large_coefficient_is_kept() {
        let ds = data(|x| 2.0 * x[0] * x[1]);
        let (f, log) = round_to_zero(&cand("2*x1*x2"), &ds, 0.1, &Deadline::none());
        assert_eq!(f.frozen().to_string(), "2*x1*x2");
        assert!(log.accepted.is_empty());
    }

    #[test]
    fn linear_fit_recovers_scale() {
        let ds = data(|x| 3.0 * x[0] * x[1]);
        let (f, r) = optimize_coefficients(&cand("1.7*x1*x2"), &ds, &FitConfig::default(), &Deadline::none());
        assert!((f.values()[0] - 3.0).abs() < 1e-6, "{:?}", f.values());
        assert!(r.sse_after <= r.sse_before);
    }

    #[test]
    fn final_rounding_examples() {
        let ds = data(|x| 3.1007 * x[0] * x[1]);
        let (f, _) = round_final(&cand("3.1007*x1*x2"), &ds, 0.1, &Deadline::none());
        assert_eq!(f.frozen().to_string(), "3.1*x1*x2");
        let (f, _) = round_final(&cand("2.5499*x1*x2^3"), &ds, 0.1, &Deadline::none());
        assert_eq!(f.values()[0], 2.5499);
        let (f, _) = round_final(&cand("1.0000001*x1*x2"), &ds, 0.1, &Deadline::none());
        assert_eq!(f.frozen().to_string(), "x1*x2");
    }
}
