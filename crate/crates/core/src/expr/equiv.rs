//! Equivalence of two expressions up to an affine map `cand ≈ a·truth + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{simplify, Expr};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquivalenceConfig {
    pub fit_samples: usize,
    pub probe_samples: usize,
    /// Standard deviation of `(cand - b)/a - truth` must stay below
    /// `rel_tol * (1 + |mean truth|)`.
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            fit_samples: 256,
            probe_samples: 256,
            rel_tol: 1e-6,
            seed: 0x5eed_e0e0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Equivalent,
    NotEquivalent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceResult {
    pub verdict: Verdict,
    /// Multiplicative witness `a`.
    pub scale: f64,
    /// Additive witness `b`.
    pub offset: f64,
    /// True when the symbolic fast path decided the verdict.
    pub symbolic: bool,
    pub residual_std: f64,
    pub diagnostic: Option<String>,
}

impl EquivalenceResult {
    pub fn is_equivalent(&self) -> bool {
        self.verdict == Verdict::Equivalent
    }

    fn negative(diagnostic: String) -> Self {
        EquivalenceResult {
            verdict: Verdict::NotEquivalent,
            scale: f64::NAN,
            offset: f64::NAN,
            symbolic: false,
            residual_std: f64::NAN,
            diagnostic: Some(diagnostic),
        }
    }
}

fn sample_points(domain: &[(f64, f64)], count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            domain
                .iter()
                .map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..hi) } else { lo })
                .collect()
        })
        .collect()
}

fn eval_all(e: &Expr, pts: &[Vec<f64>]) -> Result<Vec<f64>, String> {
    pts.iter()
        .map(|p| match e.eval(p) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(v) => Err(format!("non-finite value {v} at {p:?}")),
            Err(err) => Err(format!("{err} at {p:?}")),
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Rounds to 10 significant digits so that exactly-related coefficients
/// cancel symbolically.
fn snap(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    let mag = v.abs().log10().floor() as i32;
    let scale = 10f64.powi(9 - mag);
    (v * scale).round() / scale
}

/// Decides whether `cand ≈ a·truth + b` over the box `domain` for some reals
/// `a ≠ 0` and `b`.
pub fn equivalent_up_to_affine(
    cand: &Expr,
    truth: &Expr,
    domain: &[(f64, f64)],
    cfg: &EquivalenceConfig,
) -> EquivalenceResult {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let fit_pts = sample_points(domain, cfg.fit_samples.max(2), &mut rng);
    let (c, t) = match (eval_all(cand, &fit_pts), eval_all(truth, &fit_pts)) {
        (Ok(c), Ok(t)) => (c, t),
        (Err(e), _) => return EquivalenceResult::negative(format!("candidate: {e}")),
        (_, Err(e)) => return EquivalenceResult::negative(format!("truth: {e}")),
    };

    // least squares c ≈ a t + b
    let (mt, mc) = (mean(&t), mean(&c));
    let stt: f64 = t.iter().map(|v| (v - mt).powi(2)).sum();
    let stc: f64 = t.iter().zip(&c).map(|(a, b)| (a - mt) * (b - mc)).sum();
    let scale_t = t.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let (a, b) = if stt <= 1e-24 * scale_t * scale_t * t.len() as f64 {
        (1.0, mc - mt)
    } else {
        let a = stc / stt;
        (a, mc - a * mt)
    };
    let scale_c = c.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if a.abs() <= 1e-12 * (scale_c / scale_t).max(1e-300) || !a.is_finite() {
        return EquivalenceResult {
            verdict: Verdict::NotEquivalent,
            scale: a,
            offset: b,
            symbolic: false,
            residual_std: f64::NAN,
            diagnostic: Some("candidate does not vary with the truth".into()),
        };
    }

    let (sa, sb) = (snap(a), snap(b));
    let diff = simplify(&Expr::Sum(vec![
        cand.freeze(),
        Expr::Product(vec![Expr::lit(-sa), truth.freeze()]),
        Expr::lit(-sb),
    ]));
    if diff.is_literal_value(0.0) {
        return EquivalenceResult {
            verdict: Verdict::Equivalent,
            scale: sa,
            offset: sb,
            symbolic: true,
            residual_std: 0.0,
            diagnostic: None,
        };
    }

    let probe = sample_points(domain, cfg.probe_samples.max(2), &mut rng);
    let (c, t) = match (eval_all(cand, &probe), eval_all(truth, &probe)) {
        (Ok(c), Ok(t)) => (c, t),
        (Err(e), _) => return EquivalenceResult::negative(format!("candidate: {e}")),
        (_, Err(e)) => return EquivalenceResult::negative(format!("truth: {e}")),
    };
    // residual measured in truth units
    let resid: Vec<f64> = c.iter().zip(&t).map(|(cv, tv)| (cv - b) / a - tv).collect();
    let mr = mean(&resid);
    let std = (resid.iter().map(|r| (r - mr).powi(2)).sum::<f64>() / resid.len() as f64).sqrt();
    let tol = cfg.rel_tol * (1.0 + mean(&t).abs());
    let verdict = if std < tol { Verdict::Equivalent } else { Verdict::NotEquivalent };
    EquivalenceResult {
        verdict,
        scale: a,
        offset: b,
        symbolic: false,
        residual_std: std,
        diagnostic: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn check(c: &str, t: &str, dom: &[(f64, f64)]) -> EquivalenceResult {
        equivalent_up_to_affine(&parse(c).unwrap(), &parse(t).unwrap(), dom, &Default::default())
    }

    #[test]
    fn affine_pair_with_witness() {
        let r = check("2*x1*x2 + 3", "x1*x2", &[(1.0, 5.0), (1.0, 5.0)]);
        assert!(r.is_equivalent());
        assert!((r.scale - 2.0).abs() < 1e-9 && (r.offset - 3.0).abs() < 1e-9);
    }

    #[test]
    fn identity_pair() {
        let r = check("x1/x2", "x1/x2", &[(1.0, 5.0), (1.0, 5.0)]);
        assert!(r.is_equivalent());
        assert_eq!((r.scale, r.offset), (1.0, 0.0));
    }

    #[test]
    fn square_is_not_affine() {
        let r = check("(x1*x2)^2", "x1*x2", &[(1.0, 5.0), (1.0, 5.0)]);
        assert_eq!(r.verdict, Verdict::NotEquivalent);
    }

    #[test]
    fn evaluation_failure_is_negative() {
        let r = check("ln(x1 - 3)", "x1", &[(1.0, 5.0)]);
        assert_eq!(r.verdict, Verdict::NotEquivalent);
        assert!(r.diagnostic.is_some());
    }
}
