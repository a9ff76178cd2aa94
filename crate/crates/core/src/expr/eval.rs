use thiserror::Error;

use super::{Expr, UnaryOp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("expression uses variable x{needed} but the assignment has {got} values")]
    Arity { needed: usize, got: usize },
    #[error("ln received non-positive argument {0}")]
    Domain(f64),
}

impl Expr {
    /// Evaluates the expression at an assignment of the variables.
    ///
    /// Non-finite intermediate values propagate into the result; `ln` of a
    /// non-positive number is reported as a domain error.
    pub fn eval(&self, assignment: &[f64]) -> Result<f64, EvalError> {
        self.eval_inner(assignment, &[])
    }

    /// Evaluates with handle `id` taking the value `params[id]`; handles
    /// with ids beyond `params` keep their stored value.
    pub fn eval_params(&self, assignment: &[f64], params: &[f64]) -> Result<f64, EvalError> {
        self.eval_inner(assignment, params)
    }

    fn eval_inner(&self, assignment: &[f64], params: &[f64]) -> Result<f64, EvalError> {
        let value = |c: &super::Constant| match c.id {
            Some(id) => params.get(id as usize).copied().unwrap_or(c.value),
            None => c.value,
        };
        Ok(match self {
            Expr::Var(i) => *assignment.get(*i).ok_or(EvalError::Arity {
                needed: i + 1,
                got: assignment.len(),
            })?,
            Expr::Const(c) => value(c),
            Expr::Sum(xs) => {
                let mut acc = 0.0;
                for x in xs {
                    acc += x.eval_inner(assignment, params)?;
                }
                acc
            }
            Expr::Product(xs) => {
                let mut acc = 1.0;
                for x in xs {
                    acc *= x.eval_inner(assignment, params)?;
                }
                acc
            }
            Expr::Pow(b, c) => pow(b.eval_inner(assignment, params)?, value(c)),
            Expr::Unary(op, a) => {
                let v = a.eval_inner(assignment, params)?;
                match op {
                    UnaryOp::Ln => {
                        if v <= 0.0 {
                            return Err(EvalError::Domain(v));
                        }
                        v.ln()
                    }
                    UnaryOp::Exp => v.exp(),
                    UnaryOp::Sin => v.sin(),
                    UnaryOp::Neg => -v,
                }
            }
        })
    }

    /// Evaluates and additionally rejects non-finite results.
    pub fn eval_finite(&self, assignment: &[f64]) -> Option<f64> {
        self.eval(assignment).ok().filter(|v| v.is_finite())
    }
}

pub(crate) fn pow(base: f64, exponent: f64) -> f64 {
    if exponent == exponent.trunc() && exponent.abs() <= i32::MAX as f64 {
        base.powi(exponent as i32)
    } else {
        base.powf(exponent)
    }
}
