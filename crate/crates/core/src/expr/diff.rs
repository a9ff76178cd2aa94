use std::f64::consts::FRAC_PI_2;

use super::{simplify, ConstId, Expr, ExprError, UnaryOp};

/// Symbolic partial derivative with respect to the constant handle `h`.
///
/// The result keeps every handle (including `h`) symbolic, so it can be
/// evaluated at any substituted value of the constants.
pub fn differentiate(e: &Expr, h: ConstId) -> Result<Expr, ExprError> {
    if !e.contains_handle(h) {
        return Err(ExprError::UnknownHandle(h));
    }
    Ok(simplify(&d(e, h)))
}

fn zero() -> Expr {
    Expr::lit(0.0)
}

fn is_zero(e: &Expr) -> bool {
    e.is_literal_value(0.0)
}

fn d(e: &Expr, h: ConstId) -> Expr {
    match e {
        Expr::Var(_) => zero(),
        Expr::Const(c) => Expr::lit(if c.id == Some(h) { 1.0 } else { 0.0 }),
        Expr::Sum(xs) => {
            let terms: Vec<Expr> = xs.iter().map(|x| d(x, h)).filter(|t| !is_zero(t)).collect();
            if terms.is_empty() {
                zero()
            } else {
                Expr::Sum(terms)
            }
        }
        Expr::Product(xs) => {
            let mut terms = Vec::new();
            for (i, x) in xs.iter().enumerate() {
                let dx = d(x, h);
                if is_zero(&dx) {
                    continue;
                }
                let mut factors: Vec<Expr> = xs
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, f)| f.clone())
                    .collect();
                factors.push(dx);
                terms.push(Expr::Product(factors));
            }
            if terms.is_empty() {
                zero()
            } else {
                Expr::Sum(terms)
            }
        }
        Expr::Pow(b, c) => {
            if c.id == Some(h) {
                // d/dc b^c = b^c ln b
                return Expr::Product(vec![e.clone(), Expr::ln((**b).clone())]);
            }
            let db = d(b, h);
            if is_zero(&db) {
                return zero();
            }
            // c b^c b^-1 b'
            Expr::Product(vec![
                Expr::Const(*c),
                e.clone(),
                (**b).clone().powf(-1.0),
                db,
            ])
        }
        Expr::Unary(op, a) => {
            let da = d(a, h);
            if is_zero(&da) {
                return zero();
            }
            let a = (**a).clone();
            match op {
                UnaryOp::Ln => Expr::Product(vec![a.powf(-1.0), da]),
                UnaryOp::Exp => Expr::Product(vec![Expr::exp(a), da]),
                UnaryOp::Sin => Expr::Product(vec![Expr::sin(Expr::lit(FRAC_PI_2) - a), da]),
                UnaryOp::Neg => Expr::neg(da),
            }
        }
    }
}
