//! Canonical infix rendering. The output is accepted by [`super::parse`].

use std::f64::consts::PI;

use super::{Constant, Expr, UnaryOp};

const P_SUM: u8 = 1;
const P_PRODUCT: u8 = 2;
const P_NEG: u8 = 3;
const P_POW: u8 = 4;
const P_ATOM: u8 = 5;

pub fn render(e: &Expr) -> String {
    render_prec(e, 0)
}

pub(crate) fn fmt_number(v: f64) -> String {
    if v == PI {
        "pi".to_string()
    } else if v == -PI {
        "-pi".to_string()
    } else {
        format!("{v}")
    }
}

fn wrap(s: String, own: u8, parent: u8) -> String {
    if own < parent {
        format!("({s})")
    } else {
        s
    }
}

fn render_const(c: &Constant, parent: u8) -> String {
    let s = fmt_number(c.value);
    if c.value < 0.0 || (c.value == 0.0 && c.value.is_sign_negative()) {
        wrap(s, P_NEG, parent)
    } else {
        s
    }
}

fn render_prec(e: &Expr, parent: u8) -> String {
    match e {
        Expr::Var(i) => format!("x{}", i + 1),
        Expr::Const(c) => render_const(c, parent),
        Expr::Sum(terms) => {
            if terms.is_empty() {
                return "0".to_string();
            }
            let mut s = render_prec(&terms[0], P_SUM);
            for t in &terms[1..] {
                match negated(t) {
                    Some(pos) => {
                        s.push_str(" - ");
                        s.push_str(&render_prec(&pos, P_PRODUCT));
                    }
                    None => {
                        s.push_str(" + ");
                        s.push_str(&render_prec(t, P_SUM + 1));
                    }
                }
            }
            wrap(s, P_SUM, parent)
        }
        Expr::Product(factors) => render_product(factors, parent),
        Expr::Pow(b, c) => {
            let s = format!("{}^{}", render_prec(b, P_ATOM), fmt_number(c.value));
            wrap(s, P_POW, parent)
        }
        Expr::Unary(UnaryOp::Neg, a) => wrap(format!("-{}", render_prec(a, P_POW)), P_NEG, parent),
        Expr::Unary(op, a) => format!("{}({})", op.name(), render_prec(a, 0)),
    }
}

/// If `t` reads naturally as `-(something)`, returns that something.
fn negated(t: &Expr) -> Option<Expr> {
    match t {
        Expr::Const(c) if c.value < 0.0 => Some(Expr::Const(Constant { id: c.id, value: -c.value })),
        Expr::Unary(UnaryOp::Neg, a) => Some((**a).clone()),
        Expr::Product(fs) => match fs.first() {
            Some(Expr::Const(c)) if c.value < 0.0 => {
                let mut rest: Vec<Expr> = fs[1..].to_vec();
                if c.value != -1.0 {
                    rest.insert(0, Expr::Const(Constant { id: c.id, value: -c.value }));
                }
                Some(if rest.len() == 1 { rest.pop().unwrap() } else { Expr::Product(rest) })
            }
            _ => None,
        },
        _ => None,
    }
}

fn render_product(factors: &[Expr], parent: u8) -> String {
    if factors.is_empty() {
        return "1".to_string();
    }
    let mut num: Vec<&Expr> = Vec::new();
    let mut den: Vec<Expr> = Vec::new();
    for f in factors {
        match f {
            Expr::Pow(b, c) if c.value < 0.0 => {
                if c.value == -1.0 {
                    den.push((**b).clone());
                } else {
                    den.push(Expr::Pow(b.clone(), Constant { id: c.id, value: -c.value }));
                }
            }
            _ => num.push(f),
        }
    }
    let mut lead = String::new();
    if let Some(Expr::Const(c)) = num.first() {
        if c.value == -1.0 && (num.len() > 1 || !den.is_empty()) {
            lead.push('-');
            num.remove(0);
        }
    }
    let num_s = if num.is_empty() {
        "1".to_string()
    } else {
        num.iter()
            .map(|f| render_prec(f, P_PRODUCT))
            .collect::<Vec<_>>()
            .join("*")
    };
    let s = if den.is_empty() {
        format!("{lead}{num_s}")
    } else {
        let den_s = if den.len() == 1 {
            render_prec(&den[0], P_POW)
        } else {
            let inner = den
                .iter()
                .map(|f| render_prec(f, P_PRODUCT))
                .collect::<Vec<_>>()
                .join("*");
            format!("({inner})")
        };
        format!("{lead}{num_s}/{den_s}")
    };
    wrap(s, P_PRODUCT, parent)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_readable_forms() {
        let x = || Expr::var(0);
        let y = || Expr::var(1);
        assert_eq!(render(&(x() * y())), "x1*x2");
        assert_eq!(render(&(x() / y())), "x1/x2");
        assert_eq!(render(&(x() + Expr::lit(-2.0) * y())), "x1 - 2*x2");
        assert_eq!(render(&Expr::exp(Expr::lit(-1.0) * x())), "exp(-x1)");
        assert_eq!(render(&x().powf(0.5)), "x1^0.5");
        assert_eq!(render(&(Expr::lit(PI) * x())), "pi*x1");
        assert_eq!(render(&(x() + y()).powf(2.0)), "(x1 + x2)^2");
        assert_eq!(
            render(&Expr::product(vec![x(), y().powf(-1.0), Expr::var(2).powf(-1.0)])),
            "x1/(x2*x3)"
        );
    }
}
