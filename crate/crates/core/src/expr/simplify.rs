//! Rewriting to a canonical normal form.
//!
//! The rules fold literal constants, drop identities and annihilators,
//! flatten and sort sums and products, merge like terms and like bases, and
//! cancel `exp`/`ln` pairs where the argument is known to be positive.
//! Handle constants are treated as opaque symbols. Passes repeat until a
//! fixpoint so that the result is idempotent.

use std::collections::BTreeMap;

use super::eval::pow;
use super::{Constant, Expr, UnaryOp};

const MAX_PASSES: usize = 64;

/// Which variables may be assumed strictly positive.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum Positivity {
    /// Every variable is positive (the positive orthant).
    #[default]
    All,
    /// `tags[i]` tells whether variable `i` is positive; unlisted variables
    /// are not.
    Tagged(Vec<bool>),
}

impl Positivity {
    fn var(&self, i: usize) -> bool {
        match self {
            Positivity::All => true,
            Positivity::Tagged(t) => t.get(i).copied().unwrap_or(false),
        }
    }
}

/// Simplifies assuming the positive orthant.
pub fn simplify(e: &Expr) -> Expr {
    simplify_with(e, &Positivity::All)
}

pub fn simplify_with(e: &Expr, pos: &Positivity) -> Expr {
    let mut cur = e.clone();
    for _ in 0..MAX_PASSES {
        let next = pass(&cur, pos);
        if next.identical(&cur) {
            return next;
        }
        cur = next;
    }
    cur
}

/// Sound (but incomplete) test for strict positivity of an expression.
pub fn is_positive(e: &Expr, pos: &Positivity) -> bool {
    match e {
        Expr::Var(i) => pos.var(*i),
        Expr::Const(c) => c.is_literal() && c.value > 0.0,
        Expr::Sum(xs) | Expr::Product(xs) => !xs.is_empty() && xs.iter().all(|x| is_positive(x, pos)),
        Expr::Pow(b, _) => is_positive(b, pos),
        Expr::Unary(UnaryOp::Exp, _) => true,
        Expr::Unary(..) => false,
    }
}

/// Canonical ordering/grouping key. Unlike the rendered text it tells
/// handles apart by id.
fn key(e: &Expr) -> String {
    fn ckey(c: &Constant) -> String {
        match c.id {
            Some(id) => format!("#{id}"),
            None => format!("{:e}", c.value),
        }
    }
    fn join(xs: &[Expr]) -> String {
        xs.iter().map(key).collect::<Vec<_>>().join(",")
    }
    match e {
        Expr::Var(i) => format!("x{i:04}"),
        Expr::Const(c) => format!("k{}", ckey(c)),
        Expr::Pow(b, c) => format!("{}^{}", key(b), ckey(c)),
        Expr::Unary(op, a) => format!("{}({})", op.name(), key(a)),
        Expr::Sum(xs) => format!("s({})", join(xs)),
        Expr::Product(xs) => format!("p({})", join(xs)),
    }
}

fn pass(e: &Expr, pos: &Positivity) -> Expr {
    match e {
        Expr::Var(_) | Expr::Const(_) => e.clone(),
        Expr::Sum(xs) => simplify_sum(xs.iter().map(|x| pass(x, pos)).collect()),
        Expr::Product(xs) => simplify_product(xs.iter().map(|x| pass(x, pos)).collect(), pos),
        Expr::Pow(b, c) => simplify_pow(pass(b, pos), *c, pos),
        Expr::Unary(op, a) => {
            let a = pass(a, pos);
            match op {
                UnaryOp::Neg => match a.as_literal() {
                    Some(v) => Expr::lit(-v),
                    None => simplify_product(vec![Expr::lit(-1.0), a], pos),
                },
                UnaryOp::Sin => match a.as_literal() {
                    Some(v) => Expr::lit(v.sin()),
                    None => Expr::sin(a),
                },
                UnaryOp::Ln => simplify_ln(a, pos),
                UnaryOp::Exp => simplify_exp(a, pos),
            }
        }
    }
}

/// Splits a term into (literal coefficient, remaining factors).
fn split_coefficient(t: Expr) -> (f64, Vec<Expr>) {
    match t {
        Expr::Const(c) if c.is_literal() => (c.value, Vec::new()),
        Expr::Product(fs) => {
            let mut coef = 1.0;
            let mut rest = Vec::new();
            for f in fs {
                match f.as_literal() {
                    Some(v) => coef *= v,
                    None => rest.push(f),
                }
            }
            (coef, rest)
        }
        other => (1.0, vec![other]),
    }
}

fn rebuild_product(coef: f64, mut rest: Vec<Expr>) -> Expr {
    if coef == 0.0 {
        return Expr::lit(0.0);
    }
    if coef != 1.0 {
        rest.insert(0, Expr::lit(coef));
    }
    match rest.len() {
        0 => Expr::lit(1.0),
        1 => rest.pop().unwrap(),
        _ => Expr::Product(rest),
    }
}

fn simplify_sum(terms: Vec<Expr>) -> Expr {
    let mut flat = Vec::with_capacity(terms.len());
    for t in terms {
        match t {
            Expr::Sum(inner) => flat.extend(inner),
            other => flat.push(other),
        }
    }
    let mut literal = 0.0;
    // key -> (coefficient, factors); BTreeMap keeps the order canonical
    let mut groups: BTreeMap<String, (f64, Vec<Expr>)> = BTreeMap::new();
    for t in flat {
        let (coef, rest) = split_coefficient(t);
        if rest.is_empty() {
            literal += coef;
            continue;
        }
        let k = if rest.len() == 1 { key(&rest[0]) } else { key(&Expr::Product(rest.clone())) };
        groups
            .entry(k)
            .and_modify(|g| g.0 += coef)
            .or_insert((coef, rest));
    }
    let mut out: Vec<Expr> = groups
        .into_values()
        .filter(|(c, _)| *c != 0.0)
        .map(|(c, rest)| rebuild_product(c, rest))
        .collect();
    if literal != 0.0 || literal.is_nan() {
        out.push(Expr::lit(literal));
    }
    match out.len() {
        0 => Expr::lit(0.0),
        1 => out.pop().unwrap(),
        _ => Expr::Sum(out),
    }
}

/// Splits a factor into (base, literal exponent) for like-base merging.
fn split_power(f: Expr) -> (Expr, f64) {
    match f {
        Expr::Pow(b, c) if c.is_literal() => (*b, c.value),
        other => (other, 1.0),
    }
}

fn simplify_product(factors: Vec<Expr>, pos: &Positivity) -> Expr {
    let mut flat = Vec::with_capacity(factors.len());
    for f in factors {
        match f {
            Expr::Product(inner) => flat.extend(inner),
            other => flat.push(other),
        }
    }
    let mut coef = 1.0;
    let mut groups: BTreeMap<String, (Expr, f64)> = BTreeMap::new();
    for f in flat {
        if let Some(v) = f.as_literal() {
            coef *= v;
            continue;
        }
        let (base, e) = split_power(f);
        let k = key(&base);
        groups.entry(k).and_modify(|g| g.1 += e).or_insert((base, e));
    }
    if coef == 0.0 {
        return Expr::lit(0.0);
    }
    let mut rest = Vec::new();
    for (base, e) in groups.into_values() {
        if e == 0.0 {
            continue;
        }
        let f = simplify_pow(base, Constant::literal(e), pos);
        match f.as_literal() {
            Some(v) => coef *= v,
            None => match f {
                Expr::Product(inner) => {
                    for g in inner {
                        match g.as_literal() {
                            Some(v) => coef *= v,
                            None => rest.push(g),
                        }
                    }
                }
                other => rest.push(other),
            },
        }
    }
    if rest.len() > 1 {
        rest.sort_by_cached_key(key);
    }
    if coef != 1.0 && rest.len() == 1 && matches!(rest[0], Expr::Sum(_)) {
        if let Some(Expr::Sum(terms)) = rest.pop() {
            return simplify_sum(
                terms
                    .into_iter()
                    .map(|t| simplify_product(vec![Expr::lit(coef), t], pos))
                    .collect(),
            );
        }
    }
    rebuild_product(coef, rest)
}

fn simplify_pow(base: Expr, c: Constant, pos: &Positivity) -> Expr {
    if !c.is_literal() {
        return Expr::Pow(Box::new(base), c);
    }
    let p = c.value;
    if p == 0.0 {
        return Expr::lit(1.0);
    }
    if p == 1.0 {
        return base;
    }
    if let Some(b) = base.as_literal() {
        if b > 0.0 || p == p.trunc() {
            return Expr::lit(pow(b, p));
        }
    }
    match base {
        Expr::Pow(inner, c2) if c2.is_literal() && is_positive(&inner, pos) => {
            simplify_pow(*inner, Constant::literal(p * c2.value), pos)
        }
        Expr::Product(fs) if fs.iter().all(|f| is_positive(f, pos)) => {
            let parts = fs
                .into_iter()
                .map(|f| simplify_pow(f, Constant::literal(p), pos))
                .collect();
            simplify_product(parts, pos)
        }
        Expr::Unary(UnaryOp::Exp, a) => simplify_exp(simplify_product(vec![Expr::lit(p), *a], pos), pos),
        other => Expr::Pow(Box::new(other), c),
    }
}

fn simplify_ln(a: Expr, pos: &Positivity) -> Expr {
    if let Some(v) = a.as_literal() {
        if v > 0.0 {
            return Expr::lit(v.ln());
        }
        return Expr::ln(a);
    }
    match a {
        Expr::Unary(UnaryOp::Exp, inner) => *inner,
        Expr::Pow(b, c) if is_positive(&b, pos) => {
            simplify_product(vec![Expr::Const(c), simplify_ln(*b, pos)], pos)
        }
        Expr::Product(fs) if fs.iter().all(|f| is_positive(f, pos)) => {
            simplify_sum(fs.into_iter().map(|f| simplify_ln(f, pos)).collect())
        }
        other => Expr::ln(other),
    }
}

/// Recognizes `ln(b)` or `c * ln(b)` with positive `b`, returning the factor
/// `b^c` it contributes to `exp(...)`.
fn log_term_factor(t: &Expr, pos: &Positivity) -> Option<Expr> {
    match t {
        Expr::Unary(UnaryOp::Ln, b) if is_positive(b, pos) => Some((**b).clone()),
        Expr::Product(fs) if fs.len() == 2 => match (&fs[0], &fs[1]) {
            (Expr::Const(c), Expr::Unary(UnaryOp::Ln, b)) if is_positive(b, pos) => {
                Some(simplify_pow((**b).clone(), *c, pos))
            }
            _ => None,
        },
        _ => None,
    }
}

fn simplify_exp(a: Expr, pos: &Positivity) -> Expr {
    if let Some(v) = a.as_literal() {
        return Expr::lit(v.exp());
    }
    if let Some(f) = log_term_factor(&a, pos) {
        return f;
    }
    match a {
        Expr::Sum(terms) => {
            let mut factors = Vec::new();
            let mut rest = Vec::new();
            let mut literal = 0.0;
            for t in terms {
                if let Some(v) = t.as_literal() {
                    literal += v;
                } else if let Some(f) = log_term_factor(&t, pos) {
                    factors.push(f);
                } else {
                    rest.push(t);
                }
            }
            if factors.is_empty() && literal == 0.0 {
                return Expr::exp(Expr::Sum(rest));
            }
            if literal != 0.0 {
                factors.push(Expr::lit(literal.exp()));
            }
            match rest.len() {
                0 => {}
                1 => factors.push(Expr::exp(rest.pop().unwrap())),
                _ => factors.push(Expr::exp(Expr::Sum(rest))),
            }
            simplify_product(factors, pos)
        }
        other => Expr::exp(other),
    }
}
