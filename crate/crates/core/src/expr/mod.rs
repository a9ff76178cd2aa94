//! Symbolic expressions over real variables and fittable constants.
//!
//! The grammar is deliberately small: sums, products, powers with a constant
//! exponent, and the unary operators `ln`, `exp`, `sin` and negation. This is
//! exactly what a pruned LIES network composed with the inverse input/target
//! transforms can emit.
//!
//! Constants come in two flavours. A *literal* (`id == None`) is an ordinary
//! number that simplification may fold freely. A *handle* (`id == Some(_)`)
//! is a named coefficient: simplification treats it as an opaque symbol so
//! that derivatives and substitutions keep referring to it.

mod diff;
mod equiv;
mod eval;
mod parse;
mod render;
mod simplify;

use std::fmt;
use std::ops;

use thiserror::Error;

pub use diff::differentiate;
pub use equiv::{equivalent_up_to_affine, EquivalenceConfig, EquivalenceResult, Verdict};
pub use eval::EvalError;
pub use parse::{parse, ParseError};
pub use render::render;
pub use simplify::{is_positive, simplify, simplify_with, Positivity};

/// Identifier of a fittable constant within one expression.
pub type ConstId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("constant handle {0} does not occur in the expression")]
    UnknownHandle(ConstId),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Constant {
    pub id: Option<ConstId>,
    pub value: f64,
}

impl Constant {
    pub fn literal(value: f64) -> Self {
        Constant { id: None, value }
    }

    pub fn is_literal(&self) -> bool {
        self.id.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UnaryOp {
    Ln,
    Exp,
    Sin,
    Neg,
}

impl UnaryOp {
    pub fn name(self) -> &'static str {
        match self {
            UnaryOp::Ln => "ln",
            UnaryOp::Exp => "exp",
            UnaryOp::Sin => "sin",
            UnaryOp::Neg => "-",
        }
    }
}

/// Immutable expression tree.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    /// Zero-based variable index.
    Var(usize),
    Const(Constant),
    Sum(Vec<Expr>),
    Product(Vec<Expr>),
    /// `base ^ exponent` with a constant exponent.
    Pow(Box<Expr>, Constant),
    Unary(UnaryOp, Box<Expr>),
}

impl Expr {
    pub fn var(index: usize) -> Expr {
        Expr::Var(index)
    }

    pub fn lit(value: f64) -> Expr {
        Expr::Const(Constant::literal(value))
    }

    pub fn handle(id: ConstId, value: f64) -> Expr {
        Expr::Const(Constant { id: Some(id), value })
    }

    pub fn ln(e: Expr) -> Expr {
        Expr::Unary(UnaryOp::Ln, Box::new(e))
    }

    pub fn exp(e: Expr) -> Expr {
        Expr::Unary(UnaryOp::Exp, Box::new(e))
    }

    pub fn sin(e: Expr) -> Expr {
        Expr::Unary(UnaryOp::Sin, Box::new(e))
    }

    pub fn neg(e: Expr) -> Expr {
        Expr::Unary(UnaryOp::Neg, Box::new(e))
    }

    pub fn powf(self, exponent: f64) -> Expr {
        Expr::Pow(Box::new(self), Constant::literal(exponent))
    }

    pub fn sum(terms: Vec<Expr>) -> Expr {
        Expr::Sum(terms)
    }

    pub fn product(factors: Vec<Expr>) -> Expr {
        Expr::Product(factors)
    }

    pub fn as_literal(&self) -> Option<f64> {
        match self {
            Expr::Const(c) if c.is_literal() => Some(c.value),
            _ => None,
        }
    }

    pub fn is_literal_value(&self, v: f64) -> bool {
        self.as_literal() == Some(v)
    }

    /// Number of variables an assignment must provide (largest index + 1).
    pub fn arity(&self) -> usize {
        let mut max = 0;
        self.visit(&mut |e| {
            if let Expr::Var(i) = e {
                max = max.max(i + 1);
            }
        });
        max
    }

    pub fn node_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    /// Pre-order traversal. Power exponents are not visited as nodes.
    pub fn visit<F: FnMut(&Expr)>(&self, f: &mut F) {
        f(self);
        match self {
            Expr::Var(_) | Expr::Const(_) => {}
            Expr::Sum(xs) | Expr::Product(xs) => xs.iter().for_each(|x| x.visit(f)),
            Expr::Pow(b, _) => b.visit(f),
            Expr::Unary(_, a) => a.visit(f),
        }
    }

    /// Every constant in pre-order, including power exponents.
    pub fn constants(&self) -> Vec<Constant> {
        let mut out = Vec::new();
        collect_constants(self, &mut out);
        out
    }

    /// Handle constants only, in pre-order.
    pub fn handles(&self) -> Vec<(ConstId, f64)> {
        self.constants()
            .into_iter()
            .filter_map(|c| c.id.map(|id| (id, c.value)))
            .collect()
    }

    pub fn contains_handle(&self, id: ConstId) -> bool {
        self.constants().iter().any(|c| c.id == Some(id))
    }

    /// Turns every constant (literal or not) into a handle, numbered 0.. in
    /// pre-order.
    pub fn parameterize(&self) -> Expr {
        let mut next = 0;
        self.map_constants(&mut |c| {
            let id = next;
            next += 1;
            Constant { id: Some(id), value: c.value }
        })
    }

    /// Turns every handle back into a literal.
    pub fn freeze(&self) -> Expr {
        self.map_constants(&mut |c| Constant::literal(c.value))
    }

    /// Replaces the value of one handle.
    pub fn with_constant(&self, id: ConstId, value: f64) -> Expr {
        self.map_constants(&mut |c| {
            if c.id == Some(id) {
                Constant { id: c.id, value }
            } else {
                c
            }
        })
    }

    /// Replaces handle values from a lookup `id -> value`; handles not in
    /// the lookup keep their value.
    pub fn with_handle_values(&self, values: &[(ConstId, f64)]) -> Expr {
        self.map_constants(&mut |c| match c.id {
            Some(id) => match values.iter().find(|(k, _)| *k == id) {
                Some(&(_, v)) => Constant { id: c.id, value: v },
                None => c,
            },
            None => c,
        })
    }

    pub fn map_constants<F: FnMut(Constant) -> Constant>(&self, f: &mut F) -> Expr {
        match self {
            Expr::Var(i) => Expr::Var(*i),
            Expr::Const(c) => Expr::Const(f(*c)),
            Expr::Sum(xs) => Expr::Sum(xs.iter().map(|x| x.map_constants(f)).collect()),
            Expr::Product(xs) => Expr::Product(xs.iter().map(|x| x.map_constants(f)).collect()),
            Expr::Pow(b, c) => {
                let base = b.map_constants(f);
                Expr::Pow(Box::new(base), f(*c))
            }
            Expr::Unary(op, a) => Expr::Unary(*op, Box::new(a.map_constants(f))),
        }
    }

    /// Structural equality that ignores handle ids and compares values
    /// bitwise.
    pub fn same_shape(&self, other: &Expr) -> bool {
        fn c_eq(a: &Constant, b: &Constant) -> bool {
            a.value.to_bits() == b.value.to_bits()
        }
        match (self, other) {
            (Expr::Var(a), Expr::Var(b)) => a == b,
            (Expr::Const(a), Expr::Const(b)) => c_eq(a, b),
            (Expr::Sum(a), Expr::Sum(b)) | (Expr::Product(a), Expr::Product(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_shape(y))
            }
            (Expr::Pow(a, ca), Expr::Pow(b, cb)) => c_eq(ca, cb) && a.same_shape(b),
            (Expr::Unary(oa, a), Expr::Unary(ob, b)) => oa == ob && a.same_shape(b),
            _ => false,
        }
    }

    /// Bitwise structural identity including handle ids.
    pub(crate) fn identical(&self, other: &Expr) -> bool {
        fn c_eq(a: &Constant, b: &Constant) -> bool {
            a.id == b.id && a.value.to_bits() == b.value.to_bits()
        }
        match (self, other) {
            (Expr::Var(a), Expr::Var(b)) => a == b,
            (Expr::Const(a), Expr::Const(b)) => c_eq(a, b),
            (Expr::Sum(a), Expr::Sum(b)) | (Expr::Product(a), Expr::Product(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.identical(y))
            }
            (Expr::Pow(a, ca), Expr::Pow(b, cb)) => c_eq(ca, cb) && a.identical(b),
            (Expr::Unary(oa, a), Expr::Unary(ob, b)) => oa == ob && a.identical(b),
            _ => false,
        }
    }
}

fn collect_constants(e: &Expr, out: &mut Vec<Constant>) {
    match e {
        Expr::Var(_) => {}
        Expr::Const(c) => out.push(*c),
        Expr::Sum(xs) | Expr::Product(xs) => xs.iter().for_each(|x| collect_constants(x, out)),
        Expr::Pow(b, c) => {
            collect_constants(b, out);
            out.push(*c);
        }
        Expr::Unary(_, a) => collect_constants(a, out),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}

impl ops::Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::Sum(vec![self, rhs])
    }
}

impl ops::Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::Sum(vec![self, Expr::neg(rhs)])
    }
}

impl ops::Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::Product(vec![self, rhs])
    }
}

impl ops::Div for Expr {
    type Output = Expr;
    fn div(self, rhs: Expr) -> Expr {
        Expr::Product(vec![self, rhs.powf(-1.0)])
    }
}

impl ops::Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::neg(self)
    }
}
