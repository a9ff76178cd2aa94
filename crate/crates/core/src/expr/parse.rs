//! Recursive-descent parser for the infix expression grammar.
//!
//! ```text
//! expr  := term (('+' | '-') term)*
//! term  := unary (('*' | '/') unary)*
//! unary := '-' unary | power
//! power := atom ('^' unary)?
//! atom  := number | 'pi' | 'x' digits | func '(' expr ')' | '(' expr ')'
//! func  := ln | log | exp | sin | cos | sqrt
//! ```
//!
//! Variables are 1-based in text (`x1` is index 0). `cos(a)` is rewritten to
//! `sin(pi/2 - a)` and `sqrt(a)` to `a^0.5`. Exponents must reduce to a
//! literal constant.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

use super::{simplify, Constant, Expr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("unexpected character '{ch}' at offset {pos}")]
    UnexpectedChar { ch: char, pos: usize },
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("unknown identifier '{0}'")]
    UnknownIdent(String),
    #[error("invalid number '{0}'")]
    BadNumber(String),
    #[error("exponent must be a constant, got '{0}'")]
    NonConstantExponent(String),
    #[error("variable index must be >= 1, got '{0}'")]
    BadVariable(String),
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

fn lex(src: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            // scientific suffix
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let text: String = chars[start..i].iter().collect();
            let v = text.parse::<f64>().map_err(|_| ParseError::BadNumber(text.clone()))?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Tok::Ident(chars[start..i].iter().collect()), start));
        } else if "+-*/^()".contains(c) {
            out.push((Tok::Op(c), i));
            i += 1;
        } else {
            return Err(ParseError::UnexpectedChar { ch: c, pos: i });
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn next(&mut self) -> Result<Tok, ParseError> {
        let t = self.toks.get(self.pos).ok_or(ParseError::UnexpectedEnd)?.0.clone();
        self.pos += 1;
        Ok(t)
    }

    fn expect(&mut self, op: char) -> Result<(), ParseError> {
        match self.toks.get(self.pos) {
            Some((Tok::Op(c), _)) if *c == op => {
                self.pos += 1;
                Ok(())
            }
            Some((t, p)) => Err(ParseError::UnexpectedChar { ch: tok_char(t), pos: *p }),
            None => Err(ParseError::UnexpectedEnd),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut terms = vec![self.term()?];
        while let Some(Tok::Op(c @ ('+' | '-'))) = self.peek().cloned() {
            self.pos += 1;
            let t = self.term()?;
            terms.push(if c == '-' { Expr::neg(t) } else { t });
        }
        Ok(if terms.len() == 1 { terms.pop().unwrap() } else { Expr::Sum(terms) })
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut factors = vec![self.unary()?];
        while let Some(Tok::Op(c @ ('*' | '/'))) = self.peek().cloned() {
            self.pos += 1;
            let f = self.unary()?;
            factors.push(if c == '/' { f.powf(-1.0) } else { f });
        }
        Ok(if factors.len() == 1 { factors.pop().unwrap() } else { Expr::Product(factors) })
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if let Some(Tok::Op('-')) = self.peek() {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(match inner {
                Expr::Const(c) if c.is_literal() => Expr::lit(-c.value),
                other => Expr::neg(other),
            });
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exponent = self.unary()?;
            let folded = simplify(&exponent);
            return match folded.as_literal() {
                Some(v) => Ok(Expr::Pow(Box::new(base), Constant::literal(v))),
                None => Err(ParseError::NonConstantExponent(exponent.to_string())),
            };
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.next()? {
            Tok::Num(v) => Ok(Expr::lit(v)),
            Tok::Op('(') => {
                let e = self.expr()?;
                self.expect(')')?;
                Ok(e)
            }
            Tok::Ident(name) => self.ident(name),
            Tok::Op(c) => Err(ParseError::UnexpectedChar {
                ch: c,
                pos: self.toks[self.pos - 1].1,
            }),
        }
    }

    fn ident(&mut self, name: String) -> Result<Expr, ParseError> {
        match name.as_str() {
            "pi" => return Ok(Expr::lit(PI)),
            "inf" => return Ok(Expr::lit(f64::INFINITY)),
            "NaN" => return Ok(Expr::lit(f64::NAN)),
            _ => {}
        }
        if let Some(digits) = name.strip_prefix('x') {
            if !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) {
                let k: usize = digits.parse().map_err(|_| ParseError::BadVariable(name.clone()))?;
                if k == 0 {
                    return Err(ParseError::BadVariable(name));
                }
                return Ok(Expr::Var(k - 1));
            }
        }
        let func: fn(Expr) -> Expr = match name.as_str() {
            "ln" | "log" => Expr::ln,
            "exp" => Expr::exp,
            "sin" => Expr::sin,
            "cos" => |a| Expr::sin(Expr::lit(FRAC_PI_2) - a),
            "sqrt" => |a| a.powf(0.5),
            _ => return Err(ParseError::UnknownIdent(name)),
        };
        self.expect('(')?;
        let arg = self.expr()?;
        self.expect(')')?;
        Ok(func(arg))
    }
}

fn tok_char(t: &Tok) -> char {
    match t {
        Tok::Op(c) => *c,
        Tok::Num(_) => '#',
        Tok::Ident(s) => s.chars().next().unwrap_or('?'),
    }
}

/// Parses the infix grammar produced by [`super::render`].
pub fn parse(src: &str) -> Result<Expr, ParseError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, pos: 0 };
    let e = p.expr()?;
    if let Some((t, pos)) = p.toks.get(p.pos) {
        return Err(ParseError::UnexpectedChar { ch: tok_char(t), pos: *pos });
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_basic_forms() {
        let e = parse("2.5*x1*x2").unwrap();
        assert_eq!(e.eval(&[2.0, 3.0]).unwrap(), 15.0);
        let e = parse("x1/(x2*x3)").unwrap();
        assert!((e.eval(&[6.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        let e = parse("exp(-x1)").unwrap();
        assert!((e.eval(&[1.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let e = parse("x1^2*x2").unwrap();
        assert_eq!(e.eval(&[3.0, 2.0]).unwrap(), 18.0);
        let e = parse("sqrt(x1*x2)").unwrap();
        assert!((e.eval(&[2.0, 8.0]).unwrap() - 4.0).abs() < 1e-12);
        let e = parse("cos(x1)").unwrap();
        assert!((e.eval(&[0.3]).unwrap() - 0.3f64.cos()).abs() < 1e-12);
        let e = parse("x1^-1 - 2e-3").unwrap();
        assert!((e.eval(&[4.0]).unwrap() - 0.248).abs() < 1e-12);
        let e = parse("pi*x1").unwrap();
        assert_eq!(e.eval(&[1.0]).unwrap(), PI);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse("x1 +"), Err(ParseError::UnexpectedEnd)));
        assert!(matches!(parse("x1 ^ x2"), Err(ParseError::NonConstantExponent(_))));
        assert!(matches!(parse("foo(x1)"), Err(ParseError::UnknownIdent(_))));
        assert!(matches!(parse("x0"), Err(ParseError::BadVariable(_))));
        assert!(matches!(parse("x1 $ 2"), Err(ParseError::UnexpectedChar { .. })));
        assert!(matches!(parse("(x1"), Err(ParseError::UnexpectedEnd)));
    }
}
