//! A small expression grammar for payoffs and coefficient maps.
//!
//! Grammar (whitespace insensitive):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?          exponent must be constant
//! atom   := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Identifiers `x`, `z` name variable 0; `x1`..`x9` and `z1`..`z9` name
//! variables 0..8. `pi` is a constant. Functions: `sin`, `cos`, `exp`,
//! `sqrt`, `abs`, `max`, `min`. Variables index into whatever vector the
//! caller evaluates against: state components for coefficient maps, the
//! cylinder coordinates `X_{t_1}, X_{t_2}, ...` for path payoffs.

use std::fmt;

use crate::error::{Error, Result};

const MAX_DEPTH: usize = 64;
const MAX_VARS: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
    Abs(Box<Expr>),
    Max(Box<Expr>, Box<Expr>),
    Min(Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn parse(src: &str) -> Result<Expr> {
        let mut p = Parser {
            src: src.as_bytes(),
            pos: 0,
            depth: 0,
        };
        let e = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(e)
    }

    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(i: usize) -> Expr {
        Expr::Var(i)
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(i) => vars.get(*i).copied().unwrap_or(f64::NAN),
            Expr::Neg(a) => -a.eval(vars),
            Expr::Add(a, b) => a.eval(vars) + b.eval(vars),
            Expr::Sub(a, b) => a.eval(vars) - b.eval(vars),
            Expr::Mul(a, b) => a.eval(vars) * b.eval(vars),
            Expr::Div(a, b) => a.eval(vars) / b.eval(vars),
            Expr::Pow(a, k) => powf(a.eval(vars), *k),
            Expr::Sin(a) => a.eval(vars).sin(),
            Expr::Cos(a) => a.eval(vars).cos(),
            Expr::Exp(a) => a.eval(vars).exp(),
            Expr::Abs(a) => a.eval(vars).abs(),
            Expr::Max(a, b) => a.eval(vars).max(b.eval(vars)),
            Expr::Min(a, b) => a.eval(vars).min(b.eval(vars)),
        }
    }

    /// Number of variables referenced (one past the largest index), 0 for
    /// constant expressions.
    pub fn arity(&self) -> usize {
        match self {
            Expr::Const(_) => 0,
            Expr::Var(i) => i + 1,
            Expr::Neg(a)
            | Expr::Pow(a, _)
            | Expr::Sin(a)
            | Expr::Cos(a)
            | Expr::Exp(a)
            | Expr::Abs(a) => a.arity(),
            Expr::Add(a, b)
            | Expr::Sub(a, b)
            | Expr::Mul(a, b)
            | Expr::Div(a, b)
            | Expr::Max(a, b)
            | Expr::Min(a, b) => a.arity().max(b.arity()),
        }
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Symbolic partial derivative. `None` when the expression contains a
    /// non-smooth atom (`abs`, `max`, `min`) on a path that depends on `var`.
    pub fn derivative(&self, var: usize) -> Option<Expr> {
        use Expr::*;
        if self.arity() <= var {
            return Some(Const(0.0));
        }
        Some(match self {
            Const(_) => Const(0.0),
            Var(i) => Const(if *i == var { 1.0 } else { 0.0 }),
            Neg(a) => neg(a.derivative(var)?),
            Add(a, b) => add(a.derivative(var)?, b.derivative(var)?),
            Sub(a, b) => sub(a.derivative(var)?, b.derivative(var)?),
            Mul(a, b) => add(
                mul(a.derivative(var)?, (**b).clone()),
                mul((**a).clone(), b.derivative(var)?),
            ),
            Div(a, b) => div(
                sub(
                    mul(a.derivative(var)?, (**b).clone()),
                    mul((**a).clone(), b.derivative(var)?),
                ),
                pow((**b).clone(), 2.0),
            ),
            Pow(a, k) => mul(
                mul(Const(*k), pow((**a).clone(), k - 1.0)),
                a.derivative(var)?,
            ),
            Sin(a) => mul(Cos(a.clone()), a.derivative(var)?),
            Cos(a) => neg(mul(Sin(a.clone()), a.derivative(var)?)),
            Exp(a) => mul(Exp(a.clone()), a.derivative(var)?),
            Abs(_) | Max(_, _) | Min(_, _) => return None,
        })
    }

    /// Replace variable `i` by `map[i]` (variables beyond `map` are kept).
    pub fn substitute(&self, map: &[Expr]) -> Expr {
        use Expr::*;
        let s = |e: &Expr| Box::new(e.substitute(map));
        match self {
            Const(c) => Const(*c),
            Var(i) => map.get(*i).cloned().unwrap_or(Var(*i)),
            Neg(a) => Neg(s(a)),
            Add(a, b) => Add(s(a), s(b)),
            Sub(a, b) => Sub(s(a), s(b)),
            Mul(a, b) => Mul(s(a), s(b)),
            Div(a, b) => Div(s(a), s(b)),
            Pow(a, k) => Pow(s(a), *k),
            Sin(a) => Sin(s(a)),
            Cos(a) => Cos(s(a)),
            Exp(a) => Exp(s(a)),
            Abs(a) => Abs(s(a)),
            Max(a, b) => Max(s(a), s(b)),
            Min(a, b) => Min(s(a), s(b)),
        }
    }

    /// Rename variable `i` to `to[i]`.
    pub fn remap_vars(&self, to: &[usize]) -> Expr {
        let map: Vec<Expr> = to.iter().map(|&j| Expr::Var(j)).collect();
        self.substitute(&map)
    }
}

fn powf(x: f64, k: f64) -> f64 {
    if k.fract() == 0.0 && k.abs() <= 64.0 {
        x.powi(k as i32)
    } else {
        x.powf(k)
    }
}

// Constructors folding the trivial identities, so derivative trees stay small.

pub(crate) fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        a => Expr::Neg(Box::new(a)),
    }
}

pub(crate) fn add(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x + y),
        (Expr::Const(z), e) | (e, Expr::Const(z)) if z == 0.0 => e,
        (a, b) => Expr::Add(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn sub(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x - y),
        (e, Expr::Const(z)) if z == 0.0 => e,
        (Expr::Const(z), e) if z == 0.0 => neg(e),
        (a, b) => Expr::Sub(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn mul(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(x), Expr::Const(y)) => Expr::Const(x * y),
        (Expr::Const(z), _) | (_, Expr::Const(z)) if z == 0.0 => Expr::Const(0.0),
        (Expr::Const(o), e) | (e, Expr::Const(o)) if o == 1.0 => e,
        (a, b) => Expr::Mul(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn div(a: Expr, b: Expr) -> Expr {
    match (a, b) {
        (Expr::Const(z), _) if z == 0.0 => Expr::Const(0.0),
        (e, Expr::Const(o)) if o == 1.0 => e,
        (a, b) => Expr::Div(Box::new(a), Box::new(b)),
    }
}

pub(crate) fn pow(a: Expr, k: f64) -> Expr {
    if k == 0.0 {
        return Expr::Const(1.0);
    }
    if k == 1.0 {
        return a;
    }
    match a {
        Expr::Const(c) => Expr::Const(powf(c, k)),
        a => Expr::Pow(Box::new(a), k),
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => {
                if *c < 0.0 {
                    write!(f, "({c:?})")
                } else {
                    write!(f, "{c:?}")
                }
            }
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Neg(a) => write!(f, "(-{a})"),
            Expr::Add(a, b) => write!(f, "({a} + {b})"),
            Expr::Sub(a, b) => write!(f, "({a} - {b})"),
            Expr::Mul(a, b) => write!(f, "({a} * {b})"),
            Expr::Div(a, b) => write!(f, "({a} / {b})"),
            Expr::Pow(a, k) => write!(f, "({a} ^ {:?})", k),
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
            Expr::Abs(a) => write!(f, "abs({a})"),
            Expr::Max(a, b) => write!(f, "max({a}, {b})"),
            Expr::Min(a, b) => write!(f, "min({a}, {b})"),
        }
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    depth: usize,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            pos: self.pos,
            msg: msg.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn enter(&mut self) -> Result<()> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.err("expression nested too deeply"));
        }
        Ok(())
    }

    fn expr(&mut self) -> Result<Expr> {
        self.enter()?;
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                break;
            }
        }
        self.depth -= 1;
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                break;
            }
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        self.enter()?;
        let e = if self.eat(b'-') {
            Expr::Neg(Box::new(self.unary()?))
        } else {
            self.power()?
        };
        self.depth -= 1;
        Ok(e)
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat(b'^') {
            let at = self.pos;
            let exponent = self.unary()?;
            if exponent.arity() > 0 {
                return Err(Error::Parse {
                    pos: at,
                    msg: "exponent must be constant".into(),
                });
            }
            let k = exponent.eval(&[]);
            if !k.is_finite() {
                return Err(Error::Parse {
                    pos: at,
                    msg: "exponent must be finite".into(),
                });
            }
            return Ok(Expr::Pow(Box::new(base), k));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.err("unexpected character")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
        {
            self.pos += 1;
        }
        if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < self.src.len() && matches!(self.src[self.pos], b'+' | b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        text.parse::<f64>()
            .map(Expr::Const)
            .map_err(|_| Error::Parse {
                pos: start,
                msg: format!("bad number '{text}'"),
            })
    }

    fn ident(&mut self) -> Result<Expr> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let mut args = vec![self.expr()?];
            while self.eat(b',') {
                args.push(self.expr()?);
            }
            if !self.eat(b')') {
                return Err(self.err("expected ')' after arguments"));
            }
            return self.call(start, name, args);
        }
        match name {
            "pi" => Ok(Expr::Const(std::f64::consts::PI)),
            "x" | "z" => Ok(Expr::Var(0)),
            _ => {
                let bytes = name.as_bytes();
                if bytes.len() >= 2 && matches!(bytes[0], b'x' | b'z') {
                    if let Ok(k) = name[1..].parse::<usize>() {
                        if (1..=MAX_VARS).contains(&k) {
                            return Ok(Expr::Var(k - 1));
                        }
                    }
                }
                Err(Error::Parse {
                    pos: start,
                    msg: format!("unknown identifier '{name}'"),
                })
            }
        }
    }

    fn call(&self, pos: usize, name: &str, mut args: Vec<Expr>) -> Result<Expr> {
        let arity_err = |want: usize| Error::Parse {
            pos,
            msg: format!("{name} takes {want} argument(s)"),
        };
        let unary = |args: &mut Vec<Expr>| -> Result<Box<Expr>> {
            if args.len() != 1 {
                return Err(arity_err(1));
            }
            Ok(Box::new(args.pop().expect("one arg")))
        };
        match name {
            "sin" => Ok(Expr::Sin(unary(&mut args)?)),
            "cos" => Ok(Expr::Cos(unary(&mut args)?)),
            "exp" => Ok(Expr::Exp(unary(&mut args)?)),
            "abs" => Ok(Expr::Abs(unary(&mut args)?)),
            "sqrt" => Ok(Expr::Pow(unary(&mut args)?, 0.5)),
            "max" | "min" => {
                if args.len() != 2 {
                    return Err(arity_err(2));
                }
                let b = Box::new(args.pop().expect("two args"));
                let a = Box::new(args.pop().expect("two args"));
                Ok(if name == "max" {
                    Expr::Max(a, b)
                } else {
                    Expr::Min(a, b)
                })
            }
            _ => Err(Error::Parse {
                pos,
                msg: format!("unknown function '{name}'"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(s: &str, v: &[f64]) -> f64 {
        Expr::parse(s).unwrap().eval(v)
    }

    #[test]
    fn precedence_and_unary_minus() {
        assert_eq!(ev("1 + 2 * 3", &[]), 7.0);
        assert_eq!(ev("-x^2", &[3.0]), -9.0);
        assert_eq!(ev("(x2 - x1)^2", &[1.0, 4.0]), 9.0);
        assert_eq!(ev("2^-1", &[]), 0.5);
        assert_eq!(ev("max(0, abs(x) - 2)", &[-5.0]), 3.0);
        assert_eq!(ev("1e-3 * 2", &[]), 0.002);
    }

    #[test]
    fn rejects_malformed_input() {
        for bad in ["", "1 +", "x^x", "foo(1)", "sin(1, 2)", "x10", "(1", "1)", "3 $"] {
            assert!(Expr::parse(bad).is_err(), "{bad} parsed");
        }
        let deep = "(".repeat(200) + "1" + &")".repeat(200);
        assert!(Expr::parse(&deep).is_err());
    }

    #[test]
    fn derivatives_of_atoms() {
        let e = Expr::parse("x^4").unwrap();
        let d2 = e.derivative(0).unwrap().derivative(0).unwrap();
        assert!((d2.eval(&[2.0]) - 48.0).abs() < 1e-12);
        let c = Expr::parse("1 + 0.1*sin(z)").unwrap();
        assert!((c.derivative(0).unwrap().eval(&[0.0]) - 0.1).abs() < 1e-15);
        assert!(Expr::parse("abs(x)").unwrap().derivative(0).is_none());
        // non-smooth atom in an unrelated variable does not block
        assert!(Expr::parse("abs(x1) + x2").unwrap().derivative(1).is_some());
    }

    #[test]
    fn substitution_shifts_coordinates() {
        let f = Expr::parse("cos(x)").unwrap().remap_vars(&[2]);
        assert_eq!(f.arity(), 3);
        assert!((f.eval(&[9.0, 9.0, 0.0]) - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn display_reparses_to_same_value(a in -5.0f64..5.0, b in -5.0f64..5.0, x in -3.0f64..3.0) {
            let src = format!("{a} * sin(x) + ({b}) * x^2 - cos(x) / 2");
            let e = Expr::parse(&src).unwrap();
            let back = Expr::parse(&e.to_string()).unwrap();
            prop_assert!((e.eval(&[x]) - back.eval(&[x])).abs() <= 1e-12);
        }

        #[test]
        fn derivative_matches_central_difference(x in -2.0f64..2.0) {
            let e = Expr::parse("x^3 * cos(x) + exp(0.3*x) / (2 + sin(x))").unwrap();
            let d = e.derivative(0).unwrap();
            let h = 1e-5;
            let fd = (e.eval(&[x + h]) - e.eval(&[x - h])) / (2.0 * h);
            prop_assert!((d.eval(&[x]) - fd).abs() < 1e-6);
        }
    }
}
