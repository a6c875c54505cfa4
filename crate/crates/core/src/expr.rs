//! Small arithmetic expression language used by model files.
//!
//! Grammar: `+ - * / ^`, parentheses, numeric literals, `exp(.)`, `tanh(.)`
//! and named variables. Expressions are compiled against an ordered list of
//! variable names and can be differentiated symbolically.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Exp(Box<Expr>),
    Tanh(Box<Expr>),
    /// Only produced by differentiation of non-constant exponents.
    Ln(Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
}

fn lex(src: &str) -> Result<Vec<Tok>> {
    let mut out = Vec::new();
    let chars: Vec<char> = src.chars().collect();
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
            let s: String = chars[start..i].iter().collect();
            let v = s
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("bad number `{s}`")))?;
            out.push(Tok::Num(v));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else if "+-*/^".contains(c) {
            out.push(Tok::Op(c));
            i += 1;
        } else if c == '(' {
            out.push(Tok::LParen);
            i += 1;
        } else if c == ')' {
            out.push(Tok::RParen);
            i += 1;
        } else {
            return Err(Error::Parse(format!("unexpected character `{c}` in `{src}`")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    vars: &'a [&'a str],
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Tok::Op(c)) = self.peek() {
            let c = *c;
            if c != '+' && c != '-' {
                break;
            }
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if c == '+' { Expr::Add(lhs.into(), rhs.into()) } else { Expr::Sub(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        while let Some(Tok::Op(c)) = self.peek() {
            let c = *c;
            if c != '*' && c != '/' {
                break;
            }
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if c == '*' { Expr::Mul(lhs.into(), rhs.into()) } else { Expr::Div(lhs.into(), rhs.into()) };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr> {
        match self.peek() {
            Some(Tok::Op('-')) => {
                self.pos += 1;
                Ok(Expr::Neg(self.unary()?.into()))
            }
            Some(Tok::Op('+')) => {
                self.pos += 1;
                self.unary()
            }
            _ => self.power(),
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if let Some(Tok::Op('^')) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Pow(base.into(), exp.into()));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr> {
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Const(v)),
            Some(Tok::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(Error::Parse("missing `)`".into())),
                }
            }
            Some(Tok::Ident(name)) => {
                if name == "exp" || name == "tanh" {
                    if self.next() != Some(Tok::LParen) {
                        return Err(Error::Parse(format!("`{name}` needs an argument")));
                    }
                    let arg = self.expr()?;
                    if self.next() != Some(Tok::RParen) {
                        return Err(Error::Parse("missing `)`".into()));
                    }
                    return Ok(if name == "exp" { Expr::Exp(arg.into()) } else { Expr::Tanh(arg.into()) });
                }
                match self.vars.iter().position(|v| *v == name) {
                    Some(k) => Ok(Expr::Var(k)),
                    None => Err(Error::Parse(format!("unknown variable `{name}`"))),
                }
            }
            other => Err(Error::Parse(format!("unexpected token {other:?}"))),
        }
    }
}

impl Expr {
    /// Parses `src` with variables resolved against `vars` (index = position).
    pub fn parse(src: &str, vars: &[&str]) -> Result<Expr> {
        let toks = lex(src)?;
        if toks.is_empty() {
            return Err(Error::Parse("empty expression".into()));
        }
        let mut p = Parser { toks, pos: 0, vars };
        let e = p.expr()?;
        if p.pos != p.toks.len() {
            return Err(Error::Parse(format!("trailing input in `{src}`")));
        }
        Ok(e.simplify())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(k) => x[*k],
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, b) => {
                let base = a.eval(x);
                match **b {
                    Expr::Const(c) if c == c.round() && c.abs() < 64.0 => base.powi(c as i32),
                    _ => base.powf(b.eval(x)),
                }
            }
            Expr::Neg(a) => -a.eval(x),
            Expr::Exp(a) => a.eval(x).exp(),
            Expr::Tanh(a) => a.eval(x).tanh(),
            Expr::Ln(a) => a.eval(x).ln(),
        }
    }

    fn is_const(&self) -> Option<f64> {
        if let Expr::Const(c) = self {
            Some(*c)
        } else {
            None
        }
    }

    /// Symbolic partial derivative with respect to variable `k`.
    pub fn diff(&self, k: usize) -> Expr {
        use Expr::*;
        let d = match self {
            Const(_) => Const(0.0),
            Var(j) => Const(if *j == k { 1.0 } else { 0.0 }),
            Add(a, b) => Add(a.diff(k).into(), b.diff(k).into()),
            Sub(a, b) => Sub(a.diff(k).into(), b.diff(k).into()),
            Mul(a, b) => Add(
                Mul(a.diff(k).into(), b.clone()).into(),
                Mul(a.clone(), b.diff(k).into()).into(),
            ),
            Div(a, b) => Div(
                Sub(
                    Mul(a.diff(k).into(), b.clone()).into(),
                    Mul(a.clone(), b.diff(k).into()).into(),
                )
                .into(),
                Pow(b.clone(), Const(2.0).into()).into(),
            ),
            Pow(a, b) => match b.is_const() {
                Some(c) => Mul(
                    Mul(Const(c).into(), Pow(a.clone(), Const(c - 1.0).into()).into()).into(),
                    a.diff(k).into(),
                ),
                None => Mul(
                    self.clone().into(),
                    Add(
                        Mul(b.diff(k).into(), Ln(a.clone()).into()).into(),
                        Div(Mul(b.clone(), a.diff(k).into()).into(), a.clone()).into(),
                    )
                    .into(),
                ),
            },
            Neg(a) => Neg(a.diff(k).into()),
            Exp(a) => Mul(self.clone().into(), a.diff(k).into()),
            Tanh(a) => Mul(
                Sub(Const(1.0).into(), Pow(self.clone().into(), Const(2.0).into()).into()).into(),
                a.diff(k).into(),
            ),
            Ln(a) => Div(a.diff(k).into(), a.clone()),
        };
        d.simplify()
    }

    /// Constant folding and removal of additive/multiplicative identities.
    pub fn simplify(self) -> Expr {
        use Expr::*;
        match self {
            Add(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (a.is_const(), b.is_const()) {
                    (Some(x), Some(y)) => Const(x + y),
                    (Some(x), _) if x == 0.0 => b,
                    (_, Some(y)) if y == 0.0 => a,
                    _ => Add(a.into(), b.into()),
                }
            }
            Sub(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (a.is_const(), b.is_const()) {
                    (Some(x), Some(y)) => Const(x - y),
                    (Some(x), _) if x == 0.0 => Neg(b.into()).simplify(),
                    (_, Some(y)) if y == 0.0 => a,
                    _ => Sub(a.into(), b.into()),
                }
            }
            Mul(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (a.is_const(), b.is_const()) {
                    (Some(x), Some(y)) => Const(x * y),
                    (Some(x), _) | (_, Some(x)) if x == 0.0 => Const(0.0),
                    (Some(x), _) if x == 1.0 => b,
                    (_, Some(y)) if y == 1.0 => a,
                    _ => Mul(a.into(), b.into()),
                }
            }
            Div(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (a.is_const(), b.is_const()) {
                    (Some(x), Some(y)) => Const(x / y),
                    (Some(x), _) if x == 0.0 => Const(0.0),
                    (_, Some(y)) if y == 1.0 => a,
                    _ => Div(a.into(), b.into()),
                }
            }
            Pow(a, b) => {
                let (a, b) = (a.simplify(), b.simplify());
                match (a.is_const(), b.is_const()) {
                    (Some(x), Some(y)) => Const(x.powf(y)),
                    (_, Some(y)) if y == 0.0 => Const(1.0),
                    (_, Some(y)) if y == 1.0 => a,
                    _ => Pow(a.into(), b.into()),
                }
            }
            Neg(a) => match a.simplify() {
                Const(x) => Const(-x),
                Neg(inner) => *inner,
                other => Neg(other.into()),
            },
            Exp(a) => match a.simplify() {
                Const(x) => Const(x.exp()),
                other => Exp(other.into()),
            },
            Tanh(a) => match a.simplify() {
                Const(x) => Const(x.tanh()),
                other => Tanh(other.into()),
            },
            Ln(a) => match a.simplify() {
                Const(x) => Const(x.ln()),
                other => Ln(other.into()),
            },
            e => e,
        }
    }
}
