//! Coefficient expression language.
//!
//! Expressions are real-valued functions of `x`, `t`, `tau` and the state
//! components `V1..Vn`. They are parsed once, differentiated symbolically and
//! compiled to a small stack program for the hot loops of operator assembly.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A free variable of the expression language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Var {
    X,
    T,
    Tau,
    /// State component `V{i+1}` (zero based).
    V(u16),
}

impl Var {
    pub fn name(self) -> String {
        match self {
            Var::X => "x".to_string(),
            Var::T => "t".to_string(),
            Var::Tau => "tau".to_string(),
            Var::V(i) => alloc::format!("V{}", i + 1),
        }
    }

    /// Parses a variable name; `None` for anything that is not a variable.
    pub fn from_name(s: &str) -> Option<Var> {
        match s {
            "x" => Some(Var::X),
            "t" => Some(Var::T),
            "tau" => Some(Var::Tau),
            _ => {
                let digits = s.strip_prefix('V')?;
                if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) || digits.starts_with('0') {
                    return None;
                }
                let k: u32 = digits.parse().ok()?;
                if k == 0 || k > u16::MAX as u32 {
                    return None;
                }
                Some(Var::V((k - 1) as u16))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    fn from_name(s: &str) -> Option<Func> {
        Some(match s {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "sqrt" => Func::Sqrt,
            "abs" => Func::Abs,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Expression tree. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("unbound variable `{0}`")]
    UnboundVariable(String),
}

/// Variable bindings for evaluation. Unset scalars are `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Env<'a> {
    pub x: Option<f64>,
    pub t: Option<f64>,
    pub tau: Option<f64>,
    pub v: &'a [f64],
}

impl<'a> Env<'a> {
    pub fn xt(x: f64, t: f64) -> Env<'static> {
        Env { x: Some(x), t: Some(t), tau: None, v: &[] }
    }

    pub fn xtv(x: f64, t: f64, v: &'a [f64]) -> Env<'a> {
        Env { x: Some(x), t: Some(t), tau: None, v }
    }

    fn get(&self, var: Var) -> Result<f64, EvalError> {
        let val = match var {
            Var::X => self.x,
            Var::T => self.t,
            Var::Tau => self.tau,
            Var::V(i) => self.v.get(i as usize).copied(),
        };
        val.ok_or_else(|| EvalError::UnboundVariable(var.name()))
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(u8),
    LParen,
    RParen,
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_digit() || c == b'.' {
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let lit = &text[start..i];
            let v: f64 = lit
                .parse()
                .map_err(|_| ParseError::Syntax { offset: start, message: alloc::format!("malformed number `{lit}`") })?;
            out.push((Tok::Num(v), start));
        } else if c.is_ascii_alphabetic() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push((Tok::Ident(text[start..i].to_string()), start));
        } else {
            let tok = match c {
                b'+' | b'-' | b'*' | b'/' | b'^' => Tok::Op(c),
                b'(' => Tok::LParen,
                b')' => Tok::RParen,
                _ => {
                    // Report the full character, not a byte of a multibyte sequence.
                    let ch = text[start..].chars().next().unwrap_or('?');
                    return Err(ParseError::Syntax { offset: start, message: alloc::format!("unexpected character `{ch}`") });
                }
            };
            i += 1;
            out.push((tok, start));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    len: usize,
    _src: &'a str,
}

const MAX_DEPTH: usize = 256;

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(_, o)| *o).unwrap_or(self.len)
    }

    fn err<T>(&self, message: &str) -> Result<T, ParseError> {
        Err(ParseError::Syntax { offset: self.offset(), message: message.to_string() })
    }

    fn expr(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth > MAX_DEPTH {
            return self.err("expression nested too deeply");
        }
        let mut lhs = self.term(depth + 1)?;
        while let Some(Tok::Op(op @ (b'+' | b'-'))) = self.peek() {
            let op = if *op == b'+' { BinOp::Add } else { BinOp::Sub };
            self.pos += 1;
            let rhs = self.term(depth + 1)?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self, depth: usize) -> Result<Expr, ParseError> {
        let mut lhs = self.unary(depth + 1)?;
        while let Some(Tok::Op(op @ (b'*' | b'/'))) = self.peek() {
            let op = if *op == b'*' { BinOp::Mul } else { BinOp::Div };
            self.pos += 1;
            let rhs = self.unary(depth + 1)?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self, depth: usize) -> Result<Expr, ParseError> {
        if depth > MAX_DEPTH {
            return self.err("expression nested too deeply");
        }
        match self.peek() {
            Some(Tok::Op(b'-')) => {
                self.pos += 1;
                Ok(Expr::Neg(Box::new(self.unary(depth + 1)?)))
            }
            Some(Tok::Op(b'+')) => {
                self.pos += 1;
                self.unary(depth + 1)
            }
            _ => self.power(depth + 1),
        }
    }

    fn power(&mut self, depth: usize) -> Result<Expr, ParseError> {
        let base = self.primary(depth + 1)?;
        if let Some(Tok::Op(b'^')) = self.peek() {
            self.pos += 1;
            let negative = if let Some(Tok::Op(b'-')) = self.peek() {
                self.pos += 1;
                true
            } else {
                false
            };
            let at = self.offset();
            match self.peek() {
                Some(Tok::Num(v)) if libm::trunc(*v) == *v && *v <= i32::MAX as f64 => {
                    let k = *v as i32;
                    self.pos += 1;
                    if let Some(Tok::Op(b'^')) = self.peek() {
                        return self.err("chained `^` is ambiguous; use parentheses");
                    }
                    Ok(Expr::Pow(Box::new(base), if negative { -k } else { k }))
                }
                _ => Err(ParseError::Syntax { offset: at, message: "exponent must be an integer literal".to_string() }),
            }
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self, depth: usize) -> Result<Expr, ParseError> {
        let at = self.offset();
        match self.peek().cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.expr(depth + 1)?;
                match self.peek() {
                    Some(Tok::RParen) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    _ => self.err("expected `)`"),
                }
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if name == "pi" {
                    return Ok(Expr::Const(core::f64::consts::PI));
                }
                if let Some(f) = Func::from_name(&name) {
                    if !matches!(self.peek(), Some(Tok::LParen)) {
                        return self.err("expected `(` after function name");
                    }
                    self.pos += 1;
                    let arg = self.expr(depth + 1)?;
                    if !matches!(self.peek(), Some(Tok::RParen)) {
                        return self.err("expected `)`");
                    }
                    self.pos += 1;
                    return Ok(Expr::Call(f, Box::new(arg)));
                }
                match Var::from_name(&name) {
                    Some(v) => Ok(Expr::Var(v)),
                    None => Err(ParseError::UnknownIdentifier { name, offset: at }),
                }
            }
            Some(_) => self.err("expected a number, variable, function or `(`"),
            None => self.err("unexpected end of input"),
        }
    }
}

/// Parses an expression. Standard precedence: unary minus binds looser than `^`.
pub fn parse(text: &str) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    if toks.is_empty() {
        return Err(ParseError::Syntax { offset: 0, message: "empty expression".to_string() });
    }
    let mut p = Parser { toks, pos: 0, len: text.len(), _src: text };
    let e = p.expr(0)?;
    if p.pos != p.toks.len() {
        return p.err("unexpected trailing input");
    }
    Ok(e)
}

impl core::str::FromStr for Expr {
    type Err = ParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse(s)
    }
}

// ---------------------------------------------------------------------------
// Construction helpers with trivial constant folding
// ---------------------------------------------------------------------------

impl Expr {
    pub fn c(v: f64) -> Expr {
        Expr::Const(v)
    }

    pub fn var(v: Var) -> Expr {
        Expr::Var(v)
    }

    fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(v) => Some(*v),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.as_const() == Some(0.0)
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x + y),
            (Some(x), _) if x == 0.0 => b,
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::Bin(BinOp::Add, Box::new(a), Box::new(b)),
        }
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x - y),
            (Some(x), _) if x == 0.0 => Expr::neg(b),
            (_, Some(y)) if y == 0.0 => a,
            _ => Expr::Bin(BinOp::Sub, Box::new(a), Box::new(b)),
        }
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), Some(y)) => Expr::Const(x * y),
            (Some(x), _) if x == 0.0 => Expr::Const(0.0),
            (_, Some(y)) if y == 0.0 => Expr::Const(0.0),
            (Some(x), _) if x == 1.0 => b,
            (_, Some(y)) if y == 1.0 => a,
            (Some(x), _) if x == -1.0 => Expr::neg(b),
            (_, Some(y)) if y == -1.0 => Expr::neg(a),
            _ => Expr::Bin(BinOp::Mul, Box::new(a), Box::new(b)),
        }
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        match (a.as_const(), b.as_const()) {
            (Some(x), _) if x == 0.0 => Expr::Const(0.0),
            (_, Some(y)) if y == 1.0 => a,
            _ => Expr::Bin(BinOp::Div, Box::new(a), Box::new(b)),
        }
    }

    pub fn neg(a: Expr) -> Expr {
        match a {
            Expr::Const(v) => Expr::Const(-v),
            Expr::Neg(inner) => *inner,
            other => Expr::Neg(Box::new(other)),
        }
    }

    pub fn pow(a: Expr, k: i32) -> Expr {
        match k {
            0 => Expr::Const(1.0),
            1 => a,
            _ => Expr::Pow(Box::new(a), k),
        }
    }

    pub fn call(f: Func, a: Expr) -> Expr {
        Expr::Call(f, Box::new(a))
    }

    /// Replaces every occurrence of `var` by `with`.
    pub fn substitute(&self, var: Var, with: &Expr) -> Expr {
        match self {
            Expr::Var(v) if *v == var => with.clone(),
            Expr::Const(_) | Expr::Var(_) => self.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(a.substitute(var, with))),
            Expr::Bin(op, a, b) => Expr::Bin(*op, Box::new(a.substitute(var, with)), Box::new(b.substitute(var, with))),
            Expr::Pow(a, k) => Expr::Pow(Box::new(a.substitute(var, with)), *k),
            Expr::Call(f, a) => Expr::Call(*f, Box::new(a.substitute(var, with))),
        }
    }

    /// True when `var` occurs in the tree.
    pub fn depends_on(&self, var: Var) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(v) => *v == var,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => a.depends_on(var),
            Expr::Bin(_, a, b) => a.depends_on(var) || b.depends_on(var),
        }
    }

    /// Free variables in first-occurrence order, without duplicates.
    pub fn free_vars(&self) -> Vec<Var> {
        fn walk(e: &Expr, out: &mut Vec<Var>) {
            match e {
                Expr::Const(_) => {}
                Expr::Var(v) => {
                    if !out.contains(v) {
                        out.push(*v)
                    }
                }
                Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => walk(a, out),
                Expr::Bin(_, a, b) => {
                    walk(a, out);
                    walk(b, out)
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    /// Number of nodes in the tree.
    pub fn size(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Var(_) => 1,
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Call(_, a) => 1 + a.size(),
            Expr::Bin(_, a, b) => 1 + a.size() + b.size(),
        }
    }
}

// ---------------------------------------------------------------------------
// Differentiation
// ---------------------------------------------------------------------------

/// Symbolic partial derivative with respect to `var`.
pub fn differentiate(e: &Expr, var: Var) -> Expr {
    match e {
        Expr::Const(_) => Expr::Const(0.0),
        Expr::Var(v) => Expr::Const(if *v == var { 1.0 } else { 0.0 }),
        Expr::Neg(a) => Expr::neg(differentiate(a, var)),
        Expr::Bin(op, a, b) => {
            let da = differentiate(a, var);
            let db = differentiate(b, var);
            match op {
                BinOp::Add => Expr::add(da, db),
                BinOp::Sub => Expr::sub(da, db),
                BinOp::Mul => Expr::add(Expr::mul(da, (**b).clone()), Expr::mul((**a).clone(), db)),
                BinOp::Div => {
                    // (a'b - ab') / b^2
                    let num = Expr::sub(Expr::mul(da, (**b).clone()), Expr::mul((**a).clone(), db));
                    Expr::div(num, Expr::pow((**b).clone(), 2))
                }
            }
        }
        Expr::Pow(a, k) => {
            let da = differentiate(a, var);
            if da.is_zero() {
                return Expr::Const(0.0);
            }
            Expr::mul(Expr::mul(Expr::Const(*k as f64), Expr::pow((**a).clone(), k - 1)), da)
        }
        Expr::Call(f, a) => {
            let da = differentiate(a, var);
            if da.is_zero() {
                return Expr::Const(0.0);
            }
            let inner = (**a).clone();
            let outer = match f {
                Func::Sin => Expr::call(Func::Cos, inner),
                Func::Cos => Expr::neg(Expr::call(Func::Sin, inner)),
                Func::Exp => Expr::call(Func::Exp, inner),
                Func::Log => return Expr::div(da, inner),
                Func::Sqrt => {
                    return Expr::div(da, Expr::mul(Expr::Const(2.0), Expr::call(Func::Sqrt, inner)));
                }
                Func::Abs => Expr::div(inner.clone(), Expr::call(Func::Abs, inner)),
            };
            Expr::mul(outer, da)
        }
    }
}

impl Expr {
    pub fn diff(&self, var: Var) -> Expr {
        differentiate(self, var)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn apply_func(f: Func, x: f64) -> f64 {
    match f {
        Func::Sin => libm::sin(x),
        Func::Cos => libm::cos(x),
        Func::Exp => libm::exp(x),
        Func::Log => libm::log(x),
        Func::Sqrt => libm::sqrt(x),
        Func::Abs => libm::fabs(x),
    }
}

fn powi(x: f64, k: i32) -> f64 {
    // Exponentiation by squaring; deterministic across platforms.
    let mut base = if k < 0 { 1.0 / x } else { x };
    let mut n = k.unsigned_abs();
    let mut acc = 1.0;
    while n > 0 {
        if n & 1 == 1 {
            acc *= base;
        }
        base *= base;
        n >>= 1;
    }
    acc
}

/// Evaluates with full domain checking.
pub fn eval(e: &Expr, env: &Env<'_>) -> Result<f64, EvalError> {
    let v = eval_rec(e, env)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::Domain("non-finite result"))
    }
}

fn eval_rec(e: &Expr, env: &Env<'_>) -> Result<f64, EvalError> {
    Ok(match e {
        Expr::Const(v) => *v,
        Expr::Var(v) => env.get(*v)?,
        Expr::Neg(a) => -eval_rec(a, env)?,
        Expr::Bin(op, a, b) => {
            let x = eval_rec(a, env)?;
            let y = eval_rec(b, env)?;
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    x / y
                }
            }
        }
        Expr::Pow(a, k) => {
            let x = eval_rec(a, env)?;
            if x == 0.0 && *k < 0 {
                return Err(EvalError::DivisionByZero);
            }
            powi(x, *k)
        }
        Expr::Call(f, a) => {
            let x = eval_rec(a, env)?;
            match f {
                Func::Log if x <= 0.0 => return Err(EvalError::Domain("log of a nonpositive argument")),
                Func::Sqrt if x < 0.0 => return Err(EvalError::Domain("sqrt of a negative argument")),
                _ => apply_func(*f, x),
            }
        }
    })
}

impl Expr {
    pub fn eval(&self, env: &Env<'_>) -> Result<f64, EvalError> {
        eval(self, env)
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

fn prec(e: &Expr) -> u8 {
    match e {
        Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
        Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
        Expr::Neg(_) => 3,
        Expr::Pow(..) => 4,
        Expr::Const(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => 3,
        _ => 5,
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min: u8) -> fmt::Result {
    if prec(e) < min {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => {
                if v.is_finite() {
                    // `{:?}` is the shortest representation that round-trips.
                    if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) {
                        write!(f, "-{:?}", -v)
                    } else {
                        write!(f, "{v:?}")
                    }
                } else if v.is_nan() {
                    write!(f, "(0/0)")
                } else if *v > 0.0 {
                    write!(f, "(1/0)")
                } else {
                    write!(f, "(-1/0)")
                }
            }
            Expr::Var(v) => write!(f, "{}", v.name()),
            Expr::Neg(a) => {
                write!(f, "-")?;
                write_child(f, a, 4)
            }
            Expr::Bin(op, a, b) => {
                let (sym, p) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::Div => ("/", 2),
                };
                write_child(f, a, p)?;
                write!(f, "{sym}")?;
                // Parenthesize equal precedence on the right so the tree shape
                // (and thus rounding) survives a round trip.
                write_child(f, b, p + 1)
            }
            Expr::Pow(a, k) => {
                write_child(f, a, 5)?;
                if *k < 0 {
                    write!(f, "^-{}", k.unsigned_abs())
                } else {
                    write!(f, "^{k}")
                }
            }
            Expr::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// Renders an expression in the surface syntax accepted by [`parse`].
pub fn render(e: &Expr) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Compiled form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Const(f64),
    X,
    T,
    Tau,
    V(u16),
    Neg,
    Add,
    Sub,
    Mul,
    Div,
    Pow(i32),
    Call(Func),
}

/// Postfix program for fast repeated evaluation.
///
/// `eval_fast` performs no domain checks; callers validate finiteness of the
/// assembled results.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    ops: Vec<Op>,
    depth: usize,
    constant: Option<f64>,
}

const STACK: usize = 32;

impl Program {
    pub fn compile(e: &Expr) -> Program {
        fn emit(e: &Expr, ops: &mut Vec<Op>) {
            match e {
                Expr::Const(v) => ops.push(Op::Const(*v)),
                Expr::Var(Var::X) => ops.push(Op::X),
                Expr::Var(Var::T) => ops.push(Op::T),
                Expr::Var(Var::Tau) => ops.push(Op::Tau),
                Expr::Var(Var::V(i)) => ops.push(Op::V(*i)),
                Expr::Neg(a) => {
                    emit(a, ops);
                    ops.push(Op::Neg)
                }
                Expr::Bin(op, a, b) => {
                    emit(a, ops);
                    emit(b, ops);
                    ops.push(match op {
                        BinOp::Add => Op::Add,
                        BinOp::Sub => Op::Sub,
                        BinOp::Mul => Op::Mul,
                        BinOp::Div => Op::Div,
                    })
                }
                Expr::Pow(a, k) => {
                    emit(a, ops);
                    ops.push(Op::Pow(*k))
                }
                Expr::Call(f, a) => {
                    emit(a, ops);
                    ops.push(Op::Call(*f))
                }
            }
        }
        let mut ops = Vec::new();
        emit(e, &mut ops);
        let mut d = 0usize;
        let mut depth = 0usize;
        for op in &ops {
            match op {
                Op::Const(_) | Op::X | Op::T | Op::Tau | Op::V(_) => d += 1,
                Op::Add | Op::Sub | Op::Mul | Op::Div => d -= 1,
                _ => {}
            }
            depth = depth.max(d);
        }
        let constant = if e.free_vars().is_empty() { eval(e, &Env::default()).ok() } else { None };
        Program { ops, depth, constant }
    }

    pub fn constant_value(&self) -> Option<f64> {
        self.constant
    }

    /// Evaluates at `(x, t, tau, V)` without domain checks.
    #[inline]
    pub fn eval_fast(&self, x: f64, t: f64, tau: f64, v: &[f64]) -> f64 {
        if let Some(c) = self.constant {
            return c;
        }
        if self.depth > STACK {
            return self.eval_slow(x, t, tau, v);
        }
        let mut st = [0.0f64; STACK];
        let mut sp = 0usize;
        for op in &self.ops {
            match *op {
                Op::Const(c) => {
                    st[sp] = c;
                    sp += 1
                }
                Op::X => {
                    st[sp] = x;
                    sp += 1
                }
                Op::T => {
                    st[sp] = t;
                    sp += 1
                }
                Op::Tau => {
                    st[sp] = tau;
                    sp += 1
                }
                Op::V(i) => {
                    st[sp] = v.get(i as usize).copied().unwrap_or(f64::NAN);
                    sp += 1
                }
                Op::Neg => st[sp - 1] = -st[sp - 1],
                Op::Add => {
                    sp -= 1;
                    st[sp - 1] += st[sp]
                }
                Op::Sub => {
                    sp -= 1;
                    st[sp - 1] -= st[sp]
                }
                Op::Mul => {
                    sp -= 1;
                    st[sp - 1] *= st[sp]
                }
                Op::Div => {
                    sp -= 1;
                    st[sp - 1] /= st[sp]
                }
                Op::Pow(k) => st[sp - 1] = powi(st[sp - 1], k),
                Op::Call(f) => st[sp - 1] = apply_func(f, st[sp - 1]),
            }
        }
        st[0]
    }

    fn eval_slow(&self, x: f64, t: f64, tau: f64, v: &[f64]) -> f64 {
        let mut st: Vec<f64> = Vec::with_capacity(self.depth);
        for op in &self.ops {
            match *op {
                Op::Const(c) => st.push(c),
                Op::X => st.push(x),
                Op::T => st.push(t),
                Op::Tau => st.push(tau),
                Op::V(i) => st.push(v.get(i as usize).copied().unwrap_or(f64::NAN)),
                Op::Neg => {
                    let a = st.pop().unwrap_or(f64::NAN);
                    st.push(-a)
                }
                Op::Add | Op::Sub | Op::Mul | Op::Div => {
                    let b = st.pop().unwrap_or(f64::NAN);
                    let a = st.pop().unwrap_or(f64::NAN);
                    st.push(match op {
                        Op::Add => a + b,
                        Op::Sub => a - b,
                        Op::Mul => a * b,
                        _ => a / b,
                    })
                }
                Op::Pow(k) => {
                    let a = st.pop().unwrap_or(f64::NAN);
                    st.push(powi(a, k))
                }
                Op::Call(f) => {
                    let a = st.pop().unwrap_or(f64::NAN);
                    st.push(apply_func(f, a))
                }
            }
        }
        st.pop().unwrap_or(f64::NAN)
    }
}

/// Parsed expression together with its compiled program.
#[derive(Debug, Clone, PartialEq)]
pub struct Compiled {
    pub expr: Expr,
    pub program: Program,
}

impl Compiled {
    pub fn new(expr: Expr) -> Compiled {
        let program = Program::compile(&expr);
        Compiled { expr, program }
    }

    pub fn parse(text: &str) -> Result<Compiled, ParseError> {
        Ok(Compiled::new(parse(text)?))
    }

    pub fn constant(v: f64) -> Compiled {
        Compiled::new(Expr::Const(v))
    }

    #[inline]
    pub fn at(&self, x: f64, t: f64) -> f64 {
        self.program.eval_fast(x, t, 0.0, &[])
    }

    #[inline]
    pub fn at_v(&self, x: f64, t: f64, v: &[f64]) -> f64 {
        self.program.eval_fast(x, t, 0.0, v)
    }

    #[inline]
    pub fn at_tau(&self, t: f64, tau: f64) -> f64 {
        self.program.eval_fast(0.0, t, tau, &[])
    }

    pub fn diff(&self, var: Var) -> Compiled {
        Compiled::new(differentiate(&self.expr, var))
    }

    pub fn is_zero(&self) -> bool {
        self.expr.is_zero()
    }
}
