//! Deterministic in-process evaluator for a tiny Python-flavoured dialect.
//!
//! Supported: exact integer/rational arithmetic (`+ - * / // % **`),
//! comparisons (chained, as in Python), `True`/`False`, parentheses,
//! `name = expr`, `print(expr, ...)` and `#` comments. Statements are
//! separated by newlines or `;`. Errors use Python exception names so the
//! feedback classifier treats both backends alike.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use super::ExecutionResult;

/// Results with more bits than this raise `OverflowError`.
const MAX_RESULT_BITS: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Num(BigRational),
    Bool(bool),
}

impl Value {
    #[cfg(test)]
    fn int(n: i64) -> Self {
        Value::Num(BigRational::from_integer(BigInt::from(n)))
    }

    fn as_num(&self) -> BigRational {
        match self {
            Value::Num(n) => n.clone(),
            Value::Bool(b) => BigRational::from_integer(BigInt::from(*b as i32)),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(true) => f.write_str("True"),
            Value::Bool(false) => f.write_str("False"),
            Value::Num(n) if n.is_integer() => write!(f, "{}", n.numer()),
            Value::Num(n) => write!(f, "{}/{}", n.numer(), n.denom()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exception {
    pub name: &'static str,
    pub message: String,
}

impl Exception {
    fn new(name: &'static str, message: impl Into<String>) -> Self {
        Self { name, message: message.into() }
    }

    fn syntax(message: impl Into<String>) -> Self {
        Self::new("SyntaxError", message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Num(BigRational),
    Name(String),
    Op(&'static str),
    LParen,
    RParen,
    Comma,
    Assign,
}

const OPS: [&str; 14] = ["**", "//", "==", "!=", "<=", ">=", "+", "-", "*", "/", "%", "<", ">", "!"];

fn tokenize(src: &str) -> Result<Vec<Tok>, Exception> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_digit() || (c == b'.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'_') {
                i += 1;
            }
            let int_part: String = src[start..i].chars().filter(|c| *c != '_').collect();
            let mut value = BigRational::from_integer(int_part.parse::<BigInt>().unwrap_or_default());
            if i < bytes.len() && bytes[i] == b'.' {
                i += 1;
                let fstart = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let frac = &src[fstart..i];
                if !frac.is_empty() {
                    let scale = BigInt::from(10).pow(frac.len() as u32);
                    let numer: BigInt = frac.parse().expect("digits");
                    value += BigRational::new(numer, scale);
                }
            }
            if i < bytes.len() && (bytes[i].is_ascii_alphabetic() || bytes[i] == b'_') {
                return Err(Exception::syntax("invalid decimal literal"));
            }
            out.push(Tok::Num(value));
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Tok::Name(src[start..i].to_string()));
            continue;
        }
        match c {
            b'(' => out.push(Tok::LParen),
            b')' => out.push(Tok::RParen),
            b',' => out.push(Tok::Comma),
            _ => {
                let rest = &src[i..];
                if let Some(op) = OPS.iter().find(|op| rest.starts_with(**op)) {
                    if *op == "!" {
                        return Err(Exception::syntax("invalid syntax"));
                    }
                    out.push(Tok::Op(op));
                    i += op.len();
                    continue;
                }
                if c == b'=' {
                    out.push(Tok::Assign);
                } else {
                    let ch = rest.chars().next().unwrap_or('?');
                    return Err(Exception::syntax(format!("invalid character '{ch}'")));
                }
            }
        }
        i += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Expr {
    Lit(Value),
    Var(String),
    Neg(Box<Expr>),
    Pos(Box<Expr>),
    Bin(&'static str, Box<Expr>, Box<Expr>),
    Compare(Box<Expr>, Vec<(&'static str, Expr)>),
    Call(String, Vec<Expr>),
}

#[derive(Debug, Clone)]
enum Stmt {
    Assign(String, Expr),
    Print(Vec<Expr>),
    Expr(Expr),
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat_op(&mut self, ops: &[&'static str]) -> Option<&'static str> {
        match self.peek() {
            Some(Tok::Op(op)) if ops.contains(op) => {
                let op = *op;
                self.pos += 1;
                Some(op)
            }
            _ => None,
        }
    }

    fn statement(&mut self) -> Result<Stmt, Exception> {
        let stmt = match (self.toks.first(), self.toks.get(1)) {
            (Some(Tok::Name(name)), Some(Tok::Assign)) => {
                let name = name.clone();
                if matches!(name.as_str(), "True" | "False" | "print") {
                    return Err(Exception::syntax("cannot assign to keyword"));
                }
                self.pos = 2;
                Stmt::Assign(name, self.expr()?)
            }
            _ => match self.expr()? {
                Expr::Call(name, args) if name == "print" => Stmt::Print(args),
                e => Stmt::Expr(e),
            },
        };
        if self.pos != self.toks.len() {
            return Err(Exception::syntax("invalid syntax"));
        }
        Ok(stmt)
    }

    fn expr(&mut self) -> Result<Expr, Exception> {
        let first = self.sum()?;
        let mut rest = Vec::new();
        while let Some(op) = self.eat_op(&["==", "!=", "<=", ">=", "<", ">"]) {
            rest.push((op, self.sum()?));
        }
        Ok(if rest.is_empty() { first } else { Expr::Compare(Box::new(first), rest) })
    }

    fn sum(&mut self) -> Result<Expr, Exception> {
        let mut lhs = self.term()?;
        while let Some(op) = self.eat_op(&["+", "-"]) {
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.term()?));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr, Exception> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.eat_op(&["*", "/", "//", "%"]) {
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, Exception> {
        if self.eat_op(&["-"]).is_some() {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op(&["+"]).is_some() {
            return Ok(Expr::Pos(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, Exception> {
        let base = self.atom()?;
        if self.eat_op(&["**"]).is_some() {
            return Ok(Expr::Bin("**", Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Expr, Exception> {
        match self.next() {
            Some(Tok::Num(n)) => Ok(Expr::Lit(Value::Num(n))),
            Some(Tok::Name(name)) => match name.as_str() {
                "True" => Ok(Expr::Lit(Value::Bool(true))),
                "False" => Ok(Expr::Lit(Value::Bool(false))),
                _ if self.peek() == Some(&Tok::LParen) => {
                    self.pos += 1;
                    let mut args = Vec::new();
                    if self.peek() == Some(&Tok::RParen) {
                        self.pos += 1;
                    } else {
                        loop {
                            args.push(self.expr()?);
                            match self.next() {
                                Some(Tok::Comma) => continue,
                                Some(Tok::RParen) => break,
                                _ => return Err(Exception::syntax("'(' was never closed")),
                            }
                        }
                    }
                    Ok(Expr::Call(name, args))
                }
                _ => Ok(Expr::Var(name)),
            },
            Some(Tok::LParen) => {
                let e = self.expr()?;
                match self.next() {
                    Some(Tok::RParen) => Ok(e),
                    _ => Err(Exception::syntax("'(' was never closed")),
                }
            }
            _ => Err(Exception::syntax("invalid syntax")),
        }
    }
}

fn floor_div(a: &BigRational, b: &BigRational) -> BigRational {
    (a / b).floor()
}

fn pow(base: &BigRational, exp: &BigRational) -> Result<BigRational, Exception> {
    if !exp.is_integer() {
        return Err(Exception::new("TypeError", "non-integer exponents are not supported"));
    }
    let e = exp.to_integer();
    if base.is_zero() && e.is_negative() {
        return Err(Exception::new("ZeroDivisionError", "0.0 cannot be raised to a negative power"));
    }
    let trivial = base.is_zero() || base.abs().is_one();
    let e_abs = e.abs().to_u64();
    let bits = base.numer().bits().max(base.denom().bits());
    let e_abs = match e_abs {
        Some(n) if trivial || bits.saturating_mul(n) <= MAX_RESULT_BITS => n,
        _ if trivial => {
            // |base| <= 1: only the parity of the exponent matters.
            if e.is_even() { 2 } else { 1 }
        }
        _ => return Err(Exception::new("OverflowError", "result too large")),
    };
    let mut acc = BigRational::one();
    let mut sq = base.clone();
    let mut n = e_abs;
    while n > 0 {
        if n & 1 == 1 {
            acc *= &sq;
        }
        n >>= 1;
        if n > 0 {
            sq = &sq * &sq;
        }
    }
    Ok(if e.is_negative() { acc.recip() } else { acc })
}

/// Persistent namespace of one builtin session. Cloning it is a snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuiltinEnv {
    vars: BTreeMap<String, Value>,
}

impl BuiltinEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.vars.get(name)
    }

    pub fn reset(&mut self) {
        self.vars.clear();
    }

    fn eval(&self, e: &Expr) -> Result<Value, Exception> {
        Ok(match e {
            Expr::Lit(v) => v.clone(),
            Expr::Var(name) => self
                .vars
                .get(name)
                .cloned()
                .ok_or_else(|| Exception::new("NameError", format!("name '{name}' is not defined")))?,
            Expr::Neg(inner) => Value::Num(-self.eval(inner)?.as_num()),
            Expr::Pos(inner) => Value::Num(self.eval(inner)?.as_num()),
            Expr::Bin(op, l, r) => {
                let a = self.eval(l)?.as_num();
                let b = self.eval(r)?.as_num();
                Value::Num(match *op {
                    "+" => a + b,
                    "-" => a - b,
                    "*" => a * b,
                    "/" if b.is_zero() => return Err(Exception::new("ZeroDivisionError", "division by zero")),
                    "/" => a / b,
                    "//" if b.is_zero() => {
                        return Err(Exception::new("ZeroDivisionError", "integer division or modulo by zero"))
                    }
                    "//" => floor_div(&a, &b),
                    "%" if b.is_zero() => return Err(Exception::new("ZeroDivisionError", "integer modulo by zero")),
                    "%" => {
                        let q = floor_div(&a, &b);
                        a - b * q
                    }
                    "**" => pow(&a, &b)?,
                    _ => unreachable!("operator {op}"),
                })
            }
            Expr::Compare(first, rest) => {
                let mut lhs = self.eval(first)?.as_num();
                for (op, rhs_expr) in rest {
                    let rhs = self.eval(rhs_expr)?.as_num();
                    let holds = match *op {
                        "==" => lhs == rhs,
                        "!=" => lhs != rhs,
                        "<" => lhs < rhs,
                        "<=" => lhs <= rhs,
                        ">" => lhs > rhs,
                        ">=" => lhs >= rhs,
                        _ => unreachable!(),
                    };
                    if !holds {
                        return Ok(Value::Bool(false));
                    }
                    lhs = rhs;
                }
                Value::Bool(true)
            }
            Expr::Call(name, args) => {
                let vals = args.iter().map(|a| self.eval(a)).collect::<Result<Vec<_>, _>>()?;
                match (name.as_str(), vals.as_slice()) {
                    ("abs", [v]) => Value::Num(v.as_num().abs()),
                    ("print", _) => return Err(Exception::syntax("print() is only allowed as a statement")),
                    ("abs", _) => return Err(Exception::new("TypeError", "abs() takes exactly one argument")),
                    _ => return Err(Exception::new("NameError", format!("name '{name}' is not defined"))),
                }
            }
        })
    }

    /// Runs `code` against this namespace. Statements executed before an error
    /// keep their effects.
    pub fn run(&mut self, code: &str) -> ExecutionResult {
        let mut result = ExecutionResult::default();
        let mut last_value = None;
        for line in code.lines() {
            let line = line.split('#').next().unwrap_or("");
            for stmt_src in line.split(';') {
                if stmt_src.trim().is_empty() {
                    continue;
                }
                match self.run_statement(stmt_src, &mut result.stdout) {
                    Ok(v) => last_value = v,
                    Err(exc) => {
                        result.exception_name = Some(exc.name.to_string());
                        result.exception_message = Some(exc.message);
                        return result;
                    }
                }
            }
        }
        result.value_repr = last_value.map(|v| v.to_string());
        result
    }

    fn run_statement(&mut self, src: &str, stdout: &mut String) -> Result<Option<Value>, Exception> {
        let toks = tokenize(src)?;
        let stmt = Parser { toks, pos: 0 }.statement()?;
        match stmt {
            Stmt::Assign(name, e) => {
                let v = self.eval(&e)?;
                self.vars.insert(name, v);
                Ok(None)
            }
            Stmt::Print(args) => {
                let vals = args.iter().map(|a| self.eval(a)).collect::<Result<Vec<_>, _>>()?;
                let line = vals.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
                stdout.push_str(&line);
                stdout.push('\n');
                Ok(None)
            }
            Stmt::Expr(e) => self.eval(&e).map(Some),
        }
    }
}
