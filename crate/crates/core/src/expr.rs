//! Small arithmetic expression language for coefficients, data and nonlinearities.
//!
//! ```text
//! sum     := product (('+' | '-') product)*
//! product := unary (('*' | '/') unary)*
//! unary   := '-' unary | power
//! power   := atom ('^' unary)?
//! atom    := number | variable | func '(' sum ')' | '(' sum ')'
//! ```

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variables of space-time data expressions.
pub const SPACE_TIME_VARS: [&str; 3] = ["x", "y", "t"];
/// Variables of nonlinearity expressions: the state and its gradient.
pub const STATE_VARS: [&str; 3] = ["u", "px", "py"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            Self::Add => '+',
            Self::Sub => '-',
            Self::Mul => '*',
            Self::Div => '/',
            Self::Pow => '^',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Tanh,
    Abs,
}

impl Func {
    pub const ALL: [Func; 5] = [Func::Sin, Func::Cos, Func::Exp, Func::Tanh, Func::Abs];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sin => "sin",
            Self::Cos => "cos",
            Self::Exp => "exp",
            Self::Tanh => "tanh",
            Self::Abs => "abs",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Self::Sin => v.sin(),
            Self::Cos => v.cos(),
            Self::Exp => v.exp(),
            Self::Tanh => v.tanh(),
            Self::Abs => v.abs(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Num(f64),
    /// Index into the variable list the expression was parsed against.
    Var(usize),
    Neg(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

impl Node {
    fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Self::Num(v) => *v,
            Self::Var(i) => vars[*i],
            Self::Neg(e) => -e.eval(vars),
            Self::Bin(op, a, b) => {
                let (a, b) = (a.eval(vars), b.eval(vars));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                }
            }
            Self::Call(f, e) => f.apply(e.eval(vars)),
        }
    }

    fn write(&self, names: &[String], out: &mut impl fmt::Write) -> fmt::Result {
        match self {
            Self::Num(v) => write!(out, "{v:?}"),
            Self::Var(i) => out.write_str(&names[*i]),
            Self::Neg(e) => {
                out.write_str("(-")?;
                e.write(names, out)?;
                out.write_char(')')
            }
            Self::Bin(op, a, b) => {
                out.write_char('(')?;
                a.write(names, out)?;
                write!(out, " {} ", op.symbol())?;
                b.write(names, out)?;
                out.write_char(')')
            }
            Self::Call(f, e) => {
                write!(out, "{}(", f.name())?;
                e.write(names, out)?;
                out.write_char(')')
            }
        }
    }
}

/// Parsed expression together with its variable names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub root: Node,
    pub vars: Vec<String>,
    pub source: String,
}

impl Expression {
    /// Evaluates with `values[i]` bound to `vars[i]`.
    pub fn eval(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.vars.len(), "expression takes {} variables", self.vars.len());
        self.root.eval(values)
    }

    /// Fully parenthesized form; parsing it gives back the same tree.
    pub fn normalized(&self) -> String {
        let mut s = String::new();
        self.root.write(&self.vars, &mut s).expect("writing to a String");
        s
    }

    pub fn constant(v: f64, vars: &[&str]) -> Self {
        Self {
            root: Node::Num(v),
            vars: vars.iter().map(|s| s.to_string()).collect(),
            source: format!("{v:?}"),
        }
    }

    /// True when no variable occurs.
    pub fn is_constant(&self) -> bool {
        fn walk(n: &Node) -> bool {
            match n {
                Node::Num(_) => true,
                Node::Var(_) => false,
                Node::Neg(e) | Node::Call(_, e) => walk(e),
                Node::Bin(_, a, b) => walk(a) && walk(b),
            }
        }
        walk(&self.root)
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.root.write(&self.vars, f)
    }
}

/// Parses over the space-time variables `x`, `y`, `t`.
pub fn parse_expr(text: &str) -> Result<Expression> {
    parse_with_vars(text, &SPACE_TIME_VARS)
}

pub fn parse_with_vars(text: &str, vars: &[&str]) -> Result<Expression> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        vars,
    };
    let root = p.sum()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.error(&["operator", "end of input"]));
    }
    Ok(Expression {
        root,
        vars: vars.iter().map(|s| s.to_string()).collect(),
        source: text.to_string(),
    })
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

const OPERAND: [&str; 5] = ["number", "variable", "function", "(", "-"];

impl Parser<'_> {
    fn error(&self, expected: &[&str]) -> Error {
        Error::Parse {
            offset: self.pos,
            expected: expected.iter().map(|s| s.to_string()).collect(),
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

    fn sum(&mut self) -> Result<Node> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek() {
                Some(b'+') => BinOp::Add,
                Some(b'-') => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.product()?));
        }
    }

    fn product(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek() {
                Some(b'*') => BinOp::Mul,
                Some(b'/') => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        let base = self.atom()?;
        if self.eat(b'^') {
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.sum()?;
                if !self.eat(b')') {
                    return Err(self.error(&[")"]));
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.name(),
            _ => Err(self.error(&OPERAND)),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        let digits = |p: &mut Self| {
            let s = p.pos;
            while p.pos < p.src.len() && p.src[p.pos].is_ascii_digit() {
                p.pos += 1;
            }
            p.pos - s
        };
        let mut n = digits(self);
        if self.src.get(self.pos) == Some(&b'.') {
            self.pos += 1;
            n += digits(self);
        }
        if n == 0 {
            self.pos = start;
            return Err(self.error(&["number"]));
        }
        if matches!(self.src.get(self.pos), Some(b'e' | b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.src.get(self.pos), Some(b'+' | b'-')) {
                self.pos += 1;
            }
            if digits(self) == 0 {
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii slice");
        text.parse().map(Node::Num).map_err(|_| {
            self.pos = start;
            self.error(&["number"])
        })
    }

    fn name(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let word = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii slice");
        if let Some(i) = self.vars.iter().position(|v| *v == word) {
            return Ok(Node::Var(i));
        }
        if let Some(f) = Func::ALL.into_iter().find(|f| f.name() == word) {
            if !self.eat(b'(') {
                return Err(self.error(&["("]));
            }
            let arg = self.sum()?;
            if !self.eat(b')') {
                return Err(self.error(&[")"]));
            }
            return Ok(Node::Call(f, Box::new(arg)));
        }
        self.pos = start;
        let mut expected: Vec<&str> = self.vars.to_vec();
        expected.extend(Func::ALL.iter().map(|f| f.name()));
        Err(self.error(&expected))
    }
}
