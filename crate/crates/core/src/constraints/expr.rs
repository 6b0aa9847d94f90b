//! Tiny arithmetic expression language for analytic data.
//!
//! Grammar: numbers, the variables `x y t` (plus `z gx gy` where a caller
//! binds them), the constants `pi` and `e`, binary `+ - * /`, unary minus,
//! parentheses, and the functions `sin cos exp` (one argument) and
//! `min max` (two arguments).

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Var {
    X,
    Y,
    T,
    Z,
    Gx,
    Gy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(Var),
    Neg(Box<Node>),
    Bin(char, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Values bound to the expression variables.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vars {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub z: f64,
    pub gx: f64,
    pub gy: f64,
}

impl Vars {
    pub fn at(x: f64, y: f64, t: f64) -> Self {
        Self {
            x,
            y,
            t,
            ..Default::default()
        }
    }
}

/// Parsed expression; keeps its source text for reporting.
#[derive(Clone, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Expr({:?})", self.source)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

impl Expr {
    pub fn parse(source: &str) -> Result<Self> {
        let mut p = Parser {
            src: source.as_bytes(),
            pos: 0,
        };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.src.len() {
            return Err(p.error("unexpected trailing input"));
        }
        Ok(Self {
            source: source.to_string(),
            root,
        })
    }

    pub fn constant(c: f64) -> Self {
        Self {
            source: format!("{c}"),
            root: Node::Num(c),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, v: &Vars) -> f64 {
        eval(&self.root, v)
    }

    pub fn eval_xyt(&self, x: f64, y: f64, t: f64) -> f64 {
        self.eval(&Vars::at(x, y, t))
    }

    /// True when the expression does not reference `t`.
    pub fn is_time_independent(&self) -> bool {
        !uses(&self.root, Var::T)
    }
}

fn uses(n: &Node, var: Var) -> bool {
    match n {
        Node::Num(_) => false,
        Node::Var(v) => *v == var,
        Node::Neg(a) => uses(a, var),
        Node::Bin(_, a, b) => uses(a, var) || uses(b, var),
        Node::Call(_, args) => args.iter().any(|a| uses(a, var)),
    }
}

fn eval(n: &Node, v: &Vars) -> f64 {
    match n {
        Node::Num(c) => *c,
        Node::Var(var) => match var {
            Var::X => v.x,
            Var::Y => v.y,
            Var::T => v.t,
            Var::Z => v.z,
            Var::Gx => v.gx,
            Var::Gy => v.gy,
        },
        Node::Neg(a) => -eval(a, v),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, v), eval(b, v));
            match op {
                '+' => a + b,
                '-' => a - b,
                '*' => a * b,
                _ => a / b,
            }
        }
        Node::Call(f, args) => match f {
            Func::Sin => eval(&args[0], v).sin(),
            Func::Cos => eval(&args[0], v).cos(),
            Func::Exp => eval(&args[0], v).exp(),
            Func::Min => eval(&args[0], v).min(eval(&args[1], v)),
            Func::Max => eval(&args[0], v).max(eval(&args[1], v)),
        },
    }
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Expression {
            column: self.pos + 1,
            message: message.to_string(),
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

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.peek() == Some(c) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", c as char)))
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Node::Bin(op as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Node::Bin(op as char, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.peek() == Some(b'+') {
            self.pos += 1;
            return self.unary();
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.expect(b')')?;
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => self.ident(),
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of expression")),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let exp_sign = (c == b'+' || c == b'-')
                && self.pos > start
                && matches!(self.src[self.pos - 1], b'e' | b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || exp_sign {
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>()
            .map(Node::Num)
            .map_err(|_| Error::Expression {
                column: start + 1,
                message: format!("invalid number `{text}`"),
            })
    }

    fn ident(&mut self) -> Result<Node> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphanumeric() {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        let func = match name {
            "sin" => Some((Func::Sin, 1)),
            "cos" => Some((Func::Cos, 1)),
            "exp" => Some((Func::Exp, 1)),
            "min" => Some((Func::Min, 2)),
            "max" => Some((Func::Max, 2)),
            _ => None,
        };
        if let Some((f, arity)) = func {
            self.expect(b'(')?;
            let mut args = vec![self.expr()?];
            while self.peek() == Some(b',') {
                self.pos += 1;
                args.push(self.expr()?);
            }
            self.expect(b')')?;
            if args.len() != arity {
                return Err(Error::Expression {
                    column: start + 1,
                    message: format!("`{name}` takes {arity} argument(s), got {}", args.len()),
                });
            }
            return Ok(Node::Call(f, args));
        }
        let node = match name {
            "x" => Node::Var(Var::X),
            "y" => Node::Var(Var::Y),
            "t" => Node::Var(Var::T),
            "z" => Node::Var(Var::Z),
            "gx" => Node::Var(Var::Gx),
            "gy" => Node::Var(Var::Gy),
            "pi" => Node::Num(std::f64::consts::PI),
            "e" => Node::Num(std::f64::consts::E),
            _ => {
                return Err(Error::Expression {
                    column: start + 1,
                    message: format!("unknown identifier `{name}`"),
                })
            }
        };
        Ok(node)
    }
}

impl serde::Serialize for Expr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.source)
    }
}
