//! Arithmetic expression ASTs for system coefficients and perturbations.
//!
//! Grammar (lowest to highest binding): `+ -` < `* /` < unary `-` < `^`,
//! with `^` right-associative. Variables are `t` and `y1..yn`; `pi` is the
//! only named constant and parses to its f64 value.

use crate::error::{Error, Result};
use crate::scalar::Real;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    T,
    /// 1-based component index into the state vector.
    Y(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Tanh,
    Exp,
    Log,
    Abs,
    Sqrt,
    Min,
    Max,
}

impl Func {
    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "min" => Func::Min,
            "max" => Func::Max,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    /// Finite nonnegative literal; negative values arise via `Neg`.
    Num(f64),
    Var(Var),
    Neg(Box<ExprAst>),
    Bin(BinOp, Box<ExprAst>, Box<ExprAst>),
    Call(Func, Vec<ExprAst>),
}

impl ExprAst {
    /// Largest y-index referenced, 0 when the expression is y-free.
    pub fn max_y_index(&self) -> usize {
        match self {
            ExprAst::Num(_) => 0,
            ExprAst::Var(Var::T) => 0,
            ExprAst::Var(Var::Y(i)) => *i,
            ExprAst::Neg(e) => e.max_y_index(),
            ExprAst::Bin(_, l, r) => l.max_y_index().max(r.max_y_index()),
            ExprAst::Call(_, args) => args.iter().map(|a| a.max_y_index()).max().unwrap_or(0),
        }
    }

    pub fn references_y(&self) -> bool {
        self.max_y_index() > 0
    }

    /// Structurally the literal zero (used to detect unperturbed systems).
    pub fn is_zero_literal(&self) -> bool {
        matches!(self, ExprAst::Num(c) if *c == 0.0)
    }

    pub fn eval<T: Real>(&self, t: T, y: &[T]) -> Result<T> {
        match self {
            ExprAst::Num(c) => Ok(T::of(*c)),
            ExprAst::Var(Var::T) => Ok(t),
            ExprAst::Var(Var::Y(i)) => y
                .get(i - 1)
                .copied()
                .ok_or_else(|| Error::UnboundVariable(format!("y{i}"))),
            ExprAst::Neg(e) => Ok(-e.eval(t, y)?),
            ExprAst::Bin(op, l, r) => {
                let a = l.eval(t, y)?;
                let b = r.eval(t, y)?;
                match op {
                    BinOp::Add => Ok(a + b),
                    BinOp::Sub => Ok(a - b),
                    BinOp::Mul => Ok(a * b),
                    BinOp::Div => {
                        if b == T::zero() {
                            Err(Error::Domain(format!("division by zero ({a} / 0)")))
                        } else {
                            Ok(a / b)
                        }
                    }
                    BinOp::Pow => {
                        let v = a.powf(b);
                        if v.is_nan() && !a.is_nan() && !b.is_nan() {
                            Err(Error::Domain(format!("invalid power {a} ^ {b}")))
                        } else {
                            Ok(v)
                        }
                    }
                }
            }
            ExprAst::Call(f, args) => {
                let a = args[0].eval(t, y)?;
                match f {
                    Func::Sin => Ok(a.sin()),
                    Func::Cos => Ok(a.cos()),
                    Func::Tan => Ok(a.tan()),
                    Func::Tanh => Ok(a.tanh()),
                    Func::Exp => Ok(a.exp()),
                    Func::Log => {
                        if a <= T::zero() {
                            Err(Error::Domain(format!("log of non-positive value {a}")))
                        } else {
                            Ok(a.ln())
                        }
                    }
                    Func::Abs => Ok(a.abs()),
                    Func::Sqrt => {
                        if a < T::zero() {
                            Err(Error::Domain(format!("sqrt of negative value {a}")))
                        } else {
                            Ok(a.sqrt())
                        }
                    }
                    Func::Min => Ok(a.min(args[1].eval(t, y)?)),
                    Func::Max => Ok(a.max(args[1].eval(t, y)?)),
                }
            }
        }
    }

    /// Binding strength used by the printer; higher binds tighter.
    fn prec(&self) -> u8 {
        match self {
            ExprAst::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            ExprAst::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            ExprAst::Neg(_) => 3,
            ExprAst::Bin(BinOp::Pow, ..) => 4,
            ExprAst::Num(_) | ExprAst::Var(_) | ExprAst::Call(..) => 5,
        }
    }
}

pub fn parse_expression(src: &str) -> Result<ExprAst> {
    let mut p = Parser::new(src)?;
    let e = p.expr()?;
    match p.peek().kind {
        TokKind::End => Ok(e),
        _ => Err(p.unexpected("end of input")),
    }
}

pub fn eval_expression<T: Real>(ast: &ExprAst, t: T, y: &[T]) -> Result<T> {
    ast.eval(t, y)
}

// ---------------------------------------------------------------------------
// Printer. Parenthesization preserves the tree exactly: print-then-reparse is
// the identity on ASTs (for nonnegative literals, the only kind the parser
// produces).

impl fmt::Display for ExprAst {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(out: &mut fmt::Formatter<'_>, e: &ExprAst, parens: bool) -> fmt::Result {
            if parens {
                write!(out, "({e})")
            } else {
                write!(out, "{e}")
            }
        }
        match self {
            ExprAst::Num(c) => write!(out, "{c}"),
            ExprAst::Var(Var::T) => write!(out, "t"),
            ExprAst::Var(Var::Y(i)) => write!(out, "y{i}"),
            // The operand of unary minus is a `unary` production: anything
            // below Neg precedence needs parentheses.
            ExprAst::Neg(e) => {
                write!(out, "-")?;
                child(out, e, e.prec() < 3)
            }
            ExprAst::Bin(op, l, r) => {
                let (sym, p) = match op {
                    BinOp::Add => ("+", 1),
                    BinOp::Sub => ("-", 1),
                    BinOp::Mul => ("*", 2),
                    BinOp::Div => ("/", 2),
                    BinOp::Pow => ("^", 4),
                };
                if *op == BinOp::Pow {
                    // Left side is an `atom`; right side is a `unary`.
                    child(out, l, l.prec() < 5)?;
                    write!(out, "{sym}")?;
                    child(out, r, r.prec() < 3)
                } else {
                    // Left-associative: equal precedence on the right would
                    // regroup on reparse.
                    child(out, l, l.prec() < p)?;
                    write!(out, "{sym}")?;
                    child(out, r, r.prec() <= p)
                }
            }
            ExprAst::Call(f, args) => {
                write!(out, "{}(", f.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(out, ",")?;
                    }
                    write!(out, "{a}")?;
                }
                write!(out, ")")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer and recursive-descent parser.

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    offset: usize,
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'+' => toks.push(Token {
                kind: TokKind::Plus,
                offset: start,
            }),
            b'-' => toks.push(Token {
                kind: TokKind::Minus,
                offset: start,
            }),
            b'*' => toks.push(Token {
                kind: TokKind::Star,
                offset: start,
            }),
            b'/' => toks.push(Token {
                kind: TokKind::Slash,
                offset: start,
            }),
            b'^' => toks.push(Token {
                kind: TokKind::Caret,
                offset: start,
            }),
            b'(' => toks.push(Token {
                kind: TokKind::LParen,
                offset: start,
            }),
            b')' => toks.push(Token {
                kind: TokKind::RParen,
                offset: start,
            }),
            b',' => toks.push(Token {
                kind: TokKind::Comma,
                offset: start,
            }),
            b'0'..=b'9' | b'.' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
                    i += 1;
                    let frac_start = i;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                    if i == frac_start && i - start == 1 {
                        return Err(Error::Syntax {
                            offset: start,
                            msg: "lone `.` is not a number".into(),
                        });
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let value: f64 = text.parse().map_err(|_| Error::Syntax {
                    offset: start,
                    msg: format!("malformed number `{text}`"),
                })?;
                toks.push(Token {
                    kind: TokKind::Num(value),
                    offset: start,
                });
                continue;
            }
            b'a'..=b'z' | b'A'..=b'Z' | b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                toks.push(Token {
                    kind: TokKind::Ident(src[start..i].to_string()),
                    offset: start,
                });
                continue;
            }
            _ => {
                return Err(Error::Syntax {
                    offset: start,
                    msg: format!("unexpected character `{}`", &src[start..start + 1]),
                })
            }
        }
        i += 1;
    }
    toks.push(Token {
        kind: TokKind::End,
        offset: src.len(),
    });
    Ok(toks)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn new(src: &str) -> Result<Self> {
        Ok(Parser {
            toks: lex(src)?,
            pos: 0,
        })
    }

    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn eat(&mut self, kind: &TokKind) -> bool {
        if &self.peek().kind == kind {
            self.bump();
            true
        } else {
            false
        }
    }

    fn unexpected(&self, wanted: &str) -> Error {
        let tok = self.peek();
        let what = match &tok.kind {
            TokKind::End => "end of input".to_string(),
            TokKind::Num(v) => format!("number `{v}`"),
            TokKind::Ident(s) => format!("`{s}`"),
            TokKind::Plus => "`+`".into(),
            TokKind::Minus => "`-`".into(),
            TokKind::Star => "`*`".into(),
            TokKind::Slash => "`/`".into(),
            TokKind::Caret => "`^`".into(),
            TokKind::LParen => "`(`".into(),
            TokKind::RParen => "`)`".into(),
            TokKind::Comma => "`,`".into(),
        };
        Error::Syntax {
            offset: tok.offset,
            msg: format!("expected {wanted}, found {what}"),
        }
    }

    fn expr(&mut self) -> Result<ExprAst> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().kind {
                TokKind::Plus => BinOp::Add,
                TokKind::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.term()?;
            lhs = ExprAst::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<ExprAst> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().kind {
                TokKind::Star => BinOp::Mul,
                TokKind::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.bump();
            let rhs = self.unary()?;
            lhs = ExprAst::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<ExprAst> {
        if self.eat(&TokKind::Minus) {
            Ok(ExprAst::Neg(Box::new(self.unary()?)))
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<ExprAst> {
        let base = self.atom()?;
        if self.eat(&TokKind::Caret) {
            // Right-hand side is a `unary`, giving right associativity and
            // allowing `2^-3`.
            let exponent = self.unary()?;
            Ok(ExprAst::Bin(BinOp::Pow, Box::new(base), Box::new(exponent)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<ExprAst> {
        let tok = self.peek().clone();
        match tok.kind {
            TokKind::Num(v) => {
                self.bump();
                Ok(ExprAst::Num(v))
            }
            TokKind::LParen => {
                self.bump();
                let inner = self.expr()?;
                if self.eat(&TokKind::RParen) {
                    Ok(inner)
                } else {
                    Err(self.unexpected("`)`"))
                }
            }
            TokKind::Ident(name) => {
                self.bump();
                if self.eat(&TokKind::LParen) {
                    let func = Func::lookup(&name).ok_or(Error::UnknownIdentifier {
                        name: name.clone(),
                        offset: tok.offset,
                    })?;
                    let mut args = vec![self.expr()?];
                    while self.eat(&TokKind::Comma) {
                        args.push(self.expr()?);
                    }
                    if !self.eat(&TokKind::RParen) {
                        return Err(self.unexpected("`)` or `,`"));
                    }
                    if args.len() != func.arity() {
                        return Err(Error::Arity {
                            name: func.name(),
                            expected: func.arity(),
                            got: args.len(),
                        });
                    }
                    Ok(ExprAst::Call(func, args))
                } else {
                    resolve_variable(&name, tok.offset)
                }
            }
            _ => Err(self.unexpected("expression")),
        }
    }
}

fn resolve_variable(name: &str, offset: usize) -> Result<ExprAst> {
    if name == "t" {
        return Ok(ExprAst::Var(Var::T));
    }
    if name == "pi" {
        return Ok(ExprAst::Num(std::f64::consts::PI));
    }
    if let Some(digits) = name.strip_prefix('y') {
        if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
            // Reject leading zeros so every accepted spelling is canonical.
            if digits.starts_with('0') {
                return Err(Error::UnknownIdentifier {
                    name: name.into(),
                    offset,
                });
            }
            let index: usize = digits.parse().map_err(|_| Error::UnknownIdentifier {
                name: name.into(),
                offset,
            })?;
            return Ok(ExprAst::Var(Var::Y(index)));
        }
    }
    Err(Error::UnknownIdentifier {
        name: name.into(),
        offset,
    })
}
