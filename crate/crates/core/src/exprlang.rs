//! Scalar expression trees: parsing, evaluation and symbolic differentiation.
//!
//! Every function that enters a scenario (height of a graph manifold,
//! dynamics components, endpoint maps) is written as a string and compiled
//! against a [`VarSet`]. Variables are resolved to slot indices at parse
//! time, so evaluation takes a plain `&[f64]` slice in declaration order.
//!
//! Grammar (usual precedence, `^` binds tightest and is right-associative):
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' int)?
//! atom   := number | ident | ident '(' expr ')' | '(' expr ')'
//! int    := ['-'] digits | '(' ['-'] digits ')'
//! ```
//!
//! Exponents are restricted to integer constants, which keeps every
//! derivative total.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("unbound variable `{0}`")]
    Unbound(String),
}

impl ExprError {
    /// Byte offset for positioned (parse-level) errors.
    pub fn offset(&self) -> Option<usize> {
        match self {
            ExprError::Syntax { offset, .. } | ExprError::UnknownIdentifier { offset, .. } => {
                Some(*offset)
            }
            _ => None,
        }
    }
}

/// Ordered set of variable names; the position of a name is its slot index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VarSet {
    names: Vec<String>,
}

impl VarSet {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        VarSet {
            names: names.into_iter().map(Into::into).collect(),
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Ln,
    Exp,
    Sin,
    Cos,
    Sqrt,
}

impl UnaryOp {
    fn from_name(name: &str) -> Option<Self> {
        match name {
            "ln" => Some(UnaryOp::Ln),
            "exp" => Some(UnaryOp::Exp),
            "sin" => Some(UnaryOp::Sin),
            "cos" => Some(UnaryOp::Cos),
            "sqrt" => Some(UnaryOp::Sqrt),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "-",
            UnaryOp::Ln => "ln",
            UnaryOp::Exp => "exp",
            UnaryOp::Sin => "sin",
            UnaryOp::Cos => "cos",
            UnaryOp::Sqrt => "sqrt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

/// Immutable expression tree. Variables are slot indices into a [`VarSet`].
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
}

impl Expr {
    pub fn constant(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.constant() == Some(0.0)
    }

    /// True when the tree mentions slot `var`.
    pub fn depends_on(&self, var: usize) -> bool {
        match self {
            Expr::Const(_) => false,
            Expr::Var(i) => *i == var,
            Expr::Unary(_, a) | Expr::Pow(a, _) => a.depends_on(var),
            Expr::Binary(_, a, b) => a.depends_on(var) || b.depends_on(var),
        }
    }

    /// Evaluates with slot values in [`VarSet`] order.
    pub fn eval(&self, slots: &[f64]) -> Result<f64, ExprError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(i) => slots
                .get(*i)
                .copied()
                .ok_or_else(|| ExprError::Unbound(format!("slot {i}"))),
            Expr::Unary(op, a) => {
                let x = a.eval(slots)?;
                match op {
                    UnaryOp::Neg => Ok(-x),
                    UnaryOp::Ln => {
                        if x <= 0.0 {
                            Err(ExprError::Domain(format!("ln of non-positive value {x}")))
                        } else {
                            Ok(x.ln())
                        }
                    }
                    UnaryOp::Exp => Ok(x.exp()),
                    UnaryOp::Sin => Ok(x.sin()),
                    UnaryOp::Cos => Ok(x.cos()),
                    UnaryOp::Sqrt => {
                        if x < 0.0 {
                            Err(ExprError::Domain(format!("sqrt of negative value {x}")))
                        } else {
                            Ok(x.sqrt())
                        }
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                let x = a.eval(slots)?;
                let y = b.eval(slots)?;
                match op {
                    BinOp::Add => Ok(x + y),
                    BinOp::Sub => Ok(x - y),
                    BinOp::Mul => Ok(x * y),
                    BinOp::Div => {
                        if y == 0.0 {
                            Err(ExprError::Domain("division by zero".into()))
                        } else {
                            Ok(x / y)
                        }
                    }
                }
            }
            Expr::Pow(a, n) => {
                let x = a.eval(slots)?;
                if *n < 0 && x == 0.0 {
                    return Err(ExprError::Domain(format!("0 raised to negative power {n}")));
                }
                Ok(x.powi(*n))
            }
        }
    }

    /// Evaluates against named bindings; every variable the tree uses must be bound.
    pub fn eval_named(&self, vars: &VarSet, bindings: &HashMap<String, f64>) -> Result<f64, ExprError> {
        let mut slots = vec![f64::NAN; vars.len()];
        let mut bound = vec![false; vars.len()];
        for (name, value) in bindings {
            if let Some(i) = vars.index_of(name) {
                slots[i] = *value;
                bound[i] = true;
            }
        }
        for (i, is_bound) in bound.iter().enumerate() {
            if !is_bound && self.depends_on(i) {
                return Err(ExprError::Unbound(vars.name(i).to_string()));
            }
        }
        self.eval(&slots)
    }

    /// Symbolic partial derivative with respect to slot `var`.
    pub fn differentiate(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Unary(op, a) => {
                let da = a.differentiate(var);
                if da.is_zero() {
                    return Expr::Const(0.0);
                }
                let a = (**a).clone();
                match op {
                    UnaryOp::Neg => neg(da),
                    UnaryOp::Ln => div(da, a),
                    UnaryOp::Exp => mul(da, Expr::Unary(UnaryOp::Exp, Box::new(a))),
                    UnaryOp::Sin => mul(da, Expr::Unary(UnaryOp::Cos, Box::new(a))),
                    UnaryOp::Cos => neg(mul(da, Expr::Unary(UnaryOp::Sin, Box::new(a)))),
                    UnaryOp::Sqrt => div(
                        da,
                        mul(Expr::Const(2.0), Expr::Unary(UnaryOp::Sqrt, Box::new(a))),
                    ),
                }
            }
            Expr::Binary(op, a, b) => {
                let da = a.differentiate(var);
                let db = b.differentiate(var);
                let (a, b) = ((**a).clone(), (**b).clone());
                match op {
                    BinOp::Add => add(da, db),
                    BinOp::Sub => sub(da, db),
                    BinOp::Mul => add(mul(da, b), mul(a, db)),
                    // (a/b)' = a'/b - a b' / b^2
                    BinOp::Div => sub(div(da, b.clone()), div(mul(a, db), pow(b, 2))),
                }
            }
            Expr::Pow(a, n) => {
                let da = a.differentiate(var);
                if da.is_zero() || *n == 0 {
                    return Expr::Const(0.0);
                }
                let inner = pow((**a).clone(), n - 1);
                mul(mul(Expr::Const(*n as f64), inner), da)
            }
        }
    }

    /// Displays with variable names; the output parses back to a tree with
    /// identical values.
    pub fn display<'a>(&'a self, vars: &'a VarSet) -> ExprDisplay<'a> {
        ExprDisplay { expr: self, vars }
    }
}

// Constructors with light constant folding. Keeps derivative trees small
// enough for the inner integration loops; no simplification is promised.

fn add(a: Expr, b: Expr) -> Expr {
    match (a.constant(), b.constant()) {
        (Some(x), Some(y)) => Expr::Const(x + y),
        (Some(x), _) if x == 0.0 => b,
        (_, Some(y)) if y == 0.0 => a,
        _ => Expr::Binary(BinOp::Add, Box::new(a), Box::new(b)),
    }
}

fn sub(a: Expr, b: Expr) -> Expr {
    match (a.constant(), b.constant()) {
        (Some(x), Some(y)) => Expr::Const(x - y),
        (Some(x), _) if x == 0.0 => neg(b),
        (_, Some(y)) if y == 0.0 => a,
        _ => Expr::Binary(BinOp::Sub, Box::new(a), Box::new(b)),
    }
}

fn mul(a: Expr, b: Expr) -> Expr {
    match (a.constant(), b.constant()) {
        (Some(x), Some(y)) => Expr::Const(x * y),
        (Some(x), _) | (_, Some(x)) if x == 0.0 => Expr::Const(0.0),
        (Some(x), _) if x == 1.0 => b,
        (_, Some(y)) if y == 1.0 => a,
        _ => Expr::Binary(BinOp::Mul, Box::new(a), Box::new(b)),
    }
}

fn div(a: Expr, b: Expr) -> Expr {
    match (a.constant(), b.constant()) {
        (Some(x), _) if x == 0.0 => Expr::Const(0.0),
        (_, Some(y)) if y == 1.0 => a,
        _ => Expr::Binary(BinOp::Div, Box::new(a), Box::new(b)),
    }
}

fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(x) => Expr::Const(-x),
        Expr::Unary(UnaryOp::Neg, inner) => *inner,
        other => Expr::Unary(UnaryOp::Neg, Box::new(other)),
    }
}

fn pow(a: Expr, n: i32) -> Expr {
    match n {
        0 => Expr::Const(1.0),
        1 => a,
        _ => match a.constant() {
            Some(x) => Expr::Const(x.powi(n)),
            None => Expr::Pow(Box::new(a), n),
        },
    }
}

pub struct ExprDisplay<'a> {
    expr: &'a Expr,
    vars: &'a VarSet,
}

impl fmt::Display for ExprDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_expr(self.expr, self.vars, f)
    }
}

fn write_expr(e: &Expr, vars: &VarSet, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match e {
        Expr::Const(c) => {
            if *c < 0.0 {
                write!(f, "(-{})", -c)
            } else {
                write!(f, "{c}")
            }
        }
        Expr::Var(i) => write!(f, "{}", vars.name(*i)),
        Expr::Unary(UnaryOp::Neg, a) => {
            write!(f, "(-")?;
            write_expr(a, vars, f)?;
            write!(f, ")")
        }
        Expr::Unary(op, a) => {
            write!(f, "{}(", op.name())?;
            write_expr(a, vars, f)?;
            write!(f, ")")
        }
        Expr::Binary(op, a, b) => {
            write!(f, "(")?;
            write_expr(a, vars, f)?;
            write!(f, " {} ", op.symbol())?;
            write_expr(b, vars, f)?;
            write!(f, ")")
        }
        Expr::Pow(a, n) => {
            write!(f, "(")?;
            write_expr(a, vars, f)?;
            if *n < 0 {
                write!(f, ")^({n})")
            } else {
                write!(f, ")^{n}")
            }
        }
    }
}

/// Parses `text` against the declared variables.
pub fn parse(text: &str, vars: &VarSet) -> Result<Expr, ExprError> {
    let tokens = tokenize(text)?;
    let mut parser = Parser {
        tokens,
        pos: 0,
        vars,
        end: text.len(),
    };
    if parser.tokens.is_empty() {
        return Err(ExprError::Syntax {
            offset: 0,
            message: "empty expression".into(),
        });
    }
    let e = parser.expr()?;
    if let Some(tok) = parser.peek() {
        return Err(ExprError::Syntax {
            offset: tok.offset,
            message: format!("unexpected {}", tok.kind.describe()),
        });
    }
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
enum TokenKind {
    Number(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

impl TokenKind {
    fn describe(&self) -> String {
        match self {
            TokenKind::Number(x) => format!("number {x}"),
            TokenKind::Ident(s) => format!("identifier `{s}`"),
            TokenKind::Plus => "`+`".into(),
            TokenKind::Minus => "`-`".into(),
            TokenKind::Star => "`*`".into(),
            TokenKind::Slash => "`/`".into(),
            TokenKind::Caret => "`^`".into(),
            TokenKind::LParen => "`(`".into(),
            TokenKind::RParen => "`)`".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokenKind,
    offset: usize,
}

fn tokenize(text: &str) -> Result<Vec<Token>, ExprError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        let kind = match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'+' => TokenKind::Plus,
            b'-' => TokenKind::Minus,
            b'*' => TokenKind::Star,
            b'/' => TokenKind::Slash,
            b'^' => TokenKind::Caret,
            b'(' => TokenKind::LParen,
            b')' => TokenKind::RParen,
            b'0'..=b'9' | b'.' => {
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
                let value: f64 = lit.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    message: format!("malformed number `{lit}`"),
                })?;
                tokens.push(Token {
                    kind: TokenKind::Number(value),
                    offset: start,
                });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                tokens.push(Token {
                    kind: TokenKind::Ident(text[start..i].to_string()),
                    offset: start,
                });
                continue;
            }
            _ => {
                return Err(ExprError::Syntax {
                    offset: start,
                    message: format!("unexpected character `{}`", text[start..].chars().next().unwrap()),
                })
            }
        };
        tokens.push(Token { kind, offset: start });
        i += 1;
    }
    Ok(tokens)
}

struct Parser<'a> {
    tokens: Vec<Token>,
    pos: usize,
    vars: &'a VarSet,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.tokens.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn eat(&mut self, kind: &TokenKind) -> bool {
        if self.peek().map(|t| &t.kind) == Some(kind) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn offset_here(&self) -> usize {
        self.peek().map(|t| t.offset).unwrap_or(self.end)
    }

    fn error_here(&self, expected: &str) -> ExprError {
        let found = self
            .peek()
            .map(|t| t.kind.describe())
            .unwrap_or_else(|| "end of input".into());
        ExprError::Syntax {
            offset: self.offset_here(),
            message: format!("expected {expected}, found {found}"),
        }
    }

    fn expr(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek().map(|t| &t.kind) {
                Some(TokenKind::Plus) => BinOp::Add,
                Some(TokenKind::Minus) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn term(&mut self) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().map(|t| &t.kind) {
                Some(TokenKind::Star) => BinOp::Mul,
                Some(TokenKind::Slash) => BinOp::Div,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        if self.eat(&TokenKind::Minus) {
            let inner = self.unary()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ExprError> {
        let base = self.atom()?;
        if self.eat(&TokenKind::Caret) {
            let n = self.integer_exponent()?;
            return Ok(Expr::Pow(Box::new(base), n));
        }
        Ok(base)
    }

    fn integer_exponent(&mut self) -> Result<i32, ExprError> {
        let paren = self.eat(&TokenKind::LParen);
        let negative = self.eat(&TokenKind::Minus);
        let offset = self.offset_here();
        let value = match self.next() {
            Some(Token {
                kind: TokenKind::Number(x),
                ..
            }) => x,
            _ => {
                self.pos -= 1;
                return Err(self.error_here("integer exponent"));
            }
        };
        if value.fract() != 0.0 || value.abs() > i32::MAX as f64 {
            return Err(ExprError::Syntax {
                offset,
                message: format!("exponent must be a constant integer, found {value}"),
            });
        }
        if paren && !self.eat(&TokenKind::RParen) {
            return Err(self.error_here("`)`"));
        }
        let n = value as i32;
        Ok(if negative { -n } else { n })
    }

    fn atom(&mut self) -> Result<Expr, ExprError> {
        let Some(tok) = self.next() else {
            self.pos -= 1;
            return Err(self.error_here("operand"));
        };
        match tok.kind {
            TokenKind::Number(x) => Ok(Expr::Const(x)),
            TokenKind::LParen => {
                let e = self.expr()?;
                if !self.eat(&TokenKind::RParen) {
                    return Err(self.error_here("`)`"));
                }
                Ok(e)
            }
            TokenKind::Ident(name) => {
                if let Some(op) = UnaryOp::from_name(&name) {
                    if !self.eat(&TokenKind::LParen) {
                        return Err(self.error_here(&format!("`(` after `{name}`")));
                    }
                    let arg = self.expr()?;
                    if !self.eat(&TokenKind::RParen) {
                        return Err(self.error_here("`)`"));
                    }
                    return Ok(Expr::Unary(op, Box::new(arg)));
                }
                match self.vars.index_of(&name) {
                    Some(i) => Ok(Expr::Var(i)),
                    None => Err(ExprError::UnknownIdentifier {
                        name,
                        offset: tok.offset,
                    }),
                }
            }
            other => {
                self.pos -= 1;
                let _ = other;
                Err(self.error_here("operand"))
            }
        }
    }
}

/// Central finite difference of `e` in slot `var`; test oracle and the
/// third-order Christoffel path both use it.
pub fn central_difference(e: &Expr, var: usize, slots: &[f64], step: f64) -> Result<f64, ExprError> {
    let mut plus = slots.to_vec();
    let mut minus = slots.to_vec();
    plus[var] += step;
    minus[var] -= step;
    Ok((e.eval(&plus)? - e.eval(&minus)?) / (2.0 * step))
}
