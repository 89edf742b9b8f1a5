//! Scalar field expressions over named variables.
//!
//! Coefficient fields (diffusion entries, drift components, zero-order term,
//! star-shaped boundary radii) are given as strings like `4*exp(-(x^2+y^2))`
//! and compiled here into a small evaluation tree. The grammar supports
//! numeric literals, variables, `+ - * / ^`, unary minus, parentheses, and
//! the calls `sin cos exp log sqrt abs` (one argument) and `min max` (two).
//!
//! Precedence, loosest to tightest: `+ -`, then `* /`, then unary minus,
//! then `^`. All binary operators associate to the left, `^` included, so
//! `2^3^2 = (2^3)^2 = 64` and `-x^2 = -(x^2)`.

use std::fmt;

/// Parse failure with the byte offset into the source string.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { name: String, offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func1 {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
}

impl Func1 {
    fn name(self) -> &'static str {
        match self {
            Func1::Sin => "sin",
            Func1::Cos => "cos",
            Func1::Exp => "exp",
            Func1::Log => "log",
            Func1::Sqrt => "sqrt",
            Func1::Abs => "abs",
        }
    }

    fn apply(self, v: f64) -> f64 {
        match self {
            Func1::Sin => v.sin(),
            Func1::Cos => v.cos(),
            Func1::Exp => v.exp(),
            Func1::Log => v.ln(),
            Func1::Sqrt => v.sqrt(),
            Func1::Abs => v.abs(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Func2 {
    Min,
    Max,
}

impl Func2 {
    fn name(self) -> &'static str {
        match self {
            Func2::Min => "min",
            Func2::Max => "max",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Func2::Min => a.min(b),
            Func2::Max => a.max(b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    Var(usize),
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call1(Func1, Box<Node>),
    Call2(Func2, Box<Node>, Box<Node>),
}

/// A compiled scalar field. Evaluation is a plain tree walk; these trees are
/// tiny and every hot path caches node values on a grid before iterating.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldExpr {
    source: String,
    vars: Vec<String>,
    root: Node,
}

/// Parses `src` as a field over the plane variables `x`, `y`.
pub fn parse_field(src: &str) -> Result<FieldExpr, ParseError> {
    parse_with_vars(src, &["x", "y"])
}

/// Parses `src` over an explicit variable table (e.g. `["phi"]` for boundary
/// radius functions).
pub fn parse_with_vars(src: &str, vars: &[&str]) -> Result<FieldExpr, ParseError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
        vars,
    };
    p.skip_ws();
    let root = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(FieldExpr {
        source: src.to_string(),
        vars: vars.iter().map(|s| s.to_string()).collect(),
        root,
    })
}

impl FieldExpr {
    /// The original source text.
    pub fn source(&self) -> &str {
        &self.source
    }

    /// Evaluates at a point given in the expression's variable order.
    /// Invalid operations (log of a negative, 0/0, ...) propagate as NaN/inf;
    /// problem construction rejects fields that are not finite on the domain.
    pub fn eval(&self, args: &[f64]) -> f64 {
        debug_assert_eq!(args.len(), self.vars.len());
        eval_node(&self.root, args)
    }

    /// Convenience for two-variable fields.
    pub fn eval2(&self, x: f64, y: f64) -> f64 {
        self.eval(&[x, y])
    }

    /// Central-difference gradient with per-coordinate step
    /// `h_d = 1e-5 * (1 + |x_d|)`.
    pub fn eval_grad(&self, args: &[f64]) -> Vec<f64> {
        let mut work = args.to_vec();
        let mut grad = vec![0.0; args.len()];
        for d in 0..args.len() {
            let h = 1e-5 * (1.0 + args[d].abs());
            work[d] = args[d] + h;
            let fp = self.eval(&work);
            work[d] = args[d] - h;
            let fm = self.eval(&work);
            work[d] = args[d];
            grad[d] = (fp - fm) / (2.0 * h);
        }
        grad
    }

    /// A constant field over the given variables.
    pub fn constant(value: f64, vars: &[&str]) -> FieldExpr {
        FieldExpr {
            source: format!("{value}"),
            vars: vars.iter().map(|s| s.to_string()).collect(),
            root: Node::Num(value),
        }
    }

    /// Returns `self + kappa` as a new field (used by the shift-invariance
    /// checks, which re-run a whole problem with `c + kappa`).
    pub fn add_constant(&self, kappa: f64) -> FieldExpr {
        FieldExpr {
            source: format!("({}) + {}", self.source, kappa),
            vars: self.vars.clone(),
            root: Node::Add(Box::new(self.root.clone()), Box::new(Node::Num(kappa))),
        }
    }

    /// Fully parenthesized rendering; `parse(pretty())` evaluates identically.
    pub fn pretty(&self) -> String {
        let mut s = String::new();
        pretty_node(&self.root, &self.vars, &mut s);
        s
    }
}

impl fmt::Display for FieldExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source)
    }
}

fn eval_node(node: &Node, args: &[f64]) -> f64 {
    match node {
        Node::Num(v) => *v,
        Node::Var(i) => args[*i],
        Node::Neg(a) => -eval_node(a, args),
        Node::Add(a, b) => eval_node(a, args) + eval_node(b, args),
        Node::Sub(a, b) => eval_node(a, args) - eval_node(b, args),
        Node::Mul(a, b) => eval_node(a, args) * eval_node(b, args),
        Node::Div(a, b) => eval_node(a, args) / eval_node(b, args),
        Node::Pow(a, b) => {
            let base = eval_node(a, args);
            let exp = eval_node(b, args);
            // Integer exponents use powi so that negative bases stay exact
            // (x^2 on x < 0 must not go through exp/ln).
            if exp.fract() == 0.0 && exp.abs() <= 64.0 {
                base.powi(exp as i32)
            } else {
                base.powf(exp)
            }
        }
        Node::Call1(f, a) => f.apply(eval_node(a, args)),
        Node::Call2(f, a, b) => f.apply(eval_node(a, args), eval_node(b, args)),
    }
}

fn pretty_node(node: &Node, vars: &[String], out: &mut String) {
    match node {
        Node::Num(v) => {
            // Exact round trip: shortest representation that reparses to the
            // same f64 (Rust's float Display guarantees this).
            out.push_str(&format!("{v}"));
        }
        Node::Var(i) => out.push_str(&vars[*i]),
        Node::Neg(a) => {
            out.push_str("(-");
            pretty_node(a, vars, out);
            out.push(')');
        }
        Node::Add(a, b) => pretty_bin(a, " + ", b, vars, out),
        Node::Sub(a, b) => pretty_bin(a, " - ", b, vars, out),
        Node::Mul(a, b) => pretty_bin(a, " * ", b, vars, out),
        Node::Div(a, b) => pretty_bin(a, " / ", b, vars, out),
        Node::Pow(a, b) => pretty_bin(a, " ^ ", b, vars, out),
        Node::Call1(f, a) => {
            out.push_str(f.name());
            out.push('(');
            pretty_node(a, vars, out);
            out.push(')');
        }
        Node::Call2(f, a, b) => {
            out.push_str(f.name());
            out.push('(');
            pretty_node(a, vars, out);
            out.push_str(", ");
            pretty_node(b, vars, out);
            out.push(')');
        }
    }
}

fn pretty_bin(a: &Node, op: &str, b: &Node, vars: &[String], out: &mut String) {
    out.push('(');
    pretty_node(a, vars, out);
    out.push_str(op);
    pretty_node(b, vars, out);
    out.push(')');
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a [&'a str],
}

impl<'a> Parser<'a> {
    fn err(&self, message: &str) -> ParseError {
        ParseError::Syntax {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
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

    // expr := term (('+' | '-') term)*
    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        loop {
            self.skip_ws();
            if self.eat(b'+') {
                let rhs = self.term()?;
                lhs = Node::Add(Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                lhs = Node::Sub(Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    // term := factor (('*' | '/') factor)*
    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            self.skip_ws();
            if self.eat(b'*') {
                let rhs = self.factor()?;
                lhs = Node::Mul(Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'/') {
                let rhs = self.factor()?;
                lhs = Node::Div(Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    // factor := '-' factor | power    (unary minus binds looser than '^')
    fn factor(&mut self) -> Result<Node, ParseError> {
        self.skip_ws();
        if self.eat(b'-') {
            let inner = self.factor()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.power()
    }

    // power := atom ('^' exponent)*, left-associative
    fn power(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.atom()?;
        loop {
            self.skip_ws();
            if self.eat(b'^') {
                let rhs = self.exponent()?;
                lhs = Node::Pow(Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    // exponent := '-'* atom            (allows x^-2)
    fn exponent(&mut self) -> Result<Node, ParseError> {
        self.skip_ws();
        if self.eat(b'-') {
            let inner = self.exponent()?;
            return Ok(Node::Neg(Box::new(inner)));
        }
        self.atom()
    }

    fn atom(&mut self) -> Result<Node, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                self.skip_ws();
                if !self.eat(b')') {
                    return Err(self.err("expected `)`"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.ident(),
            Some(_) => Err(self.err("expected a number, identifier, or `(`")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn number(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.eat(b'.') {
            while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                self.pos += 1;
            }
        }
        if self.peek() == Some(b'e') || self.peek() == Some(b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.peek() == Some(b'+') || self.peek() == Some(b'-') {
                self.pos += 1;
            }
            if self.peek().is_some_and(|c| c.is_ascii_digit()) {
                while self.peek().is_some_and(|c| c.is_ascii_digit()) {
                    self.pos += 1;
                }
            } else {
                // `2e` with no digits: the `e` was not an exponent marker.
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii slice");
        match text.parse::<f64>() {
            Ok(v) => Ok(Node::Num(v)),
            Err(_) => Err(ParseError::Syntax {
                offset: start,
                message: format!("invalid numeric literal `{text}`"),
            }),
        }
    }

    fn ident(&mut self) -> Result<Node, ParseError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_alphanumeric() || c == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos])
            .expect("ascii slice")
            .to_string();
        self.skip_ws();
        if self.peek() == Some(b'(') {
            self.pos += 1;
            let f1 = match name.as_str() {
                "sin" => Some(Func1::Sin),
                "cos" => Some(Func1::Cos),
                "exp" => Some(Func1::Exp),
                "log" => Some(Func1::Log),
                "sqrt" => Some(Func1::Sqrt),
                "abs" => Some(Func1::Abs),
                _ => None,
            };
            let f2 = match name.as_str() {
                "min" => Some(Func2::Min),
                "max" => Some(Func2::Max),
                _ => None,
            };
            if f1.is_none() && f2.is_none() {
                return Err(ParseError::UnknownIdentifier {
                    name,
                    offset: start,
                });
            }
            let first = self.expr()?;
            self.skip_ws();
            if let Some(f) = f1 {
                if !self.eat(b')') {
                    return Err(self.err("expected `)` after one-argument call"));
                }
                return Ok(Node::Call1(f, Box::new(first)));
            }
            let f = f2.expect("two-argument function");
            if !self.eat(b',') {
                return Err(self.err("expected `,` in two-argument call"));
            }
            let second = self.expr()?;
            self.skip_ws();
            if !self.eat(b')') {
                return Err(self.err("expected `)` after two-argument call"));
            }
            return Ok(Node::Call2(f, Box::new(first), Box::new(second)));
        }
        match self.vars.iter().position(|v| *v == name) {
            Some(i) => Ok(Node::Var(i)),
            None => Err(ParseError::UnknownIdentifier {
                name,
                offset: start,
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn ev(src: &str, x: f64, y: f64) -> f64 {
        parse_field(src).expect("parse").eval2(x, y)
    }

    #[test]
    fn precedence_mirrors_the_pinned_table() {
        // 2 + 3*x^2 at x = 2 -> 14: ^ over *, * over +.
        assert_eq!(ev("2 + 3*x^2", 2.0, 0.0), 14.0);
        // Unary minus binds looser than ^.
        assert_eq!(ev("-x^2", 3.0, 0.0), -9.0);
        // Left association of every binary operator, ^ included.
        assert_eq!(ev("2^3^2", 0.0, 0.0), 64.0);
        assert_eq!(ev("8/4/2", 0.0, 0.0), 1.0);
        assert_eq!(ev("1 - 2 - 3", 0.0, 0.0), -4.0);
    }

    #[test]
    fn calls_and_literals() {
        let v = ev("exp(-(x^2+y^2))", 1.0, 0.0);
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(ev("min(x, y) + max(x, y)", 2.0, 5.0), 7.0);
        assert_eq!(ev("abs(-3.5)", 0.0, 0.0), 3.5);
        assert_eq!(ev("1.5e2 + 2E-2", 0.0, 0.0), 150.02);
        assert!((ev("sqrt(x)", 2.0, 0.0) - 2.0f64.sqrt()).abs() < 1e-15);
        assert!((ev("log(exp(x))", 0.7, 0.0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn errors_carry_byte_offsets() {
        match parse_field("1 + foo") {
            Err(ParseError::UnknownIdentifier { name, offset }) => {
                assert_eq!(name, "foo");
                assert_eq!(offset, 4);
            }
            other => panic!("expected unknown identifier, got {other:?}"),
        }
        match parse_field("1 + ") {
            Err(ParseError::Syntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected syntax error, got {other:?}"),
        }
        assert!(parse_field("min(x)").is_err());
        assert!(parse_field("sin(x, y)").is_err());
        assert!(parse_field("(x").is_err());
        assert!(parse_field("x )").is_err());
    }

    #[test]
    fn gradient_matches_closed_forms() {
        let f = parse_field("x^2").unwrap();
        let g = f.eval_grad(&[1.0, 0.0]);
        assert!((g[0] - 2.0).abs() <= 1e-7, "d/dx x^2 at 1: {}", g[0]);
        assert!(g[1].abs() <= 1e-7);

        let f = parse_field("x*y").unwrap();
        let g = f.eval_grad(&[3.0, -2.0]);
        assert!((g[0] + 2.0).abs() <= 1e-7);
        assert!((g[1] - 3.0).abs() <= 1e-7);

        let f = parse_field("sin(x)").unwrap();
        let g = f.eval_grad(&[0.3, 0.0]);
        assert!((g[0] - 0.3f64.cos()).abs() <= 1e-7);

        let f = parse_field("7").unwrap();
        let g = f.eval_grad(&[0.3, 11.0]);
        assert!(g[0].abs() <= 1e-12 && g[1].abs() <= 1e-12);
    }

    #[test]
    fn pretty_round_trips_on_random_points() {
        let sources = [
            "2 + 3*x^2 - y/4",
            "exp(-(x^2+y^2))",
            "min(x, max(y, 0.25)) * sqrt(abs(x) + 1)",
            "-x^2 + x^-2",
            "(1 - (x^2 + y^2)) * x - y",
        ];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for src in sources {
            let f = parse_field(src).unwrap();
            let g = parse_field(&f.pretty()).unwrap();
            for _ in 0..100 {
                let x = rng.gen_range(0.1..2.0);
                let y = rng.gen_range(-2.0..2.0);
                let a = f.eval2(x, y);
                let b = g.eval2(x, y);
                assert!(
                    (a - b).abs() <= 1e-12 * (1.0 + a.abs()),
                    "{src}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn custom_variable_tables() {
        let r = parse_with_vars("1 + 0.2*cos(3*phi)", &["phi"]).unwrap();
        let v = r.eval(&[std::f64::consts::PI]);
        assert!((v - (1.0 + 0.2 * (3.0 * std::f64::consts::PI).cos())).abs() < 1e-15);
        assert!(matches!(
            parse_with_vars("x + 1", &["phi"]),
            Err(ParseError::UnknownIdentifier { .. })
        ));
    }
}
