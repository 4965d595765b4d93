//! User-defined systems from arithmetic expressions.
//!
//! Grammar: `+ - * / ^`, parentheses, numeric literals, state and parameter
//! names, the constant `pi` and the functions `sin cos exp sqrt log`.
//! `^` binds tighter than unary minus and is right associative.
//! Derivatives come from forward-mode dual numbers; nesting them gives the
//! Hessian of `h`.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::ControlAffineSystem;
use crate::error::{Error, Result};

/// On-disk description of a plugin system. `g` holds `n` rows of `m` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginSpec {
    pub name: String,
    pub states: Vec<String>,
    pub inputs: usize,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub f: Vec<String>,
    pub g: Vec<Vec<String>>,
    pub h: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Sqrt,
    Log,
}

#[derive(Debug, Clone, PartialEq)]
enum Expr {
    Num(f64),
    Var(usize),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Call(Func, Box<Expr>),
}

/// Arithmetic needed to evaluate an [`Expr`].
trait Scalar: Clone + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self> {
    fn cst(v: f64) -> Self;
    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn exp(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn ln(&self) -> Self;
    fn powi(&self, k: i32) -> Self;
    fn powf(&self, c: f64) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn powi(&self, k: i32) -> Self {
        f64::powi(*self, k)
    }
    fn powf(&self, c: f64) -> Self {
        f64::powf(*self, c)
    }
}

/// Single-direction dual number `v + d·ε`.
#[derive(Debug, Clone, PartialEq)]
struct Dual<T> {
    v: T,
    d: T,
}

impl<T: Scalar> Dual<T> {
    fn new(v: T, d: T) -> Self {
        Self { v, d }
    }
    /// Chain rule with the outer derivative evaluated at `v`.
    fn chain(&self, v: T, dv: T) -> Self {
        Self::new(v, dv * self.d.clone())
    }
}

impl<T: Scalar> Add for Dual<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.v + o.v, self.d + o.d)
    }
}

impl<T: Scalar> Sub for Dual<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.v - o.v, self.d - o.d)
    }
}

impl<T: Scalar> Mul for Dual<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let d = self.d * o.v.clone() + self.v.clone() * o.d;
        Self::new(self.v * o.v, d)
    }
}

impl<T: Scalar> Div for Dual<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v.clone();
        let d = (self.d - q.clone() * o.d) / o.v;
        Self::new(q, d)
    }
}

impl<T: Scalar> Neg for Dual<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.v, -self.d)
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn cst(v: f64) -> Self {
        Self::new(T::cst(v), T::cst(0.0))
    }
    fn sin(&self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(&self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e.clone(), e)
    }
    fn sqrt(&self) -> Self {
        let s = self.v.sqrt();
        self.chain(s.clone(), T::cst(0.5) / s)
    }
    fn ln(&self) -> Self {
        self.chain(self.v.ln(), T::cst(1.0) / self.v.clone())
    }
    fn powi(&self, k: i32) -> Self {
        if k == 0 {
            return Self::cst(1.0);
        }
        self.chain(self.v.powi(k), T::cst(k as f64) * self.v.powi(k - 1))
    }
    fn powf(&self, c: f64) -> Self {
        self.chain(self.v.powf(c), T::cst(c) * self.v.powf(c - 1.0))
    }
}

impl Expr {
    fn eval<T: Scalar>(&self, x: &[T]) -> T {
        match self {
            Expr::Num(v) => T::cst(*v),
            Expr::Var(i) => x[*i].clone(),
            Expr::Neg(a) => -a.eval(x),
            Expr::Add(a, b) => a.eval(x) + b.eval(x),
            Expr::Sub(a, b) => a.eval(x) - b.eval(x),
            Expr::Mul(a, b) => a.eval(x) * b.eval(x),
            Expr::Div(a, b) => a.eval(x) / b.eval(x),
            Expr::Pow(a, b) => {
                let base = a.eval(x);
                match **b {
                    Expr::Num(c) if c.fract() == 0.0 && c.abs() <= i32::MAX as f64 => base.powi(c as i32),
                    Expr::Num(c) => base.powf(c),
                    _ => (b.eval(x) * base.ln()).exp(),
                }
            }
            Expr::Call(f, a) => {
                let v = a.eval(x);
                match f {
                    Func::Sin => v.sin(),
                    Func::Cos => v.cos(),
                    Func::Exp => v.exp(),
                    Func::Sqrt => v.sqrt(),
                    Func::Log => v.ln(),
                }
            }
        }
    }

    /// Folds constant subtrees so exponents like `2*1` become literals.
    fn fold(self) -> Expr {
        let bin = |a: Box<Expr>, b: Box<Expr>, ctor: fn(Box<Expr>, Box<Expr>) -> Expr, op: fn(f64, f64) -> f64| {
            let (a, b) = (a.fold(), b.fold());
            match (&a, &b) {
                (Expr::Num(x), Expr::Num(y)) => Expr::Num(op(*x, *y)),
                _ => ctor(Box::new(a), Box::new(b)),
            }
        };
        match self {
            Expr::Neg(a) => match a.fold() {
                Expr::Num(v) => Expr::Num(-v),
                other => Expr::Neg(Box::new(other)),
            },
            Expr::Add(a, b) => bin(a, b, Expr::Add, |x, y| x + y),
            Expr::Sub(a, b) => bin(a, b, Expr::Sub, |x, y| x - y),
            Expr::Mul(a, b) => bin(a, b, Expr::Mul, |x, y| x * y),
            Expr::Div(a, b) => bin(a, b, Expr::Div, |x, y| x / y),
            Expr::Pow(a, b) => bin(a, b, Expr::Pow, f64::powf),
            Expr::Call(f, a) => Expr::Call(f, Box::new(a.fold())),
            leaf => leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Token)>> {
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
            let v = text
                .parse::<f64>()
                .map_err(|_| Error::Expression(format!("bad number '{text}' at {start}")))?;
            out.push((start, Token::Num(v)));
        } else if c.is_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((start, Token::Ident(chars[start..i].iter().collect())));
        } else if "+-*/^(),".contains(c) {
            out.push((i, Token::Op(c)));
            i += 1;
        } else {
            return Err(Error::Expression(format!("unexpected character '{c}' at {i}")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    states: &'a [String],
    params: &'a BTreeMap<String, f64>,
    src: &'a str,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn err(&self, msg: &str) -> Error {
        let at = self.tokens.get(self.pos).map_or(self.src.len(), |(p, _)| *p);
        Error::Expression(format!("{msg} at {at} in '{}'", self.src))
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Token::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.product()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.product()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            Ok(Expr::Neg(Box::new(self.unary()?)))
        } else if self.eat('+') {
            self.unary()
        } else {
            self.power()
        }
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            Ok(Expr::Pow(Box::new(base), Box::new(exp)))
        } else {
            Ok(base)
        }
    }

    fn atom(&mut self) -> Result<Expr> {
        let tok = self.peek().cloned().ok_or_else(|| self.err("unexpected end of expression"))?;
        match tok {
            Token::Num(v) => {
                self.pos += 1;
                Ok(Expr::Num(v))
            }
            Token::Op('(') => {
                self.pos += 1;
                let inner = self.sum()?;
                if !self.eat(')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(inner)
            }
            Token::Ident(name) => {
                self.pos += 1;
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "sqrt" => Some(Func::Sqrt),
                    "log" => Some(Func::Log),
                    _ => None,
                };
                if let Some(func) = func {
                    if !self.eat('(') {
                        return Err(self.err(&format!("expected '(' after {name}")));
                    }
                    let arg = self.sum()?;
                    if !self.eat(')') {
                        return Err(self.err("expected ')'"));
                    }
                    return Ok(Expr::Call(func, Box::new(arg)));
                }
                if let Some(i) = self.states.iter().position(|s| *s == name) {
                    return Ok(Expr::Var(i));
                }
                if let Some(v) = self.params.get(&name) {
                    return Ok(Expr::Num(*v));
                }
                if name == "pi" {
                    return Ok(Expr::Num(std::f64::consts::PI));
                }
                self.pos -= 1;
                Err(self.err(&format!("unknown identifier '{name}'")))
            }
            Token::Op(c) => Err(self.err(&format!("unexpected '{c}'"))),
        }
    }
}

fn parse(src: &str, states: &[String], params: &BTreeMap<String, f64>) -> Result<Expr> {
    let mut p = Parser {
        tokens: tokenize(src)?,
        pos: 0,
        states,
        params,
        src,
    };
    let e = p.sum()?;
    if p.pos != p.tokens.len() {
        return Err(p.err("trailing input"));
    }
    Ok(e.fold())
}

/// A control-affine system defined by parsed expressions.
#[derive(Clone)]
pub struct ExprSystem {
    name: String,
    n: usize,
    m: usize,
    f: Vec<Expr>,
    /// Row-major `n × m`.
    g: Vec<Expr>,
    h: Expr,
}

impl fmt::Debug for ExprSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExprSystem").field("name", &self.name).field("n", &self.n).field("m", &self.m).finish()
    }
}

/// Tolerance for the equilibrium and penalty checks at the origin.
const ORIGIN_TOL: f64 = 1e-12;

impl ExprSystem {
    pub fn from_spec(spec: &PluginSpec) -> Result<Self> {
        let n = spec.states.len();
        let m = spec.inputs;
        if n == 0 {
            return Err(Error::Dimension("plugin needs at least one state".into()));
        }
        if spec.f.len() != n {
            return Err(Error::Dimension(format!("f has {} components, expected {n}", spec.f.len())));
        }
        if spec.g.len() != n || spec.g.iter().any(|row| row.len() != m) {
            return Err(Error::Dimension(format!("g must be {n} rows of {m} entries")));
        }
        for (i, s) in spec.states.iter().enumerate() {
            if spec.states[..i].contains(s) || spec.params.contains_key(s) {
                return Err(Error::Expression(format!("duplicate name '{s}'")));
            }
        }
        let parse_one = |src: &str| parse(src, &spec.states, &spec.params);
        let f = spec.f.iter().map(|s| parse_one(s)).collect::<Result<Vec<_>>>()?;
        let g = spec.g.iter().flatten().map(|s| parse_one(s)).collect::<Result<Vec<_>>>()?;
        let h = parse_one(&spec.h)?;
        let sys = Self {
            name: spec.name.clone(),
            n,
            m,
            f,
            g,
            h,
        };
        sys.check_origin()?;
        Ok(sys)
    }

    /// `f = Ax`, `g = B`, `h = ½|Cx|²`.
    pub fn linear(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n || b.nrows() != n || c.ncols() != n {
            return Err(Error::Dimension("linear system blocks are inconsistent".into()));
        }
        let combo = |row: Vec<f64>| {
            row.into_iter().enumerate().fold(Expr::Num(0.0), |acc, (j, v)| {
                Expr::Add(Box::new(acc), Box::new(Expr::Mul(Box::new(Expr::Num(v)), Box::new(Expr::Var(j)))))
            })
        };
        let f = (0..n).map(|i| combo(a.row(i).iter().copied().collect())).collect();
        let g = (0..n).flat_map(|i| (0..b.ncols()).map(move |j| Expr::Num(b[(i, j)]))).collect();
        let h = (0..c.nrows()).fold(Expr::Num(0.0), |acc, k| {
            let y = combo(c.row(k).iter().copied().collect());
            let sq = Expr::Mul(Box::new(Expr::Num(0.5)), Box::new(Expr::Pow(Box::new(y), Box::new(Expr::Num(2.0)))));
            Expr::Add(Box::new(acc), Box::new(sq))
        });
        Ok(Self {
            name: "linear".into(),
            n,
            m: b.ncols(),
            f,
            g,
            h,
        })
    }

    fn check_origin(&self) -> Result<()> {
        let zero = DVector::zeros(self.n);
        let f0 = self.f(&zero);
        if !(f0.amax() <= ORIGIN_TOL) {
            return Err(Error::Expression(format!("f(0) must vanish, got |f(0)| = {:e}", f0.amax())));
        }
        let h0 = self.h(&zero);
        if !(h0.abs() <= ORIGIN_TOL) {
            return Err(Error::Expression(format!("h(0) must vanish, got {h0:e}")));
        }
        let dh0 = self.dh(&zero);
        if !(dh0.amax() <= ORIGIN_TOL) {
            return Err(Error::Expression("Dh(0) must vanish".into()));
        }
        Ok(())
    }

    fn seeded(x: &DVector<f64>, j: usize) -> Vec<Dual<f64>> {
        x.iter().enumerate().map(|(i, &v)| Dual::new(v, if i == j { 1.0 } else { 0.0 })).collect()
    }

    fn jacobian_of(&self, exprs: &[&Expr], x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(exprs.len(), self.n);
        for j in 0..self.n {
            let xs = Self::seeded(x, j);
            for (i, e) in exprs.iter().enumerate() {
                jac[(i, j)] = e.eval(&xs).d;
            }
        }
        jac
    }
}

impl ControlAffineSystem for ExprSystem {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.n, self.f.iter().map(|e| e.eval(x.as_slice())))
    }
    fn df(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let exprs: Vec<&Expr> = self.f.iter().collect();
        self.jacobian_of(&exprs, x)
    }
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n, self.m, self.g.iter().map(|e| e.eval(x.as_slice())))
    }
    fn dg(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        (0..self.m)
            .map(|k| {
                let col: Vec<&Expr> = (0..self.n).map(|i| &self.g[i * self.m + k]).collect();
                self.jacobian_of(&col, x)
            })
            .collect()
    }
    fn h(&self, x: &DVector<f64>) -> f64 {
        self.h.eval(x.as_slice())
    }
    fn dh(&self, x: &DVector<f64>) -> DVector<f64> {
        self.jacobian_of(&[&self.h], x).row(0).transpose()
    }
    fn d2h0(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut hess = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let xs: Vec<Dual<Dual<f64>>> = (0..n)
                    .map(|k| {
                        let inner = Dual::new(0.0, if k == j { 1.0 } else { 0.0 });
                        let outer = Dual::new(if k == i { 1.0 } else { 0.0 }, 0.0);
                        Dual::new(inner, outer)
                    })
                    .collect();
                let v = self.h.eval(&xs).d.d;
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        hess
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{derivative_defect, example_system, ExampleParams};

    fn spec(f: &[&str], g: &[&[&str]], h: &str) -> PluginSpec {
        PluginSpec {
            name: "t".into(),
            states: (1..=f.len()).map(|i| format!("x{i}")).collect(),
            inputs: g[0].len(),
            params: BTreeMap::from([("a".to_string(), 2.0)]),
            f: f.iter().map(|s| s.to_string()).collect(),
            g: g.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
            h: h.into(),
        }
    }

    fn eval(src: &str, x: &[f64]) -> f64 {
        let states: Vec<String> = (1..=x.len()).map(|i| format!("x{i}")).collect();
        parse(src, &states, &BTreeMap::new()).unwrap().eval(x)
    }

    #[test]
    fn precedence() {
        assert_eq!(eval("1 + 2 * 3", &[]), 7.0);
        assert_eq!(eval("-2^2", &[]), -4.0);
        assert_eq!(eval("2^3^2", &[]), 512.0);
        assert_eq!(eval("(1 + 2) * 3 - 4 / 2", &[]), 7.0);
        assert_eq!(eval("x1^2 - x2", &[3.0, 1.0]), 8.0);
        assert!((eval("cos(pi) + exp(0) + sqrt(4) + 1.5e1", &[]) - 17.0).abs() < 1e-15);
        assert_eq!(eval("(-2)^3", &[]), -8.0);
    }

    #[test]
    fn parse_errors_are_located() {
        let states = vec!["x".to_string()];
        let params = BTreeMap::new();
        for bad in ["x +", "foo(x)", "y", "(x", "x $ 2", "x x"] {
            assert!(matches!(parse(bad, &states, &params), Err(Error::Expression(_))), "{bad}");
        }
    }

    #[test]
    fn matches_hand_coded_scalar() {
        let sys = ExprSystem::from_spec(&spec(&["-x1 + x1^2"], &[&["1"]], "0")).unwrap();
        let reference = example_system("scalar", &ExampleParams::default()).unwrap();
        for x in [-1.3, 0.0, 0.5, 2.0] {
            let x = DVector::from_element(1, x);
            assert_eq!(sys.f(&x), reference.f(&x));
            assert_eq!(sys.df(&x), reference.df(&x));
        }
    }

    #[test]
    fn dual_derivatives_match_differences() {
        let sys = ExprSystem::from_spec(&spec(
            &["x2", "-a*sin(x1) + x1*x2^2", "exp(x1*x3) - 1"],
            &[&["0", "1"], &["cos(x2)", "0"], &["1 + x1^2", "x3/(2 + x2^2)"]],
            "x1^2/2 + (x2 - x3)^2 + x3^4",
        ))
        .unwrap();
        for x in [[0.1, -0.4, 0.3], [1.0, 0.5, -0.7], [-0.2, 1.1, 0.9]] {
            assert!(derivative_defect(&sys, &DVector::from_row_slice(&x)) < 1e-6);
        }
        let hess = sys.d2h0();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.0, 2.0, -2.0, 0.0, -2.0, 2.0]);
        assert!((hess - expected).norm() < 1e-14);
    }

    #[test]
    fn origin_checks() {
        assert!(ExprSystem::from_spec(&spec(&["x1 + 1"], &[&["1"]], "x1^2")).is_err());
        assert!(ExprSystem::from_spec(&spec(&["x1"], &[&["1"]], "x1")).is_err());
        assert!(ExprSystem::from_spec(&spec(&["x1"], &[&["1"]], "1 + x1^2")).is_err());
        assert!(matches!(
            ExprSystem::from_spec(&spec(&["x1", "x2"], &[&["1"]], "0")),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec(&["x2", "-x1"], &[&["0"], &["1"]], "x1^2");
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<PluginSpec>(&text).unwrap(), s);
        assert!(serde_json::from_str::<PluginSpec>(r#"{"name":"x","bogus":1}"#).is_err());
    }
}
