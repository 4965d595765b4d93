//! The worked example systems, with hand-derived Jacobians.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cascade::{Cascade, CascadeSystem};
use super::{ControlAffineSystem, QuadraticPenalty, SystemRef};
use crate::error::{Error, Result};

pub const EXAMPLE_NAMES: [&str; 5] = ["scalar", "generator", "pendulum", "zero_dynamics", "backstepping"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub delta: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        Self {
            a: 1.0,
            b: 0.5,
            c: 1.0,
            d: 0.5,
            delta: std::f64::consts::FRAC_PI_4,
        }
    }
}

/// Tunable parameters of the built-in examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExampleParams {
    /// Weight in the pendulum penalty `ε(x₁² + x₂²)`.
    pub pendulum_eps: f64,
    pub generator: GeneratorParams,
    /// Hessian `Q` of the generator penalty `½ xᵀQx`; identity when unset.
    pub generator_q: Option<Vec<Vec<f64>>>,
}

impl Default for ExampleParams {
    fn default() -> Self {
        Self {
            pendulum_eps: 0.1,
            generator: GeneratorParams::default(),
            generator_q: None,
        }
    }
}

pub fn example_system(name: &str, params: &ExampleParams) -> Result<SystemRef> {
    Ok(match name {
        "scalar" => Arc::new(ScalarExample),
        "generator" => {
            let q = match &params.generator_q {
                None => DMatrix::identity(3, 3),
                Some(rows) => {
                    if rows.len() != 3 || rows.iter().any(|r| r.len() != 3) {
                        return Err(Error::Dimension("generator_q must be 3x3".into()));
                    }
                    DMatrix::from_fn(3, 3, |i, j| rows[i][j])
                }
            };
            Arc::new(Generator::new(params.generator, QuadraticPenalty::new(q)))
        }
        "pendulum" => Arc::new(Pendulum::new(params.pendulum_eps)),
        "zero_dynamics" => Arc::new(ZeroDynamics),
        "backstepping" => Arc::new(BacksteppingExample::system()),
        other => return Err(Error::UnknownExample(other.to_string())),
    })
}

fn v1(x: f64) -> DVector<f64> {
    DVector::from_element(1, x)
}

fn m1(x: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, x)
}

/// `ẋ = −x + x² + u` with `h = 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScalarExample;

impl ControlAffineSystem for ScalarExample {
    fn name(&self) -> String {
        "scalar".into()
    }
    fn n(&self) -> usize {
        1
    }
    fn m(&self) -> usize {
        1
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        v1(-x[0] + x[0] * x[0])
    }
    fn df(&self, x: &DVector<f64>) -> DMatrix<f64> {
        m1(-1.0 + 2.0 * x[0])
    }
    fn g(&self, _: &DVector<f64>) -> DMatrix<f64> {
        m1(1.0)
    }
    fn dg(&self, _: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![m1(0.0)]
    }
    fn h(&self, _: &DVector<f64>) -> f64 {
        0.0
    }
    fn dh(&self, _: &DVector<f64>) -> DVector<f64> {
        v1(0.0)
    }
    fn d2h0(&self) -> DMatrix<f64> {
        m1(0.0)
    }
}

/// Synchronous generator on an infinite bus.
#[derive(Debug, Clone)]
pub struct Generator {
    pub params: GeneratorParams,
    pub penalty: QuadraticPenalty,
}

impl Generator {
    pub fn new(params: GeneratorParams, penalty: QuadraticPenalty) -> Self {
        Self { params, penalty }
    }
}

impl ControlAffineSystem for Generator {
    fn name(&self) -> String {
        "generator".into()
    }
    fn n(&self) -> usize {
        3
    }
    fn m(&self) -> usize {
        1
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let GeneratorParams { a, b, c, d, delta } = self.params;
        DVector::from_vec(vec![
            x[1],
            -a * ((1.0 + x[2]) * (x[0] + delta).sin() - delta.sin()) - b * x[1],
            -c * x[2] + d * ((x[0] + delta).cos() - delta.cos()),
        ])
    }
    fn df(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let GeneratorParams { a, b, c, d, delta } = self.params;
        let (s, co) = (x[0] + delta).sin_cos();
        DMatrix::from_row_slice(
            3,
            3,
            &[
                0.0, 1.0, 0.0,
                -a * (1.0 + x[2]) * co, -b, -a * s,
                -d * s, 0.0, -c,
            ],
        )
    }
    fn g(&self, _: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0])
    }
    fn dg(&self, _: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(3, 3)]
    }
    fn h(&self, x: &DVector<f64>) -> f64 {
        self.penalty.value(x)
    }
    fn dh(&self, x: &DVector<f64>) -> DVector<f64> {
        self.penalty.gradient(x)
    }
    fn d2h0(&self) -> DMatrix<f64> {
        self.penalty.q.clone()
    }
}

/// Inverted pendulum on a cart with the cart position dropped; `x₁` is the
/// angle from the upright position.
#[derive(Debug, Clone)]
pub struct Pendulum {
    pub eps: f64,
}

impl Pendulum {
    pub fn new(eps: f64) -> Self {
        Self { eps }
    }
}

impl ControlAffineSystem for Pendulum {
    fn name(&self) -> String {
        "pendulum".into()
    }
    fn n(&self) -> usize {
        2
    }
    fn m(&self) -> usize {
        1
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let (s, c) = x[0].sin_cos();
        let den = 1.0 + s * s;
        DVector::from_vec(vec![x[1], (s - x[1] * x[1] * s * c) / den])
    }
    fn df(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = x[0].sin_cos();
        let den = 1.0 + s * s;
        let num = s - x[1] * x[1] * s * c;
        let dnum = c - x[1] * x[1] * (c * c - s * s);
        let dden = 2.0 * s * c;
        let d21 = (dnum * den - num * dden) / (den * den);
        let d22 = -2.0 * x[1] * s * c / den;
        DMatrix::from_row_slice(2, 2, &[0.0, 1.0, d21, d22])
    }
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (s, c) = x[0].sin_cos();
        DMatrix::from_column_slice(2, 1, &[0.0, -c / (1.0 + s * s)])
    }
    fn dg(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let (s, c) = x[0].sin_cos();
        let den = 1.0 + s * s;
        let d = s * (2.0 + c * c) / (den * den);
        vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, d, 0.0])]
    }
    fn h(&self, x: &DVector<f64>) -> f64 {
        self.eps * x.norm_squared()
    }
    fn dh(&self, x: &DVector<f64>) -> DVector<f64> {
        x * (2.0 * self.eps)
    }
    fn d2h0(&self) -> DMatrix<f64> {
        DMatrix::identity(2, 2) * (2.0 * self.eps)
    }
}

/// Chain of integrators driving exponentially stable zero dynamics.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroDynamics;

impl ControlAffineSystem for ZeroDynamics {
    fn name(&self) -> String {
        "zero_dynamics".into()
    }
    fn n(&self) -> usize {
        3
    }
    fn m(&self) -> usize {
        1
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![-x[0] + x[0] * x[0] * x[1], x[2], 0.0])
    }
    fn df(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            3,
            3,
            &[
                -1.0 + 2.0 * x[0] * x[1], x[0] * x[0], 0.0,
                0.0, 0.0, 1.0,
                0.0, 0.0, 0.0,
            ],
        )
    }
    fn g(&self, _: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0])
    }
    fn dg(&self, _: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![DMatrix::zeros(3, 3)]
    }
    fn h(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.norm_squared()
    }
    fn dh(&self, x: &DVector<f64>) -> DVector<f64> {
        x.clone()
    }
    fn d2h0(&self) -> DMatrix<f64> {
        DMatrix::identity(3, 3)
    }
}

/// The cascade `ẋ₁ = x₁² + (1 + x₁²)x₂`, `ẋ₂ = x₂² + u`.
#[derive(Debug, Clone, Copy, Default)]
pub struct BacksteppingExample;

impl BacksteppingExample {
    /// The cascade with penalty `h = ½(x₁² + x₂²)`.
    pub fn system() -> CascadeSystem {
        CascadeSystem::new(
            "backstepping",
            Arc::new(BacksteppingExample),
            QuadraticPenalty::identity(2, 1.0),
        )
    }
}

impl Cascade for BacksteppingExample {
    fn block_dim(&self) -> usize {
        1
    }
    fn f1(&self, x1: &DVector<f64>) -> DVector<f64> {
        v1(x1[0] * x1[0])
    }
    fn df1(&self, x1: &DVector<f64>) -> DMatrix<f64> {
        m1(2.0 * x1[0])
    }
    fn g1(&self, x1: &DVector<f64>) -> DMatrix<f64> {
        m1(1.0 + x1[0] * x1[0])
    }
    fn dg1(&self, x1: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![m1(2.0 * x1[0])]
    }
    fn f2(&self, _: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64> {
        v1(x2[0] * x2[0])
    }
    fn df2(&self, _: &DVector<f64>, x2: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, 2, &[0.0, 2.0 * x2[0]])
    }
    fn g2(&self, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
        m1(1.0)
    }
    fn dg2(&self, _: &DVector<f64>, _: &DVector<f64>) -> Vec<DMatrix<f64>> {
        vec![m1(0.0), m1(0.0)]
    }
}
