//! Control-affine systems `ẋ = f(x) + g(x)u` with running cost
//! `|u|²/2 + h(x)`, their linearization at the origin, the built-in example
//! systems and the stabilizer / cutoff constructions built on top of them.

mod cascade;
mod cutoff;
mod examples;
pub mod expr;
mod growth;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub use cascade::{backstepping_feedback, Backstepping, Cascade, CascadeSystem, ReversedCascade};
pub use cutoff::{smoothstep, CutoffSpec, CutoffSystem};
pub use examples::{
    example_system, BacksteppingExample, ExampleParams, GeneratorParams, Generator, Pendulum,
    ScalarExample, ZeroDynamics, EXAMPLE_NAMES,
};
pub use expr::{ExprSystem, PluginSpec};
pub use growth::{geometric_radii, growth_certificate, GrowthCertificate};

/// Eigenvalues of `D²h(0)` at or below this are dropped from the factor `C`.
pub const HESSIAN_RANK_TOL: f64 = 1e-12;

/// A control-affine system together with its penalty `h` and derivatives.
pub trait ControlAffineSystem: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    /// State dimension `n`.
    fn n(&self) -> usize;
    /// Input dimension `m`.
    fn m(&self) -> usize;
    fn f(&self, x: &DVector<f64>) -> DVector<f64>;
    fn df(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// `n × m` input matrix.
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Jacobians of the columns of `g`, one `n × n` matrix per input.
    fn dg(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>>;
    fn h(&self, x: &DVector<f64>) -> f64;
    fn dh(&self, x: &DVector<f64>) -> DVector<f64>;
    fn d2h0(&self) -> DMatrix<f64>;
}

pub type SystemRef = Arc<dyn ControlAffineSystem>;

/// `A = Df(0)`, `B = g(0)` and a factor `C` with `CᵀC = D²h(0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearData {
    /// `φ(x) = f(x) − Ax`.
    pub fn drift_remainder(&self, sys: &dyn ControlAffineSystem, x: &DVector<f64>) -> DVector<f64> {
        sys.f(x) - &self.a * x
    }

    /// `g̃(x) = g(x) − B`.
    pub fn input_remainder(&self, sys: &dyn ControlAffineSystem, x: &DVector<f64>) -> DMatrix<f64> {
        sys.g(x) - &self.b
    }

    /// `h̃(x) = h(x) − ½|Cx|²`.
    pub fn penalty_remainder(&self, sys: &dyn ControlAffineSystem, x: &DVector<f64>) -> f64 {
        sys.h(x) - 0.5 * (&self.c * x).norm_squared()
    }
}

/// Symmetric factor `C = diag(√λ) Vᵀ` of a PSD matrix, keeping eigenvalues
/// above [`HESSIAN_RANK_TOL`].
pub fn factor_psd(hess: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = hess.nrows();
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let sym = (hess + hess.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = 1.0 + eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale {
        return Err(Error::NonPsdHessian { min_eigenvalue: min });
    }
    // Largest eigenvalues first for a reproducible row order.
    let mut order: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] > HESSIAN_RANK_TOL).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut c = DMatrix::zeros(order.len(), n);
    for (row, &i) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        // Fix the sign so the largest entry is positive.
        let pivot = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        let s = eig.eigenvalues[i].sqrt() * sign;
        for j in 0..n {
            c[(row, j)] = s * v[j];
        }
    }
    Ok(c)
}

pub fn linearize(sys: &dyn ControlAffineSystem) -> Result<LinearData> {
    let n = sys.n();
    let zero = DVector::zeros(n);
    Ok(LinearData {
        a: sys.df(&zero),
        b: sys.g(&zero),
        c: factor_psd(&sys.d2h0())?,
    })
}

/// Central-difference Jacobian of `map` at `x`.
pub fn fd_jacobian<F>(map: F, x: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let f0 = map(x);
    let mut jac = DMatrix::zeros(f0.len(), n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        let hj = step * (1.0 + x[j].abs());
        xp[j] += hj;
        xm[j] -= hj;
        let col = (map(&xp) - map(&xm)) / (2.0 * hj);
        jac.set_column(j, &col);
    }
    jac
}

/// Central-difference gradient of a scalar map.
pub fn fd_gradient<F>(map: F, x: &DVector<f64>, step: f64) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let j = fd_jacobian(|y| DVector::from_element(1, map(y)), x, step);
    j.row(0).transpose()
}

/// Worst relative disagreement between the analytic derivatives of `sys`
/// and central differences at `x`.
pub fn derivative_defect(sys: &dyn ControlAffineSystem, x: &DVector<f64>) -> f64 {
    let step = 1e-6;
    let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).norm() / (1.0 + a.norm());
    let mut worst = rel(&sys.df(x), &fd_jacobian(|y| sys.f(y), x, step));
    let dg = sys.dg(x);
    for (j, dgj) in dg.iter().enumerate() {
        let fd = fd_jacobian(|y| sys.g(y).column(j).into_owned(), x, step);
        worst = worst.max(rel(dgj, &fd));
    }
    let dh = DMatrix::from_column_slice(sys.n(), 1, sys.dh(x).as_slice());
    let fd_dh = fd_gradient(|y| sys.h(y), x, step);
    worst.max(rel(&dh, &DMatrix::from_column_slice(sys.n(), 1, fd_dh.as_slice())))
}

/// A state feedback `u = k(x)`.
#[derive(Clone)]
pub struct FeedbackLaw {
    pub label: String,
    pub m: usize,
    /// Radius of the region where the law is meant to be used.
    pub domain_radius: f64,
    law: Arc<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>,
}

impl fmt::Debug for FeedbackLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeedbackLaw")
            .field("label", &self.label)
            .field("m", &self.m)
            .field("domain_radius", &self.domain_radius)
            .finish()
    }
}

impl FeedbackLaw {
    pub fn new<F>(label: impl Into<String>, m: usize, domain_radius: f64, law: F) -> Self
    where
        F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            m,
            domain_radius,
            law: Arc::new(law),
        }
    }

    pub fn zero(m: usize) -> Self {
        Self::new("zero", m, f64::INFINITY, move |_| Ok(DVector::zeros(m)))
    }

    /// `u = −K x`.
    pub fn linear(gain: DMatrix<f64>) -> Self {
        let m = gain.nrows();
        Self::new("linear", m, f64::INFINITY, move |x| Ok(-(&gain * x)))
    }

    pub fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (self.law)(x)
    }
}

/// `sys` with its penalty multiplied by `factor`; `factor = 2` turns
/// `½|Cx|²` into `|Cx|²`.
#[derive(Debug, Clone)]
pub struct ScaledPenalty {
    pub inner: SystemRef,
    pub factor: f64,
}

impl ScaledPenalty {
    pub fn new(inner: SystemRef, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::Dimension(format!("penalty factor must be positive, got {factor}")));
        }
        Ok(Self { inner, factor })
    }
}

impl ControlAffineSystem for ScaledPenalty {
    fn name(&self) -> String {
        self.inner.name()
    }
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn m(&self) -> usize {
        self.inner.m()
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.f(x)
    }
    fn df(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.df(x)
    }
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.g(x)
    }
    fn dg(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.inner.dg(x)
    }
    fn h(&self, x: &DVector<f64>) -> f64 {
        self.factor * self.inner.h(x)
    }
    fn dh(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.dh(x) * self.factor
    }
    fn d2h0(&self) -> DMatrix<f64> {
        self.inner.d2h0() * self.factor
    }
}

/// `h(x) = ½ xᵀ Q x` helpers shared by the examples.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticPenalty {
    pub q: DMatrix<f64>,
}

impl QuadraticPenalty {
    pub fn new(q: DMatrix<f64>) -> Self {
        Self { q: (&q + q.transpose()) * 0.5 }
    }

    pub fn identity(n: usize, weight: f64) -> Self {
        Self::new(DMatrix::identity(n, n) * weight)
    }

    pub fn zero(n: usize) -> Self {
        Self::new(DMatrix::zeros(n, n))
    }

    pub fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x))
    }

    pub fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn factor_recovers_hessian() {
        let h = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let c = factor_psd(&h).unwrap();
        assert_eq!(c.nrows(), 2);
        assert!((c.transpose() * &c - &h).norm() <= 1e-10 * (1.0 + h.norm()));
    }

    #[test]
    fn factor_rejects_indefinite() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(factor_psd(&h), Err(Error::NonPsdHessian { .. })));
    }

    #[test]
    fn linearize_scalar_example() {
        let sys = example_system("scalar", &ExampleParams::default()).unwrap();
        let lin = linearize(sys.as_ref()).unwrap();
        assert_abs_diff_eq!(lin.a[(0, 0)], -1.0);
        assert_abs_diff_eq!(lin.b[(0, 0)], 1.0);
        assert_eq!(lin.c.nrows(), 0);
    }

    #[test]
    fn linearize_pendulum() {
        let sys = example_system("pendulum", &ExampleParams::default()).unwrap();
        let lin = linearize(sys.as_ref()).unwrap();
        assert_abs_diff_eq!(lin.a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), epsilon = 1e-15);
        assert_abs_diff_eq!(lin.b, DMatrix::from_row_slice(2, 1, &[0.0, -1.0]), epsilon = 1e-15);
    }

    #[test]
    fn linearize_linear_quadratic() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.5]);
        let sys = ExprSystem::linear(&a, &b, &c).unwrap();
        let lin = linearize(&sys).unwrap();
        assert_abs_diff_eq!(lin.a, a, epsilon = 1e-14);
        assert_abs_diff_eq!(lin.b, b, epsilon = 1e-14);
        // C is unique up to an orthogonal left factor.
        assert_abs_diff_eq!(lin.c.transpose() * &lin.c, c.transpose() * &c, epsilon = 1e-12);
    }

    #[test]
    fn remainders_vanish_for_linear_systems() {
        let a = DMatrix::from_row_slice(1, 1, &[0.3]);
        let b = DMatrix::from_row_slice(1, 1, &[2.0]);
        let c = DMatrix::from_row_slice(1, 1, &[1.5]);
        let sys = ExprSystem::linear(&a, &b, &c).unwrap();
        let lin = linearize(&sys).unwrap();
        let x = DVector::from_vec(vec![0.7]);
        assert!(lin.drift_remainder(&sys, &x).norm() < 1e-14);
        assert!(lin.input_remainder(&sys, &x).norm() < 1e-14);
        assert!(lin.penalty_remainder(&sys, &x).abs() < 1e-14);
    }

    #[test]
    fn feedback_constructors() {
        let x = DVector::from_vec(vec![1.0, 2.0]);
        assert_eq!(FeedbackLaw::zero(1).control(&x).unwrap(), DVector::zeros(1));
        let k = FeedbackLaw::linear(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]));
        assert_abs_diff_eq!(k.control(&x).unwrap()[0], -3.0);
    }
}
