//! Smooth truncation of the `x₂` block: `f̃(x₁,x₂) = f(x₁, φ_R(x₂)x₂)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{ControlAffineSystem, SystemRef};
use crate::error::{Error, Result};

/// Below this argument `e^{−1/t}` is treated as exactly zero.
const UNDERFLOW_GUARD: f64 = 1e-8;

fn bump(t: f64) -> f64 {
    if t <= UNDERFLOW_GUARD {
        0.0
    } else {
        (-1.0 / t).exp()
    }
}

fn bump_prime(t: f64) -> f64 {
    if t <= UNDERFLOW_GUARD {
        0.0
    } else {
        bump(t) / (t * t)
    }
}

/// `C^∞` step from 0 (at `t ≤ 0`) to 1 (at `t ≥ 1`).
pub fn smoothstep(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        let a = bump(t);
        a / (a + bump(1.0 - t))
    }
}

fn smoothstep_prime(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return 0.0;
    }
    let (a, b) = (bump(t), bump(1.0 - t));
    let s = a + b;
    (bump_prime(t) * b + a * bump_prime(1.0 - t)) / (s * s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffSpec {
    pub radius: f64,
    pub n1: usize,
    pub n2: usize,
}

impl CutoffSpec {
    /// `φ_R(x₂) = 1 − smoothstep(|x₂| − R)`.
    pub fn profile(&self, x2: &DVector<f64>) -> f64 {
        1.0 - smoothstep(x2.norm() - self.radius)
    }

    pub fn profile_gradient(&self, x2: &DVector<f64>) -> DVector<f64> {
        let r = x2.norm();
        if r == 0.0 {
            return DVector::zeros(x2.len());
        }
        x2 * (-smoothstep_prime(r - self.radius) / r)
    }

    /// The clamped state `(x₁, φ_R(x₂)x₂)` and its Jacobian.
    fn clamp(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.n1 + self.n2;
        let x2 = x.rows(self.n1, self.n2).into_owned();
        let phi = self.profile(&x2);
        let grad = self.profile_gradient(&x2);
        let mut y = x.clone();
        y.rows_mut(self.n1, self.n2).copy_from(&(&x2 * phi));
        let mut jac = DMatrix::identity(n, n);
        let block = DMatrix::identity(self.n2, self.n2) * phi + &x2 * grad.transpose();
        jac.view_mut((self.n1, self.n1), (self.n2, self.n2)).copy_from(&block);
        (y, jac)
    }
}

/// A system with its `x₂` block cut off outside `|x₂| < R + 1`.
/// The penalty `h` is left unchanged.
#[derive(Debug, Clone)]
pub struct CutoffSystem {
    pub inner: SystemRef,
    pub spec: CutoffSpec,
}

impl CutoffSystem {
    pub fn new(inner: SystemRef, spec: CutoffSpec) -> Result<Self> {
        let n = inner.n();
        if spec.n1 + spec.n2 != n {
            return Err(Error::BadPartition {
                n1: spec.n1,
                n2: spec.n2,
                n,
            });
        }
        Ok(Self { inner, spec })
    }
}

impl ControlAffineSystem for CutoffSystem {
    fn name(&self) -> String {
        format!("{}_cutoff", self.inner.name())
    }
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn m(&self) -> usize {
        self.inner.m()
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.f(&self.spec.clamp(x).0)
    }
    fn df(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let (y, jac) = self.spec.clamp(x);
        self.inner.df(&y) * jac
    }
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        self.inner.g(&self.spec.clamp(x).0)
    }
    fn dg(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let (y, jac) = self.spec.clamp(x);
        self.inner.dg(&y).into_iter().map(|d| d * &jac).collect()
    }
    fn h(&self, x: &DVector<f64>) -> f64 {
        self.inner.h(x)
    }
    fn dh(&self, x: &DVector<f64>) -> DVector<f64> {
        self.inner.dh(x)
    }
    fn d2h0(&self) -> DMatrix<f64> {
        self.inner.d2h0()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{derivative_defect, example_system, ExampleParams};
    use std::sync::Arc;

    fn zero_dynamics_cutoff(radius: f64) -> CutoffSystem {
        let sys = example_system("zero_dynamics", &ExampleParams::default()).unwrap();
        // The trailing block (x₂, x₃) is cut off jointly.
        CutoffSystem::new(sys, CutoffSpec { radius, n1: 1, n2: 2 }).unwrap()
    }

    #[test]
    fn smoothstep_shape() {
        assert_eq!(smoothstep(-0.5), 0.0);
        assert_eq!(smoothstep(1.5), 1.0);
        assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
        let mut prev = 0.0;
        for k in 0..=100 {
            let s = smoothstep(k as f64 / 100.0);
            assert!(s >= prev);
            prev = s;
        }
        let h = 1e-6;
        for t in [0.1, 0.3, 0.7, 0.95] {
            let fd = (smoothstep(t + h) - smoothstep(t - h)) / (2.0 * h);
            assert!((fd - smoothstep_prime(t)).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_inside_radius() {
        let cut = zero_dynamics_cutoff(2.0);
        let x = DVector::from_vec(vec![0.7, 1.2, -0.9]);
        assert_eq!(cut.f(&x), cut.inner.f(&x));
        assert_eq!(cut.g(&x), cut.inner.g(&x));
        assert_eq!(cut.df(&x), cut.inner.df(&x));
    }

    #[test]
    fn zero_outside_shell() {
        let cut = zero_dynamics_cutoff(2.0);
        let x = DVector::from_vec(vec![1.0, 3.0, 0.0]);
        let clamped = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        assert_eq!(cut.f(&x), cut.inner.f(&clamped));
        // Hand evaluation: f(1, 0, 0) = (−1, 0, 0) for the zero-dynamics system.
        assert!((cut.f(&x)[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn chain_rule_jacobians() {
        let cut = zero_dynamics_cutoff(0.5);
        for x in [[0.3, 0.6, 0.4], [-1.0, 0.9, 0.2], [0.5, 1.2, -0.3]] {
            let x = DVector::from_row_slice(&x);
            assert!(derivative_defect(&cut, &x) < 1e-6, "{x}");
        }
    }

    #[test]
    fn bad_partition() {
        let sys = example_system("zero_dynamics", &ExampleParams::default()).unwrap();
        let err = CutoffSystem::new(Arc::clone(&sys), CutoffSpec { radius: 1.0, n1: 1, n2: 1 }).unwrap_err();
        assert_eq!(err, Error::BadPartition { n1: 1, n2: 1, n: 3 });
    }
}
