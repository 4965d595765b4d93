//! Two-block cascades `ẋ₁ = f₁(x₁) + g₁(x₁)x₂`, `ẋ₂ = f₂(x₁,x₂) + g₂(x₁,x₂)u`
//! and their backstepping stabilizer.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{ControlAffineSystem, FeedbackLaw, QuadraticPenalty};
use crate::error::{Error, Result};

/// Both blocks and the input share the dimension `k = block_dim()`.
pub trait Cascade: Send + Sync + fmt::Debug {
    fn block_dim(&self) -> usize;
    fn f1(&self, x1: &DVector<f64>) -> DVector<f64>;
    fn df1(&self, x1: &DVector<f64>) -> DMatrix<f64>;
    fn g1(&self, x1: &DVector<f64>) -> DMatrix<f64>;
    /// `∂g₁/∂x₁ⱼ` for `j = 0..k`.
    fn dg1(&self, x1: &DVector<f64>) -> Vec<DMatrix<f64>>;
    fn f2(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64>;
    /// `k × 2k` Jacobian with respect to the full state.
    fn df2(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DMatrix<f64>;
    fn g2(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DMatrix<f64>;
    /// `∂g₂/∂xⱼ` over the full state, `j = 0..2k`.
    fn dg2(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Vec<DMatrix<f64>>;
}

fn split(x: &DVector<f64>, k: usize) -> (DVector<f64>, DVector<f64>) {
    (x.rows(0, k).into_owned(), x.rows(k, k).into_owned())
}

/// A cascade viewed as a control-affine system with a quadratic penalty.
#[derive(Debug, Clone)]
pub struct CascadeSystem {
    pub label: String,
    pub cascade: Arc<dyn Cascade>,
    pub penalty: QuadraticPenalty,
}

impl CascadeSystem {
    pub fn new(label: impl Into<String>, cascade: Arc<dyn Cascade>, penalty: QuadraticPenalty) -> Self {
        Self {
            label: label.into(),
            cascade,
            penalty,
        }
    }
}

impl ControlAffineSystem for CascadeSystem {
    fn name(&self) -> String {
        self.label.clone()
    }
    fn n(&self) -> usize {
        2 * self.cascade.block_dim()
    }
    fn m(&self) -> usize {
        self.cascade.block_dim()
    }
    fn f(&self, x: &DVector<f64>) -> DVector<f64> {
        let k = self.cascade.block_dim();
        let (x1, x2) = split(x, k);
        let top = self.cascade.f1(&x1) + self.cascade.g1(&x1) * &x2;
        let bottom = self.cascade.f2(&x1, &x2);
        DVector::from_iterator(2 * k, top.iter().chain(bottom.iter()).copied())
    }
    fn df(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let k = self.cascade.block_dim();
        let (x1, x2) = split(x, k);
        let mut jac = DMatrix::zeros(2 * k, 2 * k);
        let mut top_left = self.cascade.df1(&x1);
        for (j, dg) in self.cascade.dg1(&x1).iter().enumerate() {
            let col = top_left.column(j) + dg * &x2;
            top_left.set_column(j, &col);
        }
        jac.view_mut((0, 0), (k, k)).copy_from(&top_left);
        jac.view_mut((0, k), (k, k)).copy_from(&self.cascade.g1(&x1));
        jac.view_mut((k, 0), (k, 2 * k)).copy_from(&self.cascade.df2(&x1, &x2));
        jac
    }
    fn g(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let k = self.cascade.block_dim();
        let (x1, x2) = split(x, k);
        let mut g = DMatrix::zeros(2 * k, k);
        g.view_mut((k, 0), (k, k)).copy_from(&self.cascade.g2(&x1, &x2));
        g
    }
    fn dg(&self, x: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let k = self.cascade.block_dim();
        let (x1, x2) = split(x, k);
        let partials = self.cascade.dg2(&x1, &x2);
        (0..k)
            .map(|i| {
                let mut jac = DMatrix::zeros(2 * k, 2 * k);
                for (j, dg) in partials.iter().enumerate() {
                    for r in 0..k {
                        jac[(k + r, j)] = dg[(r, i)];
                    }
                }
                jac
            })
            .collect()
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

/// The time-reversed cascade: every right-hand-side term changes sign.
#[derive(Debug, Clone)]
pub struct ReversedCascade(pub Arc<dyn Cascade>);

impl Cascade for ReversedCascade {
    fn block_dim(&self) -> usize {
        self.0.block_dim()
    }
    fn f1(&self, x1: &DVector<f64>) -> DVector<f64> {
        -self.0.f1(x1)
    }
    fn df1(&self, x1: &DVector<f64>) -> DMatrix<f64> {
        -self.0.df1(x1)
    }
    fn g1(&self, x1: &DVector<f64>) -> DMatrix<f64> {
        -self.0.g1(x1)
    }
    fn dg1(&self, x1: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.0.dg1(x1).into_iter().map(|m| -m).collect()
    }
    fn f2(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DVector<f64> {
        -self.0.f2(x1, x2)
    }
    fn df2(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DMatrix<f64> {
        -self.0.df2(x1, x2)
    }
    fn g2(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> DMatrix<f64> {
        -self.0.g2(x1, x2)
    }
    fn dg2(&self, x1: &DVector<f64>, x2: &DVector<f64>) -> Vec<DMatrix<f64>> {
        self.0.dg2(x1, x2).into_iter().map(|m| -m).collect()
    }
}

fn solve_gain(g: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = g.amax();
    let lu = g.lu();
    let det = lu.determinant();
    let k = rhs.len() as i32;
    if !det.is_finite() || det.abs() <= 1e-12 * scale.max(1e-300).powi(k) {
        return Err(Error::SingularG);
    }
    lu.solve(rhs).ok_or(Error::SingularG)
}

fn solve_gain_matrix(g: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = g.amax();
    let k = g.nrows() as i32;
    let lu = g.lu();
    let det = lu.determinant();
    if !det.is_finite() || det.abs() <= 1e-12 * scale.max(1e-300).powi(k) {
        return Err(Error::SingularG);
    }
    lu.solve(rhs).ok_or(Error::SingularG)
}

/// Backstepping design with virtual control
/// `α(x₁) = g₁(x₁)⁻¹[−f₁(x₁) − x₁]` and Lyapunov function
/// `V = |x₁|²/2 + |x₂ − α(x₁)|²/2`, for which `V̇ = −|x₁|² − |z|²` in
/// closed loop.
#[derive(Debug, Clone)]
pub struct Backstepping {
    pub cascade: Arc<dyn Cascade>,
}

impl Backstepping {
    pub fn new(cascade: Arc<dyn Cascade>) -> Self {
        Self { cascade }
    }

    pub fn alpha(&self, x1: &DVector<f64>) -> Result<DVector<f64>> {
        let rhs = -self.cascade.f1(x1) - x1;
        solve_gain(self.cascade.g1(x1), &rhs)
    }

    /// `Dα(x₁)` from differentiating `g₁ α = −f₁ − x₁`.
    pub fn alpha_jacobian(&self, x1: &DVector<f64>) -> Result<DMatrix<f64>> {
        let k = self.cascade.block_dim();
        let alpha = self.alpha(x1)?;
        let mut rhs = -self.cascade.df1(x1) - DMatrix::<f64>::identity(k, k);
        for (j, dg) in self.cascade.dg1(x1).iter().enumerate() {
            let col = rhs.column(j) - dg * &alpha;
            rhs.set_column(j, &col);
        }
        solve_gain_matrix(self.cascade.g1(x1), &rhs)
    }

    /// Error coordinate `z = x₂ − α(x₁)`.
    pub fn error(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let k = self.cascade.block_dim();
        let (x1, x2) = split(x, k);
        Ok(x2 - self.alpha(&x1)?)
    }

    pub fn lyapunov(&self, x: &DVector<f64>) -> Result<f64> {
        let k = self.cascade.block_dim();
        let z = self.error(x)?;
        Ok(0.5 * x.rows(0, k).norm_squared() + 0.5 * z.norm_squared())
    }

    pub fn control(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let k = self.cascade.block_dim();
        let (x1, x2) = split(x, k);
        let alpha = self.alpha(&x1)?;
        let z = &x2 - &alpha;
        let x1_dot = self.cascade.f1(&x1) + self.cascade.g1(&x1) * &x2;
        let alpha_dot = self.alpha_jacobian(&x1)? * x1_dot;
        let rhs = -self.cascade.f2(&x1, &x2) + alpha_dot - self.cascade.g1(&x1).transpose() * &x1 - z;
        solve_gain(self.cascade.g2(&x1, &x2), &rhs)
    }
}

pub fn backstepping_feedback(cascade: Arc<dyn Cascade>) -> FeedbackLaw {
    let design = Backstepping::new(cascade);
    let k = design.cascade.block_dim();
    FeedbackLaw::new("backstepping", k, f64::INFINITY, move |x| design.control(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{derivative_defect, BacksteppingExample};
    use approx::assert_abs_diff_eq;

    fn design() -> Backstepping {
        Backstepping::new(Arc::new(BacksteppingExample))
    }

    #[test]
    fn alpha_values() {
        let d = design();
        assert_abs_diff_eq!(d.alpha(&DVector::from_element(1, 1.0)).unwrap()[0], -1.0, epsilon = 1e-15);
        for x in [-2.0, -0.3, 0.0, 0.8, 3.0] {
            let expected = -(x * x + x) / (1.0 + x * x);
            assert_abs_diff_eq!(d.alpha(&DVector::from_element(1, x)).unwrap()[0], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn control_vanishes_at_origin() {
        assert_abs_diff_eq!(design().control(&DVector::zeros(2)).unwrap()[0], 0.0);
    }

    #[test]
    fn lyapunov_derivative_identity() {
        let d = design();
        let sys = BacksteppingExample::system();
        for (a, b) in [(1.0, 1.0), (-0.5, 2.0), (0.3, -1.7), (2.0, -2.0)] {
            let x = DVector::from_vec(vec![a, b]);
            let u = d.control(&x).unwrap();
            let xdot = sys.f(&x) + sys.g(&x) * u;
            let grad = crate::systems::fd_gradient(|y| d.lyapunov(y).unwrap(), &x, 1e-6);
            let vdot = grad.dot(&xdot);
            let x1 = x[0];
            let z = d.error(&x).unwrap()[0];
            assert_abs_diff_eq!(vdot, -x1 * x1 - z * z, epsilon = 1e-6 * (1.0 + vdot.abs()));
        }
    }

    #[test]
    fn cascade_derivatives() {
        let sys = BacksteppingExample::system();
        let rev = CascadeSystem::new("rev", Arc::new(ReversedCascade(Arc::new(BacksteppingExample))), sys.penalty.clone());
        for x in [[0.3, -0.2], [1.0, 1.0], [-1.5, 0.7]] {
            let x = DVector::from_row_slice(&x);
            assert!(derivative_defect(&sys, &x) < 1e-6);
            assert!(derivative_defect(&rev, &x) < 1e-6);
            assert_abs_diff_eq!(rev.f(&x), -sys.f(&x), epsilon = 1e-15);
        }
    }

    #[derive(Debug)]
    struct Degenerate;
    impl Cascade for Degenerate {
        fn block_dim(&self) -> usize {
            1
        }
        fn f1(&self, x1: &DVector<f64>) -> DVector<f64> {
            x1.clone()
        }
        fn df1(&self, _: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::identity(1, 1)
        }
        fn g1(&self, x1: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::from_element(1, 1, x1[0])
        }
        fn dg1(&self, _: &DVector<f64>) -> Vec<DMatrix<f64>> {
            vec![DMatrix::identity(1, 1)]
        }
        fn f2(&self, _: &DVector<f64>, _: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(1)
        }
        fn df2(&self, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::zeros(1, 2)
        }
        fn g2(&self, _: &DVector<f64>, _: &DVector<f64>) -> DMatrix<f64> {
            DMatrix::identity(1, 1)
        }
        fn dg2(&self, _: &DVector<f64>, _: &DVector<f64>) -> Vec<DMatrix<f64>> {
            vec![DMatrix::zeros(1, 1); 2]
        }
    }

    #[test]
    fn singular_gain_is_reported() {
        let law = backstepping_feedback(Arc::new(Degenerate));
        assert_eq!(law.control(&DVector::zeros(2)), Err(Error::SingularG));
    }
}
