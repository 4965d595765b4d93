//! The Hamiltonian system of the optimal control problem,
//!
//! `ẋ = f(x) − g(x)g(x)ᵀp`, `ṗ = −[Df(x)ᵀ + Σⱼ uⱼ Dgⱼ(x)ᵀ]p − Dh(x)ᵀ`,
//! `u = −g(x)ᵀp`, with `H(x,p) = pᵀf(x) − ½|g(x)ᵀp|² + h(x)`,
//! plus controlled simulation of the underlying system with cost
//! accumulation.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::linalg::{build_symplectic, SymplecticData};
use crate::ode::{integrate, DenseOutput, IntegratorStats, OdeOptions, Outcome};
use crate::systems::{linearize, ControlAffineSystem, FeedbackLaw, LinearData, SystemRef};

#[derive(Debug, Clone)]
pub struct HamiltonianSystem {
    pub base: SystemRef,
    pub linear: LinearData,
    pub sym: SymplecticData,
}

/// Linearizes `sys`, solves the Riccati and Lyapunov equations and returns
/// the Hamiltonian system. Fails if the linear part is not stabilizable or
/// detectable.
pub fn build_hamiltonian(sys: SystemRef) -> Result<HamiltonianSystem> {
    let linear = linearize(sys.as_ref())?;
    let sym = build_symplectic(&linear.a, &linear.b, &linear.c)?;
    Ok(HamiltonianSystem { base: sys, linear, sym })
}

pub fn split_state(z: &DVector<f64>, n: usize) -> (DVector<f64>, DVector<f64>) {
    (z.rows(0, n).into_owned(), z.rows(n, n).into_owned())
}

pub fn join_state(x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(x.len() + p.len(), x.iter().chain(p.iter()).copied())
}

/// `u = −g(x)ᵀp`.
pub fn optimal_feedback(sys: &dyn ControlAffineSystem, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
    -(sys.g(x).transpose() * p)
}

impl HamiltonianSystem {
    pub fn n(&self) -> usize {
        self.base.n()
    }

    pub fn m(&self) -> usize {
        self.base.m()
    }

    pub fn hval(&self, x: &DVector<f64>, p: &DVector<f64>) -> f64 {
        let gp = self.base.g(x).transpose() * p;
        p.dot(&self.base.f(x)) - 0.5 * gp.norm_squared() + self.base.h(x)
    }

    pub fn hval_z(&self, z: &DVector<f64>) -> f64 {
        let (x, p) = split_state(z, self.n());
        self.hval(&x, &p)
    }

    pub fn optimal_feedback(&self, x: &DVector<f64>, p: &DVector<f64>) -> DVector<f64> {
        optimal_feedback(self.base.as_ref(), x, p)
    }

    /// Field and running cost `|u|²/2 + h(x)` at `z = (x, p)`.
    fn field_and_cost(&self, z: &DVector<f64>) -> (DVector<f64>, f64) {
        let n = self.n();
        let (x, p) = split_state(z, n);
        let g = self.base.g(&x);
        let u = -(g.transpose() * &p);
        let xdot = self.base.f(&x) + &g * &u;
        let mut drift = self.base.df(&x).transpose();
        for (j, dgj) in self.base.dg(&x).iter().enumerate() {
            drift += dgj.transpose() * u[j];
        }
        let pdot = -(drift * &p) - self.base.dh(&x);
        let cost = 0.5 * u.norm_squared() + self.base.h(&x);
        (join_state(&xdot, &pdot), cost)
    }

    pub fn rhs(&self, z: &DVector<f64>) -> DVector<f64> {
        self.field_and_cost(z).0
    }

    /// The time-reversed field `−rhs`.
    pub fn rhs_reversed(&self, z: &DVector<f64>) -> DVector<f64> {
        -self.rhs(z)
    }

    pub fn to_xi_eta(&self, x: &DVector<f64>, p: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        self.sym.to_xi_eta(x, p)
    }

    pub fn from_xi_eta(&self, xi: &DVector<f64>, eta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        self.sym.from_xi_eta(xi, eta)
    }

    /// Nonlinear residuals `(ν₁, ν₂)` of the field in `(ξ, η)` coordinates,
    /// i.e. `ξ̇ = Fξ + ν₁`, `η̇ = −Fᵀη + ν₂`.
    pub fn nonlinear_residual(&self, xi: &DVector<f64>, eta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.n();
        let (x, p) = self.from_xi_eta(xi, eta);
        let zdot = self.rhs(&join_state(&x, &p));
        let (xdot, pdot) = split_state(&zdot, n);
        // Differentiate η = p − P1 x and ξ = x − P2 η.
        let eta_dot = &pdot - &self.sym.p1 * &xdot;
        let xi_dot = &xdot - &self.sym.p2 * &eta_dot;
        let nu1 = xi_dot - &self.sym.f * xi;
        let nu2 = eta_dot + self.sym.f.transpose() * eta;
        (nu1, nu2)
    }

    /// Integrates the Hamiltonian system from `z0` at `t = 0` to `t1`
    /// (negative for backward flow) with `rtol = atol = tol`.
    pub fn flow(&self, z0: &DVector<f64>, t1: f64, tol: f64) -> Result<Trajectory> {
        let (traj, outcome) = self.flow_with(z0, t1, &OdeOptions::with_tol(tol), |_, _| false);
        match outcome {
            Outcome::Failed(e) => Err(e),
            _ => Ok(traj),
        }
    }

    /// Like [`flow`](Self::flow) with explicit options and a stop predicate
    /// on `(t, z)`; returns whatever was integrated together with the outcome.
    pub fn flow_with<S>(&self, z0: &DVector<f64>, t1: f64, opts: &OdeOptions, stop: S) -> (Trajectory, Outcome)
    where
        S: FnMut(f64, &DVector<f64>) -> bool,
    {
        self.flow_segment(z0, 0.0, t1, 0.0, opts, stop)
    }

    /// Flow over `[t0, t1]` starting with accumulated cost `cost0`; pieces
    /// produced this way can be joined with [`Trajectory::append`].
    pub fn flow_segment<S>(&self, z0: &DVector<f64>, t0: f64, t1: f64, cost0: f64, opts: &OdeOptions, mut stop: S) -> (Trajectory, Outcome)
    where
        S: FnMut(f64, &DVector<f64>) -> bool,
    {
        let n = self.n();
        let y0 = DVector::from_iterator(2 * n + 1, z0.iter().copied().chain(std::iter::once(cost0)));
        // The cost is accumulated forward in time regardless of direction.
        let dir = if t1 < t0 { -1.0 } else { 1.0 };
        let sol = integrate(
            |_, y| {
                let (zdot, cost) = self.field_and_cost(&y.rows(0, 2 * n).into_owned());
                DVector::from_iterator(2 * n + 1, zdot.iter().copied().chain(std::iter::once(dir * cost)))
            },
            t0,
            &y0,
            t1,
            opts,
            |t, y| stop(t, &y.rows(0, 2 * n).into_owned()),
        );
        let sys = Arc::clone(&self.base);
        let input_map: InputMap = Arc::new(move |_, z: &DVector<f64>| {
            let x = z.rows(0, n).into_owned();
            let p = z.rows(n, n).into_owned();
            optimal_feedback(sys.as_ref(), &x, &p)
        });
        let mut traj = Trajectory::assemble(n, self.m(), true, sol.times, sol.states, sol.dense, sol.stats, opts, input_map);
        traj.hamiltonian = traj.states.iter().map(|z| self.hval_z(z)).collect();
        (traj, sol.outcome)
    }
}

type InputMap = Arc<dyn Fn(f64, &DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Sampled solution with dense output. `states` hold `x` or `(x, p)`; the
/// accumulated cost is kept separately.
#[derive(Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub cost: Vec<f64>,
    /// `H` at each sample; empty for state-only trajectories.
    pub hamiltonian: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub has_costate: bool,
    /// Quartic continuous extension over `[state, cost]`.
    pub dense: DenseOutput,
    pub stats: IntegratorStats,
    pub rtol: f64,
    pub atol: f64,
    input_map: InputMap,
}

impl fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trajectory")
            .field("samples", &self.times.len())
            .field("span", &(self.times.first(), self.times.last()))
            .field("n", &self.n)
            .field("m", &self.m)
            .field("has_costate", &self.has_costate)
            .field("stats", &self.stats)
            .finish()
    }
}

impl Trajectory {
    /// Order of the dense interpolant.
    pub const INTERPOLANT_ORDER: usize = 4;

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        n: usize,
        m: usize,
        has_costate: bool,
        times: Vec<f64>,
        raw: Vec<DVector<f64>>,
        dense: DenseOutput,
        stats: IntegratorStats,
        opts: &OdeOptions,
        input_map: InputMap,
    ) -> Self {
        let width = if has_costate { 2 * n } else { n };
        let states: Vec<DVector<f64>> = raw.iter().map(|y| y.rows(0, width).into_owned()).collect();
        let cost = raw.iter().map(|y| y[width]).collect();
        let inputs = times.iter().zip(&states).map(|(t, z)| input_map(*t, z)).collect();
        Self {
            times,
            states,
            inputs,
            cost,
            hamiltonian: Vec::new(),
            n,
            m,
            has_costate,
            dense,
            stats,
            rtol: opts.rtol,
            atol: opts.atol,
            input_map,
        }
    }

    fn width(&self) -> usize {
        if self.has_costate {
            2 * self.n
        } else {
            self.n
        }
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one sample")
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one sample")
    }

    pub fn final_cost(&self) -> f64 {
        *self.cost.last().expect("trajectory has at least one sample")
    }

    /// Interpolated state (`x` or `(x, p)`) at `t`.
    pub fn state_at(&self, t: f64) -> Option<DVector<f64>> {
        if self.dense.is_empty() {
            return (self.times.first() == Some(&t)).then(|| self.states[0].clone());
        }
        self.dense.eval(t).map(|y| y.rows(0, self.width()).into_owned())
    }

    pub fn x_at(&self, t: f64) -> Option<DVector<f64>> {
        self.state_at(t).map(|z| z.rows(0, self.n).into_owned())
    }

    pub fn u_at(&self, t: f64) -> Option<DVector<f64>> {
        self.state_at(t).map(|z| (self.input_map)(t, &z))
    }

    /// `sup |H(z(t)) − H(z(0))|` over the samples.
    pub fn hamiltonian_drift(&self) -> f64 {
        let Some(h0) = self.hamiltonian.first() else {
            return 0.0;
        };
        self.hamiltonian.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max)
    }

    pub fn csv_header(&self) -> Vec<String> {
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.n).map(|i| format!("x{i}")));
        if self.has_costate {
            header.extend((1..=self.n).map(|i| format!("p{i}")));
        }
        header.extend((1..=self.m).map(|i| format!("u{i}")));
        if self.has_costate {
            header.push("H".into());
        }
        header.push("cost".into());
        header
    }

    /// Columns `t, x…, [p…], u…, [H], cost`; `p` and `H` only for
    /// trajectories of the Hamiltonian system.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let rows = (0..self.times.len()).map(|k| {
            let mut row = vec![self.times[k]];
            row.extend(self.states[k].iter());
            row.extend(self.inputs[k].iter());
            if self.has_costate {
                row.push(self.hamiltonian.get(k).copied().unwrap_or(f64::NAN));
            }
            row.push(self.cost[k]);
            row
        });
        write_csv(writer, &self.csv_header(), rows)
    }

    /// Concatenates a later piece that starts where `self` ends.
    pub fn append(&mut self, mut next: Trajectory) {
        let skip = usize::from(!self.times.is_empty() && next.times.first() == self.times.last());
        self.times.extend(next.times.drain(..).skip(skip));
        self.states.extend(next.states.drain(..).skip(skip));
        self.inputs.extend(next.inputs.drain(..).skip(skip));
        self.cost.extend(next.cost.drain(..).skip(skip));
        self.hamiltonian.extend(next.hamiltonian.drain(..).skip(skip));
        self.dense.extend(next.dense);
        self.stats.merge(&next.stats);
        self.input_map = next.input_map;
    }
}

/// Where the control of a simulation comes from.
#[derive(Debug, Clone)]
pub enum InputSource {
    Feedback(FeedbackLaw),
    /// `values[k]` is applied on `[breakpoints[k], breakpoints[k+1])`; the
    /// last value is held to the end.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        values: Vec<DVector<f64>>,
    },
}

/// Simulates `ẋ = f + g u` from `t = 0` to `t_final`, accumulating the cost.
pub fn simulate_controlled(
    sys: &dyn ControlAffineSystem,
    x0: &DVector<f64>,
    source: &InputSource,
    t_final: f64,
    opts: &OdeOptions,
) -> Result<Trajectory> {
    let (traj, outcome) = simulate_until(sys, x0, source, t_final, opts, |_, _| false)?;
    match outcome {
        Outcome::Failed(e) => Err(e),
        _ => Ok(traj),
    }
}

/// [`simulate_controlled`] with a stop predicate on `(t, x)`; integrator
/// failures are returned as the outcome next to the partial trajectory.
pub fn simulate_until<S>(
    sys: &dyn ControlAffineSystem,
    x0: &DVector<f64>,
    source: &InputSource,
    t_final: f64,
    opts: &OdeOptions,
    mut stop: S,
) -> Result<(Trajectory, Outcome)>
where
    S: FnMut(f64, &DVector<f64>) -> bool,
{
    let n = sys.n();
    let m = sys.m();
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has length {}, expected {n}", x0.len())));
    }
    if !(t_final >= 0.0) {
        return Err(Error::Dimension(format!("t_final must be nonnegative, got {t_final}")));
    }
    match source {
        InputSource::Feedback(law) => {
            let law_for_map = law.clone();
            let map: InputMap = Arc::new(move |_, x: &DVector<f64>| {
                law_for_map.control(x).unwrap_or_else(|_| DVector::from_element(m, f64::NAN))
            });
            Ok(run_segment(sys, 0.0, x0, 0.0, t_final, opts, &mut stop, map, |_, x| law.control(x)))
        }
        InputSource::PiecewiseConstant { breakpoints, values } => {
            if breakpoints.len() != values.len() || values.is_empty() {
                return Err(Error::Dimension("breakpoints and values must have equal nonzero length".into()));
            }
            if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Dimension("breakpoints must be strictly increasing".into()));
            }
            if let Some(v) = values.iter().find(|v| v.len() != m) {
                return Err(Error::Dimension(format!("input value has length {}, expected {m}", v.len())));
            }
            let mut traj: Option<Trajectory> = None;
            let (mut t, mut x, mut cost) = (0.0, x0.clone(), 0.0);
            for k in 0..values.len() {
                let end = breakpoints.get(k + 1).copied().unwrap_or(f64::INFINITY).min(t_final);
                if end <= t && !(k == 0 && t_final == 0.0) {
                    continue;
                }
                let u = values[k].clone();
                let u_map = u.clone();
                let map: InputMap = Arc::new(move |_, _: &DVector<f64>| u_map.clone());
                let (piece, outcome) = run_segment(sys, t, &x, cost, end, opts, &mut stop, map, |_, _| Ok(u.clone()));
                t = piece.t_end();
                x = piece.final_state().clone();
                cost = piece.final_cost();
                match &mut traj {
                    None => traj = Some(piece),
                    Some(acc) => acc.append(piece),
                }
                if outcome != Outcome::Completed || t >= t_final {
                    return Ok((traj.expect("at least one segment"), outcome));
                }
            }
            Ok((traj.expect("at least one segment"), Outcome::Completed))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_segment<S, U>(
    sys: &dyn ControlAffineSystem,
    t0: f64,
    x0: &DVector<f64>,
    cost0: f64,
    t1: f64,
    opts: &OdeOptions,
    stop: &mut S,
    map: InputMap,
    control: U,
) -> (Trajectory, Outcome)
where
    S: FnMut(f64, &DVector<f64>) -> bool,
    U: Fn(f64, &DVector<f64>) -> Result<DVector<f64>>,
{
    let n = sys.n();
    let y0 = DVector::from_iterator(n + 1, x0.iter().copied().chain(std::iter::once(cost0)));
    let mut failure: Option<Error> = None;
    let sol = integrate(
        |t, y| {
            let x = y.rows(0, n).into_owned();
            match control(t, &x) {
                Ok(u) => {
                    let xdot = sys.f(&x) + sys.g(&x) * &u;
                    let c = 0.5 * u.norm_squared() + sys.h(&x);
                    DVector::from_iterator(n + 1, xdot.iter().copied().chain(std::iter::once(c)))
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    DVector::from_element(n + 1, f64::NAN)
                }
            }
        },
        t0,
        &y0,
        t1,
        opts,
        |t, y| stop(t, &y.rows(0, n).into_owned()),
    );
    let outcome = match (sol.outcome, failure) {
        (Outcome::Failed(_), Some(e)) => Outcome::Failed(e),
        (o, _) => o,
    };
    let traj = Trajectory::assemble(n, sys.m(), false, sol.times, sol.states, sol.dense, sol.stats, opts, map);
    (traj, outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use crate::systems::{example_system, fd_gradient, fd_jacobian, ExampleParams, ExprSystem};
    use approx::assert_abs_diff_eq;

    fn scalar() -> HamiltonianSystem {
        build_hamiltonian(example_system("scalar", &ExampleParams::default()).unwrap()).unwrap()
    }

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(xs)
    }

    #[test]
    fn scalar_field_matches_hand_form() {
        let hs = scalar();
        for (x, p) in [(0.3, -0.2), (1.5, 0.7), (-1.0, 2.0)] {
            let z = hs.rhs(&v(&[x, p]));
            assert_abs_diff_eq!(z[0], -x + x * x - p, epsilon = 1e-14);
            assert_abs_diff_eq!(z[1], p - 2.0 * x * p, epsilon = 1e-14);
        }
        assert_eq!(hs.rhs(&v(&[1.0, 0.0])), v(&[0.0, 0.0]));
        assert_abs_diff_eq!(hs.hval(&v(&[0.5]), &v(&[0.1])), -0.03, epsilon = 1e-15);
    }

    #[test]
    fn canonical_structure() {
        for name in ["pendulum", "generator", "backstepping", "zero_dynamics"] {
            let hs = build_hamiltonian(example_system(name, &ExampleParams::default()).unwrap()).unwrap();
            let n = hs.n();
            let z = DVector::from_iterator(2 * n, (0..2 * n).map(|i| 0.3 * ((i as f64) * 1.7).sin() + 0.1));
            let grad = fd_gradient(|w| hs.hval_z(w), &z, 1e-6);
            let field = hs.rhs(&z);
            for i in 0..n {
                assert_abs_diff_eq!(field[i], grad[n + i], epsilon = 1e-7);
                assert_abs_diff_eq!(field[n + i], -grad[i], epsilon = 1e-7);
            }
            let jac = fd_jacobian(|w| hs.rhs(w), &DVector::zeros(2 * n), 1e-6);
            assert!((jac - &hs.sym.ham).amax() < 1e-8, "{name}");
        }
    }

    #[test]
    fn coordinates_round_trip() {
        let hs = scalar();
        let (x, p) = hs.from_xi_eta(&v(&[1.0]), &v(&[0.0]));
        assert_abs_diff_eq!(x[0], 1.0);
        assert_abs_diff_eq!(p[0], 0.0);
        let (xi, eta) = hs.to_xi_eta(&v(&[0.4]), &v(&[-0.3]));
        let (x, p) = hs.from_xi_eta(&xi, &eta);
        assert_abs_diff_eq!(x[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0], -0.3, epsilon = 1e-15);
    }

    #[test]
    fn residual_is_quadratic_near_origin() {
        let hs = build_hamiltonian(example_system("pendulum", &ExampleParams::default()).unwrap()).unwrap();
        let dir = v(&[0.3, -0.5]);
        let eta = v(&[0.2, 0.1]);
        let r1 = hs.nonlinear_residual(&(&dir * 1e-2), &(&eta * 1e-2)).0.norm();
        let r2 = hs.nonlinear_residual(&(&dir * 1e-3), &(&eta * 1e-3)).0.norm();
        assert!(r2 < r1 / 50.0);
    }

    #[test]
    fn logistic_decay_on_zero_costate() {
        let hs = scalar();
        let traj = hs.flow(&v(&[0.5, 0.0]), 6.0, 1e-10).unwrap();
        for t in [0.5, 2.0, 5.5] {
            let exact = 0.5 * (-t as f64).exp() / (0.5 + 0.5 * (-t as f64).exp());
            assert_abs_diff_eq!(traj.x_at(t).unwrap()[0], exact, epsilon = 1e-8);
            assert_eq!(traj.u_at(t).unwrap()[0], 0.0);
        }
        assert_eq!(traj.final_cost(), 0.0);
        assert!(traj.hamiltonian_drift() < 1e-12);
    }

    #[test]
    fn lqr_cost_matches_value_function() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = ExprSystem::linear(&DMatrix::zeros(1, 1), &one, &one).unwrap();
        let law = FeedbackLaw::linear(one.clone());
        let traj = simulate_controlled(&sys, &v(&[1.0]), &InputSource::Feedback(law), 40.0, &OdeOptions::with_tol(1e-11)).unwrap();
        assert_abs_diff_eq!(traj.final_cost(), 0.5, epsilon = 1e-8);
    }

    #[test]
    fn piecewise_constant_inputs() {
        // ẋ = u on the integrator chain: a bang of +1 then −1 returns to the start.
        let sys = ExprSystem::linear(&DMatrix::zeros(1, 1), &DMatrix::from_element(1, 1, 1.0), &DMatrix::zeros(0, 1)).unwrap();
        let source = InputSource::PiecewiseConstant {
            breakpoints: vec![0.0, 1.0],
            values: vec![v(&[1.0]), v(&[-1.0])],
        };
        let traj = simulate_controlled(&sys, &v(&[0.0]), &source, 2.0, &OdeOptions::default()).unwrap();
        assert_abs_diff_eq!(traj.final_state()[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(traj.x_at(1.0).unwrap()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(traj.final_cost(), 1.0, epsilon = 1e-12);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_input_on_stable_scalar_costs_nothing() {
        let sys = example_system("scalar", &ExampleParams::default()).unwrap();
        let traj = simulate_controlled(sys.as_ref(), &v(&[0.5]), &InputSource::Feedback(FeedbackLaw::zero(1)), 20.0, &OdeOptions::default()).unwrap();
        assert_eq!(traj.final_cost(), 0.0);
        assert!(traj.final_state()[0] < 1e-8);
    }

    #[test]
    fn csv_layout() {
        let hs = scalar();
        let traj = hs.flow(&v(&[0.2, 0.1]), 1.0, 1e-8).unwrap();
        assert_eq!(traj.csv_header(), ["t", "x1", "p1", "u1", "H", "cost"]);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let (_, rows) = crate::io::read_csv(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), traj.times.len());
    }
}
