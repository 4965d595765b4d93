//! Finite-horizon optimal control through the two-point boundary value
//! problem of the Hamiltonian system, the turnpike residence metric, and
//! infinite-horizon cost evaluation of a feedback.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{join_state, split_state, simulate_until, HamiltonianSystem, InputSource, Trajectory};
use crate::io::write_csv;
use crate::linalg::solve_lyapunov;
use crate::manifold::{coverage, CoverageSettings, CoverageStatus, ManifoldChart};
use crate::ode::{OdeOptions, Outcome};
use crate::systems::{fd_jacobian, ControlAffineSystem, FeedbackLaw};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteHorizonProblem {
    pub x0: Vec<f64>,
    pub xf: Vec<f64>,
    pub horizon: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    0.1
}

impl FiniteHorizonProblem {
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.x0.len() != n || self.xf.len() != n {
            return Err(Error::Dimension(format!(
                "x0 and xf must have length {n}, got {} and {}",
                self.x0.len(),
                self.xf.len()
            )));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::Dimension(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Dimension(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BvpSettings {
    /// Bound on the terminal mismatch and on the continuity defects.
    pub tol: f64,
    pub ode_tol: f64,
    pub max_newton: usize,
    /// Longest shooting segment; a single segment gives plain shooting.
    pub segment_length: f64,
    /// Relative finite-difference step for the sensitivities.
    pub fd_step: f64,
    /// Continuation levels for the boundary data, tried when Newton fails
    /// from the initial guess.
    pub homotopy: Vec<f64>,
}

impl Default for BvpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            ode_tol: 1e-10,
            max_newton: 30,
            segment_length: 0.5,
            fd_step: 1e-7,
            homotopy: vec![0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl BvpSettings {
    fn validate(&self) -> Result<()> {
        for (name, v) in [("tol", self.tol), ("ode_tol", self.ode_tol), ("segment_length", self.segment_length), ("fd_step", self.fd_step)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Dimension(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_newton == 0 {
            return Err(Error::Dimension("max_newton must be positive".into()));
        }
        Ok(())
    }
}

/// Starting point of the shooting iteration.
#[derive(Debug, Clone)]
pub enum BvpGuess {
    /// Solution of the linearized problem.
    Linear,
    /// Linearized node values with this initial costate.
    Costate(DVector<f64>),
    /// A solution for another horizon, stretched at its midpoint.
    Previous(Trajectory),
}

#[derive(Debug, Clone)]
pub struct BvpSolution {
    pub trajectory: Trajectory,
    pub p0: DVector<f64>,
    /// Largest terminal mismatch or continuity defect.
    pub residual: f64,
    pub iterations: usize,
    pub segments: usize,
}

impl BvpSolution {
    pub fn cost(&self) -> f64 {
        self.trajectory.final_cost()
    }
}

/// Solution of the linearized two-point problem at the node times, in the
/// decoupled coordinates so that long horizons stay well conditioned.
fn linear_nodes(hsys: &HamiltonianSystem, x0: &DVector<f64>, xf: &DVector<f64>, horizon: f64, times: &[f64]) -> Result<Vec<DVector<f64>>> {
    let n = hsys.n();
    let sym = &hsys.sym;
    let e_t = (&sym.f * horizon).exp();
    let mut lhs = DMatrix::zeros(2 * n, 2 * n);
    lhs.view_mut((0, 0), (n, n)).fill_with_identity();
    lhs.view_mut((0, n), (n, n)).copy_from(&(&sym.p2 * e_t.transpose()));
    lhs.view_mut((n, 0), (n, n)).copy_from(&e_t);
    lhs.view_mut((n, n), (n, n)).copy_from(&sym.p2);
    let rhs = join_state(x0, xf);
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NoConvergence("linearized boundary value problem is singular".into()))?;
    let (xi0, eta_t) = split_state(&sol, n);
    Ok(times
        .iter()
        .map(|&t| {
            let xi = (&sym.f * t).exp() * &xi0;
            let eta = (sym.f.transpose() * (horizon - t)).exp() * &eta_t;
            let (x, p) = hsys.from_xi_eta(&xi, &eta);
            join_state(&x, &p)
        })
        .collect())
}

/// Multiple-shooting unknowns: `p(0)` and the full state at each interior
/// node.
struct Shooting<'a> {
    hsys: &'a HamiltonianSystem,
    x0: DVector<f64>,
    xf: DVector<f64>,
    times: Vec<f64>,
    opts: OdeOptions,
    fd_step: f64,
}

impl Shooting<'_> {
    fn n(&self) -> usize {
        self.hsys.n()
    }

    fn segments(&self) -> usize {
        self.times.len() - 1
    }

    fn unknowns(&self) -> usize {
        let n = self.n();
        n + 2 * n * (self.segments() - 1)
    }

    fn start_of(&self, w: &DVector<f64>, k: usize) -> DVector<f64> {
        let n = self.n();
        if k == 0 {
            join_state(&self.x0, &w.rows(0, n).into_owned())
        } else {
            w.rows(n + 2 * n * (k - 1), 2 * n).into_owned()
        }
    }

    fn propagate(&self, z: &DVector<f64>, k: usize) -> Option<DVector<f64>> {
        let (traj, outcome) = self.hsys.flow_segment(z, self.times[k], self.times[k + 1], 0.0, &self.opts, |_, _| false);
        match outcome {
            Outcome::Completed => Some(traj.final_state().clone()),
            _ => None,
        }
    }

    /// Residual from the segment end points.
    fn residual_from(&self, w: &DVector<f64>, ends: &[DVector<f64>]) -> DVector<f64> {
        let n = self.n();
        let k_last = self.segments() - 1;
        let mut r = DVector::zeros(self.unknowns());
        for (k, end) in ends.iter().enumerate() {
            if k < k_last {
                let next = self.start_of(w, k + 1);
                r.rows_mut(2 * n * k, 2 * n).copy_from(&(end - next));
            } else {
                r.rows_mut(2 * n * k, n).copy_from(&(end.rows(0, n) - &self.xf));
            }
        }
        r
    }

    fn ends(&self, w: &DVector<f64>) -> Option<Vec<DVector<f64>>> {
        (0..self.segments()).map(|k| self.propagate(&self.start_of(w, k), k)).collect()
    }

    /// Block-bidiagonal Jacobian by forward differences of each segment.
    fn jacobian(&self, w: &DVector<f64>, ends: &[DVector<f64>]) -> Option<DMatrix<f64>> {
        let n = self.n();
        let size = self.unknowns();
        let k_last = self.segments() - 1;
        let blocks: Vec<Option<DMatrix<f64>>> = (0..self.segments())
            .into_par_iter()
            .map(|k| {
                let z = self.start_of(w, k);
                // Segment 0 depends on p(0) only.
                let cols: Vec<usize> = if k == 0 { (n..2 * n).collect() } else { (0..2 * n).collect() };
                let mut block = DMatrix::zeros(2 * n, cols.len());
                for (c, &i) in cols.iter().enumerate() {
                    let step = self.fd_step * z[i].abs().max(1.0);
                    let mut zp = z.clone();
                    zp[i] += step;
                    let end = self.propagate(&zp, k)?;
                    block.set_column(c, &((end - &ends[k]) / step));
                }
                Some(block)
            })
            .collect();
        let mut jac = DMatrix::zeros(size, size);
        for (k, block) in blocks.into_iter().enumerate() {
            let block = block?;
            let col0 = if k == 0 { 0 } else { n + 2 * n * (k - 1) };
            let rows = if k < k_last { 2 * n } else { n };
            jac.view_mut((2 * n * k, col0), (rows, block.ncols())).copy_from(&block.rows(0, rows));
            if k < k_last {
                let next = n + 2 * n * k;
                for i in 0..2 * n {
                    jac[(2 * n * k + i, next + i)] = -1.0;
                }
            }
        }
        Some(jac)
    }

    /// Damped Newton with halving line search; returns the unknowns, the
    /// final residual norm and the iteration count.
    fn newton(&self, mut w: DVector<f64>, tol: f64, max_iter: usize) -> (DVector<f64>, f64, usize, bool) {
        let Some(mut ends) = self.ends(&w) else {
            return (w, f64::INFINITY, 0, false);
        };
        let mut r = self.residual_from(&w, &ends);
        for it in 0..max_iter {
            let norm = r.amax();
            if norm <= tol {
                return (w, norm, it, true);
            }
            let Some(jac) = self.jacobian(&w, &ends) else {
                return (w, norm, it, false);
            };
            let Some(delta) = jac.lu().solve(&(-&r)) else {
                return (w, norm, it, false);
            };
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let trial = &w + &delta * lambda;
                if let Some(te) = self.ends(&trial) {
                    let tr = self.residual_from(&trial, &te);
                    if tr.norm() < (1.0 - 1e-4 * lambda) * r.norm() {
                        w = trial;
                        r = tr;
                        ends = te;
                        accepted = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !accepted {
                return (w, r.amax(), it + 1, false);
            }
        }
        let norm = r.amax();
        (w, norm, max_iter, norm <= tol)
    }

    fn pack(&self, nodes: &[DVector<f64>]) -> DVector<f64> {
        let n = self.n();
        let mut w = DVector::zeros(self.unknowns());
        w.rows_mut(0, n).copy_from(&nodes[0].rows(n, n));
        for k in 1..self.segments() {
            w.rows_mut(n + 2 * n * (k - 1), 2 * n).copy_from(&nodes[k]);
        }
        w
    }

    fn assemble(&self, w: &DVector<f64>) -> Result<Trajectory> {
        let mut out: Option<Trajectory> = None;
        let mut cost = 0.0;
        for k in 0..self.segments() {
            let (piece, outcome) = self.hsys.flow_segment(&self.start_of(w, k), self.times[k], self.times[k + 1], cost, &self.opts, |_, _| false);
            if let Outcome::Failed(e) = outcome {
                return Err(e);
            }
            cost = piece.final_cost();
            match out.as_mut() {
                None => out = Some(piece),
                Some(t) => t.append(piece),
            }
        }
        Ok(out.expect("at least one segment"))
    }
}

fn node_times(horizon: f64, segment_length: f64) -> Vec<f64> {
    let k = (horizon / segment_length).ceil().max(1.0) as usize;
    (0..=k).map(|i| horizon * i as f64 / k as f64).collect()
}

fn guess_nodes(hsys: &HamiltonianSystem, x0: &DVector<f64>, xf: &DVector<f64>, horizon: f64, times: &[f64], guess: &BvpGuess) -> Result<Vec<DVector<f64>>> {
    let n = hsys.n();
    match guess {
        BvpGuess::Linear => linear_nodes(hsys, x0, xf, horizon, times),
        BvpGuess::Costate(p0) => {
            if p0.len() != n {
                return Err(Error::Dimension(format!("costate guess has length {}, expected {n}", p0.len())));
            }
            let mut nodes = linear_nodes(hsys, x0, xf, horizon, times)?;
            nodes[0] = join_state(x0, p0);
            Ok(nodes)
        }
        BvpGuess::Previous(prev) => {
            if !prev.has_costate || prev.n != n {
                return Err(Error::Dimension("previous solution does not match the system".into()));
            }
            let t_prev = prev.t_end();
            let half = 0.5 * t_prev;
            let shift = horizon - t_prev;
            Ok(times
                .iter()
                .map(|&t| {
                    let s = if t <= half {
                        t
                    } else if t >= half + shift.max(0.0) {
                        (t - shift).clamp(0.0, t_prev)
                    } else {
                        half
                    };
                    let s = s.min(t_prev);
                    prev.state_at(s).unwrap_or_else(|| prev.final_state().clone())
                })
.enumerate()
                .map(|(i, z)| if i == 0 { join_state(x0, &z.rows(n, n).into_owned()) } else { z })
                .collect())
        }
    }
}

/// Solves `x(0) = x0`, `x(T) = xf` for the Hamiltonian system by damped
/// Newton shooting on `p(0)` (with interior nodes when `T` exceeds the
/// segment length), falling back to continuation in the boundary data.
pub fn solve_bvp(
    hsys: &HamiltonianSystem,
    x0: &DVector<f64>,
    xf: &DVector<f64>,
    horizon: f64,
    settings: &BvpSettings,
    guess: &BvpGuess,
) -> Result<BvpSolution> {
    settings.validate()?;
    let n = hsys.n();
    if x0.len() != n || xf.len() != n {
        return Err(Error::Dimension(format!("x0 and xf must have length {n}")));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::Dimension(format!("horizon must be positive, got {horizon}")));
    }
    let times = node_times(horizon, settings.segment_length);
    let shooting = |scale: f64| Shooting {
        hsys,
        x0: x0 * scale,
        xf: xf * scale,
        times: times.clone(),
        opts: OdeOptions::with_tol(settings.ode_tol),
        fd_step: settings.fd_step,
    };

    let full = shooting(1.0);
    let nodes = guess_nodes(hsys, x0, xf, horizon, &times, guess)?;
    let (mut w, mut res, mut iters, mut ok) = full.newton(full.pack(&nodes), settings.tol, settings.max_newton);
    let mut best = (w.clone(), res);

    if !ok {
        // Continuation from the linearized solution of the scaled problem.
        let mut current: Option<DVector<f64>> = None;
        for &s in &settings.homotopy {
            let sh = shooting(s);
            let start = match &current {
                Some(prev) => prev.clone(),
                None => sh.pack(&linear_nodes(hsys, &sh.x0, &sh.xf, horizon, &times)?),
            };
            let (ws, rs, is, oks) = sh.newton(start, settings.tol, settings.max_newton);
            iters += is;
            if !oks {
                if rs < best.1 {
                    best = (ws, rs);
                }
                break;
            }
            current = Some(ws.clone());
            if s == 1.0 {
                w = ws;
                res = rs;
                ok = true;
            }
        }
    }
    if !ok {
        if res < best.1 {
            best = (w, res);
        }
        return Err(Error::ShootingDiverged {
            residual: best.1,
            p0: best.0.rows(0, n).iter().copied().collect(),
        });
    }
    let trajectory = full.assemble(&w)?;
    Ok(BvpSolution {
        p0: w.rows(0, n).into_owned(),
        trajectory,
        residual: res,
        iterations: iters,
        segments: full.segments(),
    })
}

/// The two-point problem with default settings and an optional initial
/// costate; returns the `(x, p)` trajectory with `u = −gᵀp`.
pub fn solve_finite_bvp(
    hsys: &HamiltonianSystem,
    x0: &DVector<f64>,
    xf: &DVector<f64>,
    horizon: f64,
    tol: f64,
    p0_guess: Option<&DVector<f64>>,
) -> Result<Trajectory> {
    let settings = BvpSettings { tol, ..Default::default() };
    let guess = p0_guess.map_or(BvpGuess::Linear, |p| BvpGuess::Costate(p.clone()));
    solve_bvp(hsys, x0, xf, horizon, &settings, &guess).map(|s| s.trajectory)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residence {
    /// Measure of `{t : s(t) > ε}`.
    pub measure: f64,
    /// First time the signal drops to `ε` or below; `None` if it never does.
    pub first_exit: Option<f64>,
    /// Last time the signal rises above `ε`; `None` if it never does after
    /// having been below.
    pub last_entry: Option<f64>,
    /// All threshold crossings in increasing order.
    pub crossings: Vec<f64>,
}

/// Measure of the super-level set `{s > ε}` on `[knots₀, knots_last]`.
/// Each knot interval is sampled at `subdivisions` points and every sign
/// change of `s − ε` is located by bisection.
pub fn residence_measure<S: Fn(f64) -> f64>(signal: S, knots: &[f64], epsilon: f64, subdivisions: usize) -> Residence {
    let above = |t: f64| signal(t) > epsilon;
    let mut grid: Vec<f64> = Vec::new();
    for w in knots.windows(2) {
        for k in 0..subdivisions.max(1) {
            grid.push(w[0] + (w[1] - w[0]) * k as f64 / subdivisions.max(1) as f64);
        }
    }
    if let Some(&last) = knots.last() {
        grid.push(last);
    }
    if grid.len() < 2 {
        return Residence {
            measure: 0.0,
            first_exit: None,
            last_entry: None,
            crossings: Vec::new(),
        };
    }
    let mut crossings = Vec::new();
    let mut measure = 0.0;
    let mut state = above(grid[0]);
    let mut since = grid[0];
    let mut first_exit = None;
    let mut last_entry = None;
    let mut was_below = !state;
    for w in grid.windows(2) {
        let next = above(w[1]);
        if next == state {
            continue;
        }
        let (mut lo, mut hi) = (w[0], w[1]);
        for _ in 0..200 {
            if hi - lo <= 1e-13 * (1.0 + hi.abs()) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if above(mid) == state {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t = 0.5 * (lo + hi);
        crossings.push(t);
        if state {
            measure += t - since;
            if first_exit.is_none() {
                first_exit = Some(t);
            }
            was_below = true;
        } else {
            since = t;
            if was_below {
                last_entry = Some(t);
            }
        }
        state = next;
    }
    if state {
        measure += grid[grid.len() - 1] - since;
    }
    Residence {
        measure,
        first_exit,
        last_entry,
        crossings,
    }
}

/// Residence of `|u(t)| + |x(t)|` above `ε` along a trajectory, from its
/// dense output.
pub fn turnpike_metric(traj: &Trajectory, epsilon: f64) -> Residence {
    let mut knots = traj.dense.knots();
    if knots.is_empty() {
        knots = traj.times.clone();
    }
    let signal = |t: f64| match (traj.x_at(t), traj.u_at(t)) {
        (Some(x), Some(u)) => x.norm() + u.norm(),
        _ => f64::NAN,
    };
    residence_measure(signal, &knots, epsilon, 8)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonEntry {
    pub horizon: f64,
    pub bvp_converged: bool,
    pub residence_measure: f64,
    pub first_exit: Option<f64>,
    pub last_entry: Option<f64>,
    pub crossings: Vec<f64>,
    pub cost: f64,
    pub shooting_residual: f64,
    pub iterations: usize,
    pub hamiltonian_drift: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SufficientCondition {
    pub x0_status: CoverageStatus,
    pub xf_status: CoverageStatus,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnpikeReport {
    pub x0: Vec<f64>,
    pub xf: Vec<f64>,
    pub epsilon: f64,
    pub entries: Vec<HorizonEntry>,
    /// Max over min residence measure across converged horizons.
    pub uniformity: f64,
    pub all_converged: bool,
    pub sufficient_condition: Option<SufficientCondition>,
    pub settings: BvpSettings,
}

impl TurnpikeReport {
    pub fn csv_header() -> Vec<String> {
        ["T", "converged", "residence", "first_exit", "last_entry", "J_T", "residual", "iterations"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let rows = self.entries.iter().map(|e| {
            vec![
                e.horizon,
                f64::from(u8::from(e.bvp_converged)),
                e.residence_measure,
                e.first_exit.unwrap_or(f64::NAN),
                e.last_entry.unwrap_or(f64::NAN),
                e.cost,
                e.shooting_residual,
                e.iterations as f64,
            ]
        });
        write_csv(writer, &Self::csv_header(), rows)
    }

    /// Records whether `x0` is covered by the stable chart and `xf` by the
    /// unstable one.
    pub fn check_sufficient_condition(
        &mut self,
        hsys: &HamiltonianSystem,
        stable: &ManifoldChart,
        unstable: &ManifoldChart,
        settings: &CoverageSettings,
    ) -> Result<&SufficientCondition> {
        let x0 = DVector::from_column_slice(&self.x0);
        let xf = DVector::from_column_slice(&self.xf);
        let s = coverage(stable, hsys, &[x0], settings)?;
        let u = coverage(unstable, hsys, &[xf], settings)?;
        let x0_status = s.queries[0].status;
        let xf_status = u.queries[0].status;
        Ok(self.sufficient_condition.insert(SufficientCondition {
            x0_status,
            xf_status,
            satisfied: x0_status == CoverageStatus::Covered && xf_status == CoverageStatus::Covered,
        }))
    }
}

fn entry(horizon: f64, epsilon: f64, sol: &Result<BvpSolution>) -> HorizonEntry {
    match sol {
        Ok(s) => {
            let r = turnpike_metric(&s.trajectory, epsilon);
            HorizonEntry {
                horizon,
                bvp_converged: true,
                residence_measure: r.measure,
                first_exit: r.first_exit,
                last_entry: r.last_entry,
                crossings: r.crossings,
                cost: s.cost(),
                shooting_residual: s.residual,
                iterations: s.iterations,
                hamiltonian_drift: s.trajectory.hamiltonian_drift(),
                error: None,
            }
        }
        Err(e) => {
            let residual = match e {
                Error::ShootingDiverged { residual, .. } => *residual,
                _ => f64::NAN,
            };
            HorizonEntry {
                horizon,
                bvp_converged: false,
                residence_measure: f64::NAN,
                first_exit: None,
                last_entry: None,
                crossings: Vec::new(),
                cost: f64::NAN,
                shooting_residual: residual,
                iterations: 0,
                hamiltonian_drift: f64::NAN,
                error: Some(e.to_string()),
            }
        }
    }
}

/// A turnpike report together with the solved trajectories, `None` where
/// the boundary value problem failed.
#[derive(Debug, Clone)]
pub struct TurnpikeRun {
    pub report: TurnpikeReport,
    pub trajectories: Vec<Option<Trajectory>>,
}

/// Solves the boundary value problem for each horizon and summarizes the
/// residence measures. With `warm_start` the horizons are solved in order,
/// each starting from the previous solution; otherwise independently.
pub fn turnpike_report(
    hsys: &HamiltonianSystem,
    x0: &DVector<f64>,
    xf: &DVector<f64>,
    horizons: &[f64],
    epsilon: f64,
    warm_start: bool,
    settings: &BvpSettings,
) -> Result<TurnpikeReport> {
    turnpike_run(hsys, x0, xf, horizons, epsilon, warm_start, settings).map(|r| r.report)
}

/// [`turnpike_report`] keeping the trajectories.
pub fn turnpike_run(
    hsys: &HamiltonianSystem,
    x0: &DVector<f64>,
    xf: &DVector<f64>,
    horizons: &[f64],
    epsilon: f64,
    warm_start: bool,
    settings: &BvpSettings,
) -> Result<TurnpikeRun> {
    if horizons.is_empty() {
        return Err(Error::Dimension("at least one horizon is required".into()));
    }
    if horizons.windows(2).any(|w| w[1] <= w[0]) || horizons[0] <= 0.0 {
        return Err(Error::Dimension("horizons must be positive and increasing".into()));
    }
    FiniteHorizonProblem {
        x0: x0.iter().copied().collect(),
        xf: xf.iter().copied().collect(),
        horizon: horizons[0],
        epsilon,
    }
    .validate(hsys.n())?;
    settings.validate()?;

    let solutions: Vec<Result<BvpSolution>> = if warm_start {
        let mut out: Vec<Result<BvpSolution>> = Vec::with_capacity(horizons.len());
        for &t in horizons {
            let guess = out
                .iter()
                .rev()
                .find_map(|r| r.as_ref().ok())
                .map_or(BvpGuess::Linear, |s| BvpGuess::Previous(s.trajectory.clone()));
            let mut sol = solve_bvp(hsys, x0, xf, t, settings, &guess);
            if sol.is_err() && !matches!(guess, BvpGuess::Linear) {
                sol = solve_bvp(hsys, x0, xf, t, settings, &BvpGuess::Linear);
            }
            out.push(sol);
        }
        out
    } else {
        horizons
            .par_iter()
            .map(|&t| solve_bvp(hsys, x0, xf, t, settings, &BvpGuess::Linear))
            .collect()
    };

    let entries: Vec<HorizonEntry> = horizons.iter().zip(&solutions).map(|(&t, s)| entry(t, epsilon, s)).collect();
    let measures: Vec<f64> = entries.iter().filter(|e| e.bvp_converged).map(|e| e.residence_measure).collect();
    let max = measures.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = measures.iter().copied().fold(f64::INFINITY, f64::min);
    let uniformity = if measures.is_empty() {
        f64::NAN
    } else if max == 0.0 {
        1.0
    } else if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    };
    let report = TurnpikeReport {
        x0: x0.iter().copied().collect(),
        xf: xf.iter().copied().collect(),
        epsilon,
        all_converged: entries.iter().all(|e| e.bvp_converged),
        entries,
        uniformity,
        sufficient_condition: None,
        settings: settings.clone(),
    };
    Ok(TurnpikeRun {
        report,
        trajectories: solutions.into_iter().map(|s| s.ok().map(|s| s.trajectory)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfiniteCostSettings {
    /// Target size of the quadratic tail bound; sets the switching radius.
    pub tail_tol: f64,
    pub t_max: f64,
    pub ode_tol: f64,
}

impl Default for InfiniteCostSettings {
    fn default() -> Self {
        Self {
            tail_tol: 1e-10,
            t_max: 200.0,
            ode_tol: 1e-11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfiniteCost {
    /// Integrated cost plus the quadratic tail estimate.
    pub value: f64,
    pub integrated: f64,
    pub tail_estimate: f64,
    /// `κ |x_s|²` with `κ` the top eigenvalue of the tail model.
    pub tail_bound: f64,
    pub switch_time: f64,
    pub switch_state: Vec<f64>,
}

/// Cost of the closed loop `u = k(x)` from `x0` on `[0, ∞)`: integrated
/// until `κ|x|² ≤ tail_tol`, then closed with the local quadratic value
/// `½ xᵀWx` of the linearized loop, `A_clᵀW + W A_cl = −(D²h(0) + KᵀK)`.
pub fn infinite_cost(sys: &dyn ControlAffineSystem, feedback: &FeedbackLaw, x0: &DVector<f64>, settings: &InfiniteCostSettings) -> Result<InfiniteCost> {
    let n = sys.n();
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has length {}, expected {n}", x0.len())));
    }
    let origin = DVector::zeros(n);
    let gain = fd_jacobian(|x| feedback.control(x).unwrap_or_else(|_| DVector::from_element(sys.m(), f64::NAN)), &origin, 1e-6);
    let a_cl = sys.df(&origin) + sys.g(&origin) * &gain;
    let q = sys.d2h0() + gain.transpose() * &gain;
    let w = solve_lyapunov(&a_cl.transpose(), &(-q))?;
    let kappa = 0.5 * w.symmetric_eigenvalues().max().max(0.0);
    let radius = if kappa > 0.0 { (settings.tail_tol / kappa).sqrt() } else { 0.0 };

    let opts = OdeOptions::with_tol(settings.ode_tol);
    let (traj, outcome) = simulate_until(sys, x0, &InputSource::Feedback(feedback.clone()), settings.t_max, &opts, |_, x| {
        x.norm() <= radius
    })?;
    let xs = traj.final_state().clone();
    let reached = matches!(outcome, Outcome::Stopped) || xs.norm() <= radius;
    if let Outcome::Failed(e) = outcome {
        return Err(e);
    }
    if !reached && kappa > 0.0 {
        return Err(Error::NoConvergence(format!(
            "|x| = {:e} did not reach the switching radius {radius:e} by t = {}",
            xs.norm(),
            settings.t_max
        )));
    }
    let integrated = traj.final_cost();
    let tail_estimate = 0.5 * xs.dot(&(&w * &xs));
    Ok(InfiniteCost {
        value: integrated + tail_estimate,
        integrated,
        tail_estimate,
        tail_bound: kappa * xs.norm_squared(),
        switch_time: traj.t_end(),
        switch_state: xs.iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::build_hamiltonian;
    use crate::systems::ExprSystem;
    use std::sync::Arc;

    fn lqr_scalar() -> HamiltonianSystem {
        let one = DMatrix::from_element(1, 1, 1.0);
        build_hamiltonian(Arc::new(ExprSystem::linear(&DMatrix::zeros(1, 1), &one, &one).unwrap())).unwrap()
    }

    #[test]
    fn equilibrium_bvp_is_trivial() {
        let hs = lqr_scalar();
        let z = DVector::zeros(1);
        let traj = solve_finite_bvp(&hs, &z, &z, 3.0, 1e-10, None).unwrap();
        assert!(traj.states.iter().all(|s| s.amax() == 0.0));
        assert_eq!(traj.final_cost(), 0.0);
    }

    #[test]
    fn synthetic_residence() {
        let eps = 0.1;
        let signal = |t: f64| if t <= 1.0 || t >= 9.0 { 2.0 * eps } else { 0.0 };
        let knots: Vec<f64> = (0..=10).map(|k| k as f64 * 0.95 + 0.2 * (k == 10) as u8 as f64 * 2.5).map(|t: f64| t.min(10.0)).collect();
        let r = residence_measure(signal, &knots, eps, 8);
        assert!((r.measure - 2.0).abs() <= 1e-6, "{}", r.measure);
        assert!((r.first_exit.unwrap() - 1.0).abs() <= 1e-9);
        assert!((r.last_entry.unwrap() - 9.0).abs() <= 1e-9);
        let r = residence_measure(|_| 2.0 * eps, &[0.0, 4.0, 10.0], eps, 8);
        assert_eq!(r.measure, 10.0);
        assert_eq!(r.first_exit, None);
        let r = residence_measure(|_| 0.5 * eps, &[0.0, 10.0], eps, 8);
        assert_eq!(r.measure, 0.0);
    }

    #[test]
    fn node_times_cover_horizon() {
        assert_eq!(node_times(5.0, 2.0), vec![0.0, 5.0 / 3.0, 10.0 / 3.0, 5.0]);
        assert_eq!(node_times(1.0, 2.0), vec![0.0, 1.0]);
    }

    #[test]
    fn rejects_empty_horizons() {
        let hs = lqr_scalar();
        let x = DVector::from_element(1, 1.0);
        assert!(turnpike_report(&hs, &x, &x, &[], 0.1, false, &BvpSettings::default()).is_err());
        assert!(turnpike_report(&hs, &x, &x, &[5.0, 2.0], 0.1, false, &BvpSettings::default()).is_err());
    }

    #[test]
    fn scalar_lqr_bvp_matches_closed_form() {
        // x' = u, cost ½∫u² + x²: x = x0 sinh(T−t)/sinh T, p = x0 cosh(T−t)/sinh T.
        let hs = lqr_scalar();
        let (x0, t_end) = (1.0, 5.0);
        let sol = solve_bvp(&hs, &DVector::from_element(1, x0), &DVector::zeros(1), t_end, &BvpSettings::default(), &BvpGuess::Linear).unwrap();
        let mut err: f64 = 0.0;
        for (t, z) in sol.trajectory.times.iter().zip(&sol.trajectory.states) {
            let x = x0 * (t_end - t).sinh() / t_end.sinh();
            let p = x0 * (t_end - t).cosh() / t_end.sinh();
            err = err.max((z[0] - x).abs()).max((z[1] - p).abs());
        }
        assert!(err <= 1e-6, "sup error {err:e}");
        let cost = 0.5 * x0 * x0 / t_end.tanh();
        assert!((sol.cost() - cost).abs() <= 1e-6, "{} vs {cost}", sol.cost());
    }

    #[test]
    fn warm_start_reaches_same_solution() {
        let hs = lqr_scalar();
        let x0 = DVector::from_element(1, 1.0);
        let xf = DVector::from_element(1, 0.5);
        let cold = turnpike_report(&hs, &x0, &xf, &[4.0, 8.0], 0.1, false, &BvpSettings::default()).unwrap();
        let warm = turnpike_report(&hs, &x0, &xf, &[4.0, 8.0], 0.1, true, &BvpSettings::default()).unwrap();
        for (a, b) in cold.entries.iter().zip(&warm.entries) {
            assert!((a.cost - b.cost).abs() <= 1e-7);
            assert!((a.residence_measure - b.residence_measure).abs() <= 1e-6);
        }
    }

    #[test]
    fn lqr_infinite_cost() {
        // Riccati solution is 1, so the cost of u = −x from x0 = 1 is ½.
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = ExprSystem::linear(&DMatrix::zeros(1, 1), &one, &one).unwrap();
        let law = FeedbackLaw::linear(one.clone());
        let c = infinite_cost(&sys, &law, &DVector::from_element(1, 1.0), &InfiniteCostSettings::default()).unwrap();
        assert!((c.value - 0.5).abs() <= 1e-6, "{c:?}");
        assert!(c.tail_bound <= 1e-9);
    }
}
