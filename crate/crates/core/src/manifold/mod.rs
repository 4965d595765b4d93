//! Stable and unstable manifolds of the Hamiltonian system at the origin.
//!
//! The local graph is computed in the `(ξ, η)` coordinates by a
//! Lyapunov–Perron iteration and then extended by flowing the Hamiltonian
//! system away from the origin (backward in time for the stable manifold).

mod coverage;
pub mod perron;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{join_state, split_state, HamiltonianSystem};
use crate::linalg::spectral_abscissa;
use crate::ode::{integrate, OdeOptions, Outcome};
use crate::sampling::sphere_directions;

pub use coverage::{costate_estimate, coverage, manifold_feedback, CoverageEstimate, CoverageMethod, CoverageSettings, CoverageStatus, QueryResult, Witness};
use perron::{Forcing, PerronGrid, PerronSolution};

const FLOW_CHECK_ESCAPE: f64 = 20.0;
const FLOW_CHECK_STEPS: usize = 50_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartKind {
    Stable,
    Unstable,
}

impl ChartKind {
    /// Sign of the Hamiltonian field used to move away from the origin.
    fn outward_sign(self) -> f64 {
        match self {
            ChartKind::Stable => -1.0,
            ChartKind::Unstable => 1.0,
        }
    }
}

/// Axis-aligned box for `x` plus a bound on `|p|∞`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub p_max: f64,
}

impl Bounds {
    pub fn cube(n: usize, radius: f64, p_max: f64) -> Self {
        Self {
            lower: vec![-radius; n],
            upper: vec![radius; n],
            p_max,
        }
    }

    pub fn contains(&self, x: &DVector<f64>, p: &DVector<f64>) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| *v >= *lo && *v <= *hi)
            && p.amax() <= self.p_max
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Dimension(format!("bounds must have {n} entries per side")));
        }
        if self.lower.iter().zip(&self.upper).any(|(lo, hi)| !(lo < hi)) || !(self.p_max > 0.0) {
            return Err(Error::Dimension("bounds must satisfy lower < upper and p_max > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldSettings {
    /// Sup-norm tolerance of the fixed-point iteration.
    pub tol: f64,
    pub max_iter: usize,
    /// Iteration horizon; chosen from the decay of `e^{Ft}` when absent.
    pub horizon: Option<f64>,
    /// Radius of the outermost seed shell.
    pub local_radius: f64,
    pub shells: usize,
    /// Seed directions per inner shell.
    pub directions: usize,
    /// Seed directions on the outermost shell; each starts one extended orbit.
    pub orbits: usize,
    /// Longest flow time used to extend each orbit.
    pub extend_time: f64,
    /// Planar charts insert orbits between neighbours further apart than
    /// this.
    pub orbit_gap: f64,
    pub max_orbits: usize,
    /// Minimum spacing between stored points of one orbit.
    pub store_ds: f64,
    /// Store at least one point per this much flow time.
    pub store_dt: f64,
    pub ode_tol: f64,
    pub check_tol: f64,
    pub energy_tol: f64,
    /// Extra time allowed by the flow check beyond the time spent away from
    /// the local chart; derived from the decay rate when absent.
    pub settle_time: Option<f64>,
    /// Defaults to the cube `|x|∞ ≤ 3`, `|p|∞ ≤ 100`.
    pub bounds: Option<Bounds>,
}

impl Default for ManifoldSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            horizon: None,
            local_radius: 0.3,
            shells: 3,
            directions: 16,
            orbits: 64,
            extend_time: 20.0,
            orbit_gap: 0.1,
            max_orbits: 256,
            store_ds: 0.01,
            store_dt: 0.5,
            ode_tol: 1e-10,
            check_tol: 1e-3,
            energy_tol: 1e-6,
            settle_time: None,
            bounds: None,
        }
    }
}

impl ManifoldSettings {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tol", self.tol),
            ("local_radius", self.local_radius),
            ("extend_time", self.extend_time),
            ("store_ds", self.store_ds),
            ("store_dt", self.store_dt),
            ("ode_tol", self.ode_tol),
            ("check_tol", self.check_tol),
            ("energy_tol", self.energy_tol),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Dimension(format!("{name} must be positive, got {v}")));
            }
        }
        if self.shells == 0 || self.directions == 0 || self.orbits == 0 || self.max_iter == 0 {
            return Err(Error::Dimension("shells, directions, orbits and max_iter must be positive".into()));
        }
        Ok(())
    }

    pub fn bounds_for(&self, n: usize) -> Bounds {
        self.bounds.clone().unwrap_or_else(|| Bounds::cube(n, 3.0, 100.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub xi: Vec<f64>,
    pub eta: Vec<f64>,
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub radius: f64,
    pub converged: bool,
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointSource {
    /// A converged seed of the local graph.
    Seed,
    /// A sample of a converged local orbit.
    Local,
    /// Produced by extending an orbit with the Hamiltonian flow.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartPoint {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    #[serde(rename = "H")]
    pub h: f64,
    /// `|z|` at the end of the flow check that accepted this point.
    pub flow_check: f64,
    /// Index into the chart's seeds.
    pub seed: usize,
    /// Flow time from the seed towards this point, measured away from the
    /// origin; negative for samples between the seed and the origin.
    pub tau: f64,
    pub source: PointSource,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Rejections {
    pub seeds: usize,
    pub energy: usize,
    pub flow: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldChart {
    pub kind: ChartKind,
    pub tol: f64,
    pub local_radius: f64,
    pub horizon: f64,
    pub settle_time: f64,
    /// Finite-difference estimate of `‖Dθ(0)‖`.
    pub tangent_defect: f64,
    pub seeds: Vec<SeedRecord>,
    pub global_points: Vec<ChartPoint>,
    pub rejected: Rejections,
    pub settings: ManifoldSettings,
}

impl ManifoldChart {
    pub fn n(&self) -> usize {
        self.seeds.first().map_or(0, |s| s.x.len())
    }

    pub fn max_abs_hamiltonian(&self) -> f64 {
        self.global_points.iter().map(|p| p.h.abs()).fold(0.0, f64::max)
    }

    /// `(x, p)` of every stored point.
    pub fn points(&self) -> impl Iterator<Item = (DVector<f64>, DVector<f64>)> + '_ {
        self.global_points
            .iter()
            .map(|c| (DVector::from_column_slice(&c.x), DVector::from_column_slice(&c.p)))
    }

    /// Header and rows for a CSV point cloud of the `x` projection.
    pub fn projection_table(&self) -> (Vec<String>, Vec<Vec<f64>>) {
        let n = self.n();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.extend((1..=n).map(|i| format!("p{i}")));
        header.push("H".into());
        let rows = self
            .global_points
            .iter()
            .map(|c| c.x.iter().chain(&c.p).copied().chain(std::iter::once(c.h)).collect())
            .collect();
        (header, rows)
    }
}

/// Chart-specific view of the `(ξ, η)` system: the iteration variable `a`
/// lives on the contracting block and `b = θ(a)` on the expanding one.
pub(crate) struct ChartFrame<'a> {
    pub hsys: &'a HamiltonianSystem,
    pub kind: ChartKind,
}

impl Forcing for ChartFrame<'_> {
    fn forcing(&self, a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match self.kind {
            ChartKind::Stable => self.hsys.nonlinear_residual(a, b),
            ChartKind::Unstable => {
                let (nu1, nu2) = self.hsys.nonlinear_residual(b, a);
                (-nu2, -nu1)
            }
        }
    }
}

impl ChartFrame<'_> {
    /// `(S, U)` of the iteration.
    fn matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let f = &self.hsys.sym.f;
        match self.kind {
            ChartKind::Stable => (f.clone(), -f.transpose()),
            ChartKind::Unstable => (f.transpose(), -f),
        }
    }

    pub fn grid(&self, settings: &ManifoldSettings) -> PerronGrid {
        let (s, u) = self.matrices();
        PerronGrid::new(&s, &u, settings.tol, settings.horizon)
    }

    pub fn to_xp(&self, a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match self.kind {
            ChartKind::Stable => self.hsys.from_xi_eta(a, b),
            ChartKind::Unstable => self.hsys.from_xi_eta(b, a),
        }
    }

    /// Chart coordinates `(a, b)` of a phase-space state.
    pub fn ab(&self, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (x, p) = split_state(z, self.hsys.n());
        let (xi, eta) = self.hsys.to_xi_eta(&x, &p);
        match self.kind {
            ChartKind::Stable => (xi, eta),
            ChartKind::Unstable => (eta, xi),
        }
    }

    fn xi_eta(&self, a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match self.kind {
            ChartKind::Stable => (a.clone(), b.clone()),
            ChartKind::Unstable => (b.clone(), a.clone()),
        }
    }

    /// The Hamiltonian field, signed to point away from the origin along
    /// the chart.
    pub fn outward(&self, z: &DVector<f64>) -> DVector<f64> {
        self.hsys.rhs(z) * self.kind.outward_sign()
    }

    pub fn inward(&self, z: &DVector<f64>) -> DVector<f64> {
        self.hsys.rhs(z) * -self.kind.outward_sign()
    }
}

/// Seeds on `shells` spheres of radii `r, r/2, r/4, …`, outermost shell
/// first: `orbits` low-discrepancy directions on the outermost sphere and
/// `directions` on the others.
pub fn default_seeds(n: usize, settings: &ManifoldSettings) -> Vec<DVector<f64>> {
    let outer = sphere_directions(n, settings.orbits);
    let inner = sphere_directions(n, settings.directions);
    (0..settings.shells)
        .flat_map(|k| {
            let r = settings.local_radius / 2f64.powi(k as i32);
            let dirs = if k == 0 { &outer } else { &inner };
            dirs.iter().map(move |d| d * r)
        })
        .collect()
}

fn settle_time(hsys: &HamiltonianSystem, settings: &ManifoldSettings) -> f64 {
    settings.settle_time.unwrap_or_else(|| {
        let rate = (-spectral_abscissa(&hsys.sym.f)).max(1e-3);
        let scale = 1.0 + hsys.sym.l.norm();
        (2.0 * (10.0 * scale * settings.local_radius / settings.check_tol).ln() / rate + 5.0).max(5.0)
    })
}

/// Local graph used as a fallback by [`flow_check`].
pub(crate) struct LocalGraph<'a> {
    pub grid: &'a PerronGrid,
    pub radius: f64,
}

/// Forward (inward) flow from `z` for at most `t_max`. Passes when the orbit
/// enters the `check_tol` ball; the returned value is then `|z|` at entry.
///
/// With a stiff spectrum the forward flow amplifies integration error along
/// the expanding directions faster than the orbit contracts, and true
/// manifold points can fail that test. The fallback flows only until the
/// chart coordinate is inside half the local radius and compares the state
/// with a fresh solve of the local graph there; the returned value is then
/// the graph defect.
pub(crate) fn flow_check(frame: &ChartFrame<'_>, z: &DVector<f64>, t_max: f64, settings: &ManifoldSettings, local: Option<&LocalGraph<'_>>) -> (bool, f64) {
    if z.norm() < settings.check_tol {
        return (true, z.norm());
    }
    // Orbits that leave the chart far behind are rejected early.
    let opts = OdeOptions {
        escape_norm: FLOW_CHECK_ESCAPE * z.norm().max(1.0),
        max_steps: FLOW_CHECK_STEPS,
        ..OdeOptions::with_tol(settings.ode_tol)
    };
    let sol = integrate(|_, y| frame.inward(y), 0.0, z, t_max, &opts, |_, y| y.norm() < settings.check_tol);
    let end = sol.last().1.norm();
    if matches!(sol.outcome, Outcome::Stopped) {
        return (true, end);
    }
    let Some(graph) = local.filter(|g| g.radius > 0.0) else {
        return (false, end);
    };
    let inner = 0.5 * graph.radius;
    let sol = integrate(|_, y| frame.inward(y), 0.0, z, t_max, &opts, |_, y| frame.ab(y).0.norm() <= inner);
    if !matches!(sol.outcome, Outcome::Stopped) {
        return (false, end);
    }
    let (a, b) = frame.ab(sol.last().1);
    match graph.grid.solve(frame, &a, settings.tol, settings.max_iter) {
        Ok(g) => {
            let defect = (g.b0 - b).norm();
            (defect <= settings.check_tol * graph.radius, defect)
        }
        Err(_) => (false, end),
    }
}

/// Solves the local graph at the given seeds.
pub fn local_manifold(hsys: &HamiltonianSystem, kind: ChartKind, seeds: &[DVector<f64>], settings: &ManifoldSettings) -> Result<ManifoldChart> {
    settings.validate()?;
    let n = hsys.n();
    if let Some(s) = seeds.iter().find(|s| s.len() != n) {
        return Err(Error::Dimension(format!("seed has length {}, expected {n}", s.len())));
    }
    let frame = ChartFrame { hsys, kind };
    let grid = frame.grid(settings);
    let settle = settle_time(hsys, settings);

    let solutions: Vec<Result<PerronSolution>> =
        seeds.par_iter().map(|a0| grid.solve(&frame, a0, settings.tol, settings.max_iter)).collect();

    let mut records = Vec::with_capacity(seeds.len());
    let mut points = Vec::new();
    let mut rejected = Rejections::default();
    let mut local_radius: f64 = 0.0;
    let mut failed_radius = f64::INFINITY;
    for (idx, (a0, sol)) in seeds.iter().zip(solutions).enumerate() {
        let radius = a0.norm();
        match sol {
            Ok(sol) => {
                let (xi, eta) = frame.xi_eta(&sol.a0, &sol.b0);
                let (x, p) = frame.to_xp(&sol.a0, &sol.b0);
                records.push(SeedRecord {
                    xi: xi.as_slice().to_vec(),
                    eta: eta.as_slice().to_vec(),
                    x: x.as_slice().to_vec(),
                    p: p.as_slice().to_vec(),
                    radius,
                    converged: true,
                    residuals: sol.residuals.clone(),
                });
                local_radius = local_radius.max(radius);
                points.extend(local_orbit_points(&frame, idx, &sol, &grid, settings, radius));
            }
            Err(Error::NoConvergence(_)) => {
                rejected.seeds += 1;
                failed_radius = failed_radius.min(radius);
                let (x, p) = frame.to_xp(a0, &DVector::zeros(n));
                records.push(SeedRecord {
                    xi: Vec::new(),
                    eta: Vec::new(),
                    x: x.as_slice().to_vec(),
                    p: p.as_slice().to_vec(),
                    radius,
                    converged: false,
                    residuals: Vec::new(),
                });
            }
            Err(e) => return Err(e),
        }
    }
    if records.iter().all(|r| !r.converged) && !seeds.is_empty() {
        return Err(Error::NoConvergence("no seed of the local chart converged".into()));
    }
    // The ball where every tried seed converged.
    let local_radius = seeds
        .iter()
        .map(|s| s.norm())
        .filter(|r| *r < failed_radius)
        .fold(0.0f64, f64::max)
        .min(local_radius);

    // Energy pinning and per-seed flow checks.
    let graph = LocalGraph { grid: &grid, radius: local_radius };
    let mut accepted = Vec::with_capacity(points.len());
    let seed_checks: Vec<(bool, f64)> = records
        .par_iter()
        .map(|r| {
            if !r.converged {
                return (false, f64::NAN);
            }
            let z = join_state(&DVector::from_column_slice(&r.x), &DVector::from_column_slice(&r.p));
            flow_check(&frame, &z, settle, settings, Some(&graph))
        })
        .collect();
    for mut pt in points {
        let (ok, end) = seed_checks[pt.seed];
        if pt.h.abs() > settings.energy_tol {
            rejected.energy += 1;
        } else if !ok {
            rejected.flow += 1;
        } else {
            pt.flow_check = end;
            accepted.push(pt);
        }
    }

    Ok(ManifoldChart {
        kind,
        tol: settings.tol,
        local_radius,
        horizon: grid.horizon,
        settle_time: settle,
        tangent_defect: tangent_defect(&frame, &grid, n),
        seeds: records,
        global_points: accepted,
        rejected,
        settings: settings.clone(),
    })
}

/// Seed point plus samples of its converged orbit at the interval ends and
/// quadrature nodes, keeping only samples at least `store_ds` apart and away
/// from the origin.
fn local_orbit_points(
    frame: &ChartFrame<'_>,
    seed: usize,
    sol: &PerronSolution,
    grid: &PerronGrid,
    settings: &ManifoldSettings,
    radius: f64,
) -> Vec<ChartPoint> {
    let floor = 0.05 * radius;
    let mut samples: Vec<(f64, &DVector<f64>, &DVector<f64>)> = Vec::new();
    for i in 0..sol.a_ends.len() {
        samples.push((i as f64 * grid.interval, &sol.a_ends[i], &sol.b_ends[i]));
        if let (Some(an), Some(bn)) = (sol.a_nodes.get(i), sol.b_nodes.get(i)) {
            samples.extend(an.iter().zip(bn).enumerate().map(|(k, (a, b))| (grid.time(i, k), a, b)));
        }
    }
    let mut out = Vec::new();
    let mut last: Option<DVector<f64>> = None;
    for (t, a, b) in samples {
        if a.norm() < floor {
            break;
        }
        let (x, p) = frame.to_xp(a, b);
        let z = join_state(&x, &p);
        if let Some(prev) = &last {
            if (&z - prev).norm() < settings.store_ds {
                continue;
            }
        }
        out.push(ChartPoint {
            x: x.as_slice().to_vec(),
            p: p.as_slice().to_vec(),
            h: frame.hsys.hval(&x, &p),
            flow_check: f64::NAN,
            seed,
            tau: -t,
            source: if t == 0.0 { PointSource::Seed } else { PointSource::Local },
        });
        last = Some(z);
    }
    out
}

/// Richardson-extrapolated central differences of `θ` at the origin.
fn tangent_defect(frame: &ChartFrame<'_>, grid: &PerronGrid, n: usize) -> f64 {
    let delta = 1e-3;
    let theta = |a: DVector<f64>| grid.solve(frame, &a, 1e-15, 200).map(|s| s.b0);
    let central = |j: usize, d: f64| -> Option<DVector<f64>> {
        let mut e = DVector::zeros(n);
        e[j] = d;
        let plus = theta(e.clone()).ok()?;
        let minus = theta(-e).ok()?;
        Some((plus - minus) / (2.0 * d))
    };
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        match (central(j, delta), central(j, delta / 2.0)) {
            (Some(d1), Some(d2)) => jac.set_column(j, &((d2 * 4.0 - d1) / 3.0)),
            _ => return f64::NAN,
        }
    }
    jac.norm()
}

/// Local stable manifold at `seeds` (points `ξ`).
pub fn local_stable_manifold(hsys: &HamiltonianSystem, seeds: &[DVector<f64>], settings: &ManifoldSettings) -> Result<ManifoldChart> {
    local_manifold(hsys, ChartKind::Stable, seeds, settings)
}

/// Local unstable manifold at `seeds` (points `η`), from the time-reversed
/// field.
pub fn local_unstable_manifold(hsys: &HamiltonianSystem, seeds: &[DVector<f64>], settings: &ManifoldSettings) -> Result<ManifoldChart> {
    local_manifold(hsys, ChartKind::Unstable, seeds, settings)
}

/// One extended orbit: stored points ordered by increasing flow time.
fn extend_orbit(
    frame: &ChartFrame<'_>,
    seed: usize,
    z0: &DVector<f64>,
    extend_time: f64,
    bounds: &Bounds,
    settings: &ManifoldSettings,
) -> Vec<ChartPoint> {
    let n = frame.hsys.n();
    let opts = OdeOptions::with_tol(settings.ode_tol);
    let inside = |y: &DVector<f64>| {
        let (x, p) = split_state(y, n);
        bounds.contains(&x, &p)
    };
    let sol = integrate(|_, y| frame.outward(y), 0.0, z0, extend_time, &opts, |_, y| !inside(y));
    let mut out = Vec::new();
    let mut last = z0.clone();
    let mut last_t = 0.0;
    let knots = sol.dense.knots();
    for w in knots.windows(2) {
        const SUB: usize = 8;
        for k in 1..=SUB {
            let t = w[0] + (w[1] - w[0]) * k as f64 / SUB as f64;
            let Some(y) = sol.dense.eval(t) else { continue };
            if !inside(&y) {
                return out;
            }
            let (x, _) = split_state(&y, n);
            let moved = (&x - last.rows(0, n)).norm();
            if moved >= settings.store_ds || t - last_t >= settings.store_dt {
                let (x, p) = split_state(&y, n);
                out.push(ChartPoint {
                    x: x.as_slice().to_vec(),
                    p: p.as_slice().to_vec(),
                    h: frame.hsys.hval(&x, &p),
                    flow_check: f64::NAN,
                    seed,
                    tau: t,
                    source: PointSource::Global,
                });
                last = y;
                last_t = t;
            }
        }
    }
    out
}

/// Extends the chart by flowing from each outermost converged seed away from
/// the origin for up to `extend_time`, storing points inside `bounds`.
/// Points failing the energy or flow check are dropped and counted.
pub fn globalize(chart: &ManifoldChart, hsys: &HamiltonianSystem, extend_time: f64, bounds: &Bounds) -> Result<ManifoldChart> {
    let n = hsys.n();
    bounds.check(n)?;
    let settings = &chart.settings;
    let frame = ChartFrame { hsys, kind: chart.kind };

    // The largest converged seed per direction.
    let mut starts: Vec<usize> = Vec::new();
    for (i, s) in chart.seeds.iter().enumerate() {
        if !s.converged {
            continue;
        }
        let dir = DVector::from_column_slice(if chart.kind == ChartKind::Stable { &s.xi } else { &s.eta }) / s.radius.max(1e-300);
        let same = starts.iter().position(|&j| {
            let o = &chart.seeds[j];
            let od = DVector::from_column_slice(if chart.kind == ChartKind::Stable { &o.xi } else { &o.eta }) / o.radius.max(1e-300);
            (&od - &dir).norm() < 1e-9
        });
        match same {
            Some(pos) if chart.seeds[starts[pos]].radius >= s.radius => {}
            Some(pos) => starts[pos] = i,
            None => starts.push(i),
        }
    }

    let mut out = chart.clone();
    let mut raw: Vec<(usize, Vec<ChartPoint>)> = starts
        .par_iter()
        .map(|&i| (i, extend_seed(&frame, &out.seeds[i], i, extend_time, bounds, settings)))
        .collect();
    if n == 2 {
        refine_planar_orbits(&frame, &mut out, &mut raw, extend_time, bounds);
    }

    let grid = frame.grid(settings);
    let graph = LocalGraph { grid: &grid, radius: chart.local_radius };
    let orbits: Vec<(Vec<ChartPoint>, usize, usize)> = raw
        .into_par_iter()
        .map(|(_, pts)| {
            let before = pts.len();
            let pts: Vec<ChartPoint> = pts.into_iter().filter(|p| p.h.abs() <= settings.energy_tol).collect();
            let energy_drops = before - pts.len();
            let (kept, flow_drops) = truncate_by_flow_check(&frame, &graph, pts, chart.settle_time, settings);
            (kept, energy_drops, flow_drops)
        })
        .collect();

    for (pts, e, f) in orbits {
        out.rejected.energy += e;
        out.rejected.flow += f;
        out.global_points.extend(pts);
    }
    out.settings.extend_time = extend_time;
    out.settings.bounds = Some(bounds.clone());
    Ok(out)
}

fn extend_seed(frame: &ChartFrame<'_>, seed: &SeedRecord, idx: usize, extend_time: f64, bounds: &Bounds, settings: &ManifoldSettings) -> Vec<ChartPoint> {
    let z0 = join_state(&DVector::from_column_slice(&seed.x), &DVector::from_column_slice(&seed.p));
    extend_orbit(frame, idx, &z0, extend_time, bounds, settings)
}

/// Separation of the paths of two extended orbits in the `x` projection:
/// the largest distance from a point of one path to the other path, over
/// the points no further from the origin than both paths reach.
fn orbit_gap(a: &[ChartPoint], sa: &SeedRecord, b: &[ChartPoint], sb: &SeedRecord) -> f64 {
    let path = |o: &'_ [ChartPoint], s: &'_ SeedRecord| -> Vec<(f64, f64)> {
        std::iter::once(&s.x)
            .chain(o.iter().map(|p| &p.x))
            .map(|x| (x[0], x[1]))
            .collect()
    };
    let (pa, pb) = (path(a, sa), path(b, sb));
    let reach = |p: &[(f64, f64)]| p.iter().map(|x| x.0.hypot(x.1)).fold(0.0, f64::max);
    let limit = reach(&pa).min(reach(&pb));
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| {
        from.iter()
            .filter(|x| x.0.hypot(x.1) <= limit)
            .map(|x| to.iter().map(|y| (x.0 - y.0).powi(2) + (x.1 - y.1).powi(2)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
            .sqrt()
    };
    directed(&pa, &pb).max(directed(&pb, &pa))
}

fn seed_angle(kind: ChartKind, s: &SeedRecord) -> f64 {
    let a = if kind == ChartKind::Stable { &s.xi } else { &s.eta };
    a[1].atan2(a[0])
}

/// Planar charts: bisects the seed angle between neighbouring orbits until
/// their separation drops below `orbit_gap` or `max_orbits` is reached.
fn refine_planar_orbits(
    frame: &ChartFrame<'_>,
    chart: &mut ManifoldChart,
    raw: &mut Vec<(usize, Vec<ChartPoint>)>,
    extend_time: f64,
    bounds: &Bounds,
) {
    let settings = chart.settings.clone();
    let grid = frame.grid(&settings);
    let min_angle = std::f64::consts::TAU / (settings.orbits.max(1) as f64 * 1024.0);
    let kind = chart.kind;
    let mut gaps: std::collections::HashMap<(usize, usize), f64> = std::collections::HashMap::new();
    loop {
        raw.sort_by(|a, b| seed_angle(kind, &chart.seeds[a.0]).total_cmp(&seed_angle(kind, &chart.seeds[b.0])));
        if raw.len() < 2 || raw.len() >= settings.max_orbits {
            return;
        }
        let mut wanted = Vec::new();
        for k in 0..raw.len() {
            let (i, a) = &raw[k];
            let (j, b) = &raw[(k + 1) % raw.len()];
            let (si, sj) = (&chart.seeds[*i], &chart.seeds[*j]);
            let (ti, mut tj) = (seed_angle(kind, si), seed_angle(kind, sj));
            if tj <= ti {
                tj += std::f64::consts::TAU;
            }
            if tj - ti <= min_angle {
                continue;
            }
            let gap = *gaps.entry((*i, *j)).or_insert_with(|| orbit_gap(a, si, b, sj));
            if gap > settings.orbit_gap {
                let mid = 0.5 * (ti + tj);
                let r = si.radius.min(sj.radius);
                wanted.push(DVector::from_vec(vec![r * mid.cos(), r * mid.sin()]));
            }
        }
        wanted.truncate(settings.max_orbits - raw.len());
        if wanted.is_empty() {
            return;
        }
        let solved: Vec<Option<(SeedRecord, PerronSolution)>> = wanted
            .par_iter()
            .map(|a0| {
                let sol = grid.solve(frame, a0, settings.tol, settings.max_iter).ok()?;
                let (xi, eta) = frame.xi_eta(&sol.a0, &sol.b0);
                let (x, p) = frame.to_xp(&sol.a0, &sol.b0);
                let rec = SeedRecord {
                    xi: xi.as_slice().to_vec(),
                    eta: eta.as_slice().to_vec(),
                    x: x.as_slice().to_vec(),
                    p: p.as_slice().to_vec(),
                    radius: a0.norm(),
                    converged: true,
                    residuals: sol.residuals.clone(),
                };
                Some((rec, sol))
            })
            .collect();
        let base = chart.seeds.len();
        let added: Vec<SeedRecord> = solved.into_iter().flatten().map(|(rec, _)| rec).collect();
        if added.is_empty() {
            return;
        }
        chart.seeds.extend(added);
        let fresh: Vec<(usize, Vec<ChartPoint>)> = (base..chart.seeds.len())
            .into_par_iter()
            .map(|i| (i, extend_seed(frame, &chart.seeds[i], i, extend_time, bounds, &settings)))
            .collect();
        raw.extend(fresh);
    }
}

/// Keeps the longest prefix of an orbit (ordered outward) whose outermost
/// point passes the flow check; found by bisection.
fn truncate_by_flow_check(frame: &ChartFrame<'_>, graph: &LocalGraph<'_>, mut pts: Vec<ChartPoint>, settle: f64, settings: &ManifoldSettings) -> (Vec<ChartPoint>, usize) {
    let check = |pt: &ChartPoint| {
        let z = join_state(&DVector::from_column_slice(&pt.x), &DVector::from_column_slice(&pt.p));
        flow_check(frame, &z, pt.tau.max(0.0) + settle, settings, Some(graph))
    };
    if pts.is_empty() {
        return (pts, 0);
    }
    let total = pts.len();
    let last = check(&pts[total - 1]);
    let (keep, verdict) = if last.0 {
        (total, last.1)
    } else {
        // Invariant: pts[..lo] known good (lo = 0 means none), pts[hi-1] bad.
        let (mut lo, mut hi) = (0usize, total);
        let mut best = f64::NAN;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            let (ok, v) = check(&pts[mid - 1]);
            if ok {
                lo = mid;
                best = v;
            } else {
                hi = mid;
            }
        }
        if lo == 0 {
            let (ok, v) = check(&pts[0]);
            if ok {
                (1, v)
            } else {
                (0, f64::NAN)
            }
        } else {
            (lo, best)
        }
    };
    pts.truncate(keep);
    for p in &mut pts {
        p.flow_check = verdict;
    }
    (pts, total - keep)
}

/// Local chart at the default seeds followed by [`globalize`] with the
/// configured extension time and bounds.
pub fn compute_chart(hsys: &HamiltonianSystem, kind: ChartKind, settings: &ManifoldSettings) -> Result<ManifoldChart> {
    let seeds = default_seeds(hsys.n(), settings);
    let local = local_manifold(hsys, kind, &seeds, settings)?;
    globalize(&local, hsys, settings.extend_time, &settings.bounds_for(hsys.n()))
}

/// The unstable manifold: the stable-manifold pipeline applied to the
/// time-reversed field.
pub fn unstable_manifold(hsys: &HamiltonianSystem, settings: &ManifoldSettings) -> Result<ManifoldChart> {
    compute_chart(hsys, ChartKind::Unstable, settings)
}

pub fn stable_manifold(hsys: &HamiltonianSystem, settings: &ManifoldSettings) -> Result<ManifoldChart> {
    compute_chart(hsys, ChartKind::Stable, settings)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::build_hamiltonian;
    use crate::systems::{example_system, ExampleParams, ExprSystem};
    use std::sync::Arc;

    fn scalar() -> HamiltonianSystem {
        build_hamiltonian(example_system("scalar", &ExampleParams::default()).unwrap()).unwrap()
    }

    #[test]
    fn scalar_chart_lies_on_zero_costate() {
        let hs = scalar();
        let settings = ManifoldSettings {
            bounds: Some(Bounds {
                lower: vec![-3.0],
                upper: vec![0.99],
                p_max: 10.0,
            }),
            ..Default::default()
        };
        let chart = stable_manifold(&hs, &settings).unwrap();
        assert!(chart.global_points.len() > 100);
        let pmax = chart.global_points.iter().map(|c| c.p[0].abs()).fold(0.0, f64::max);
        assert!(pmax <= 1e-6, "{pmax}");
        let xmax = chart.global_points.iter().map(|c| c.x[0]).fold(f64::MIN, f64::max);
        let xmin = chart.global_points.iter().map(|c| c.x[0]).fold(f64::MAX, f64::min);
        assert!(xmax < 1.0 && xmax > 0.95, "{xmax}");
        assert!(xmin < -2.9, "{xmin}");
        assert!(chart.tangent_defect <= 10.0 * chart.tol, "{}", chart.tangent_defect);
    }

    #[test]
    fn linear_chart_is_riccati_subspace() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.5]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::identity(2, 2);
        let hs = build_hamiltonian(Arc::new(ExprSystem::linear(&a, &b, &c).unwrap())).unwrap();
        let chart = stable_manifold(&hs, &ManifoldSettings::default()).unwrap();
        for s in &chart.seeds {
            assert!(s.converged);
            assert!(s.eta.iter().all(|v| v.abs() < 1e-14));
        }
        for (x, p) in chart.points() {
            assert!((p - &hs.sym.p1 * &x).amax() < 1e-6);
        }
    }

    #[test]
    fn scalar_unstable_tangent() {
        let hs = scalar();
        let seeds = vec![DVector::from_element(1, 1e-3)];
        let chart = local_unstable_manifold(&hs, &seeds, &ManifoldSettings::default()).unwrap();
        let s = &chart.seeds[0];
        // Unstable eigenvector of [[−1, −1], [0, 1]] is (1, −2).
        assert!((s.p[0] / s.x[0] + 2.0).abs() < 1e-2);
    }
}
