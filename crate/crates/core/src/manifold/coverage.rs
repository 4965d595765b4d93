//! Projected coverage of a chart and the costate feedback built on it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{flow_check, ChartFrame, LocalGraph, ChartKind, ChartPoint, ManifoldChart, PointSource};
use crate::error::{Error, Result};
use crate::hamiltonian::{join_state, split_state, HamiltonianSystem};
use crate::ode::{integrate, OdeOptions, Outcome};

/// Queries closer to the origin than this are covered by `(0, 0)`.
const ORIGIN_RADIUS: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoverageSettings {
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Snap radius as a multiple of the median nearest-neighbour spacing.
    pub snap_factor: f64,
    /// Overrides the spacing-based snap radius.
    pub snap_radius: Option<f64>,
    /// A failed refinement is reported as boundary within this multiple of
    /// the median spacing.
    pub boundary_factor: f64,
    /// Nearest chart points (from distinct orbits) tried per query.
    pub candidates: usize,
    /// Tolerance of the fixed-point solves inside the refinement.
    pub refine_tol: f64,
}

impl Default for CoverageSettings {
    fn default() -> Self {
        Self {
            newton_tol: 1e-8,
            max_newton: 20,
            snap_factor: 10.0,
            snap_radius: None,
            boundary_factor: 3.0,
            candidates: 3,
            refine_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoverageStatus {
    Covered,
    Boundary,
    Uncovered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    #[serde(rename = "H")]
    pub h: f64,
    pub flow_check: f64,
    /// `|x − x₀|` after refinement.
    pub distance: f64,
    /// Chart seed the witness was shot from, `None` for the origin.
    pub seed: Option<usize>,
    pub tau: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query: Vec<f64>,
    pub status: CoverageStatus,
    /// Distance to the nearest chart point in the `x` projection.
    pub nearest_distance: f64,
    /// Distinct witnesses; more than one when several branches project onto
    /// the query.
    pub witnesses: Vec<Witness>,
}

impl QueryResult {
    /// The witness with the smallest costate.
    pub fn witness(&self) -> Option<&Witness> {
        self.witnesses.iter().min_by(|a, b| norm(&a.p).total_cmp(&norm(&b.p)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageMethod {
    pub refinement: String,
    pub median_spacing: f64,
    pub snap_radius: f64,
    pub boundary_radius: f64,
    pub settings: CoverageSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageEstimate {
    pub kind: ChartKind,
    pub queries: Vec<QueryResult>,
    pub covered: usize,
    pub boundary: usize,
    pub uncovered: usize,
    pub method: CoverageMethod,
}

impl CoverageEstimate {
    pub fn status_of(&self, i: usize) -> CoverageStatus {
        self.queries[i].status
    }

    pub fn fraction_covered(&self) -> f64 {
        if self.queries.is_empty() {
            return 0.0;
        }
        self.covered as f64 / self.queries.len() as f64
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// Median distance from each stored point to its nearest neighbour in the
/// `x` projection (sweep over the points sorted by their first coordinate).
pub(crate) fn median_spacing(points: &[ChartPoint]) -> f64 {
    if points.len() < 2 {
        return f64::NAN;
    }
    let mut sorted: Vec<&[f64]> = points.iter().map(|p| p.x.as_slice()).collect();
    sorted.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let mut nn: Vec<f64> = (0..sorted.len())
        .into_par_iter()
        .map(|i| {
            let a = sorted[i];
            let mut best = f64::INFINITY;
            for b in sorted[i + 1..].iter() {
                if b[0] - a[0] >= best {
                    break;
                }
                best = best.min(dist(a, b));
            }
            for b in sorted[..i].iter().rev() {
                if a[0] - b[0] >= best {
                    break;
                }
                best = best.min(dist(a, b));
            }
            best
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    nn[nn.len() / 2]
}

fn snap_radius(chart: &ManifoldChart, settings: &CoverageSettings) -> (f64, f64) {
    let spacing = median_spacing(&chart.global_points);
    let snap = settings.snap_radius.unwrap_or(settings.snap_factor * spacing);
    (spacing, if snap.is_finite() { snap } else { 0.0 })
}

/// Shooting map from a chart coordinate `a` (fixed flow time `tau`) to the
/// point reached on the manifold.
struct Shooter<'a> {
    frame: ChartFrame<'a>,
    grid: super::perron::PerronGrid,
    chart: &'a ManifoldChart,
    tau: f64,
    refine_tol: f64,
}

impl Shooter<'_> {
    fn point(&self, a: &DVector<f64>) -> Result<DVector<f64>> {
        let settings = &self.chart.settings;
        let sol = self.grid.solve(&self.frame, a, self.refine_tol, settings.max_iter)?;
        let (x, p) = self.frame.to_xp(&sol.a0, &sol.b0);
        let z0 = join_state(&x, &p);
        if self.tau <= 0.0 {
            return Ok(z0);
        }
        let opts = OdeOptions::with_tol(settings.ode_tol);
        let sol = integrate(|_, y| self.frame.outward(y), 0.0, &z0, self.tau, &opts, |_, _| false);
        match sol.outcome {
            Outcome::Failed(e) => Err(e),
            _ => Ok(sol.last().1.clone()),
        }
    }

    fn x_of(&self, a: &DVector<f64>) -> Result<DVector<f64>> {
        let n = a.len();
        Ok(self.point(a)?.rows(0, n).into_owned())
    }

    /// Damped Newton on `x(a) = target`; returns the manifold point and the
    /// iteration count.
    fn refine(&self, mut a: DVector<f64>, target: &DVector<f64>, settings: &CoverageSettings) -> Option<(DVector<f64>, usize)> {
        let n = a.len();
        let max_norm = 1.5 * self.chart.local_radius;
        let mut r = self.x_of(&a).ok()? - target;
        for it in 0..=settings.max_newton {
            if r.norm() <= settings.newton_tol {
                return Some((self.point(&a).ok()?, it));
            }
            if it == settings.max_newton {
                break;
            }
            let step = 1e-6 * a.norm().max(0.1 * self.chart.local_radius);
            let mut jac = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut ap = a.clone();
                ap[j] += step;
                let mut am = a.clone();
                am[j] -= step;
                let col = (self.x_of(&ap).ok()? - self.x_of(&am).ok()?) / (2.0 * step);
                jac.set_column(j, &col);
            }
            let delta = jac.lu().solve(&(-&r))?;
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..12 {
                let trial = &a + &delta * lambda;
                if trial.norm() <= max_norm {
                    if let Ok(xt) = self.x_of(&trial) {
                        let rt = xt - target;
                        if rt.norm() < r.norm() {
                            a = trial;
                            r = rt;
                            accepted = true;
                            break;
                        }
                    }
                }
                lambda *= 0.5;
            }
            if !accepted {
                return None;
            }
        }
        None
    }
}

fn chart_coordinate(frame: &ChartFrame<'_>, z: &DVector<f64>) -> DVector<f64> {
    let n = frame.hsys.n();
    let (x, p) = split_state(z, n);
    let (xi, eta) = frame.hsys.to_xi_eta(&x, &p);
    match frame.kind {
        ChartKind::Stable => xi,
        ChartKind::Unstable => eta,
    }
}

fn try_candidate(
    hsys: &HamiltonianSystem,
    chart: &ManifoldChart,
    cand: &ChartPoint,
    target: &DVector<f64>,
    settings: &CoverageSettings,
) -> Option<Witness> {
    let frame = ChartFrame { hsys, kind: chart.kind };
    let (start, tau) = if cand.source == PointSource::Global {
        let seed = &chart.seeds[cand.seed];
        let z = join_state(&DVector::from_column_slice(&seed.x), &DVector::from_column_slice(&seed.p));
        (chart_coordinate(&frame, &z), cand.tau)
    } else {
        let z = join_state(&DVector::from_column_slice(&cand.x), &DVector::from_column_slice(&cand.p));
        (chart_coordinate(&frame, &z), 0.0)
    };
    shoot(hsys, chart, start, tau, Some(cand.seed), target, settings)
}

fn shoot(
    hsys: &HamiltonianSystem,
    chart: &ManifoldChart,
    start: DVector<f64>,
    tau: f64,
    seed: Option<usize>,
    target: &DVector<f64>,
    settings: &CoverageSettings,
) -> Option<Witness> {
    let frame = ChartFrame { hsys, kind: chart.kind };
    let grid = frame.grid(&chart.settings);
    let shooter = Shooter {
        frame,
        grid,
        chart,
        tau,
        refine_tol: settings.refine_tol,
    };
    let (z, iters) = shooter.refine(start, target, settings)?;
    let n = hsys.n();
    let (x, p) = split_state(&z, n);
    let h = hsys.hval(&x, &p);
    if h.abs() > chart.settings.energy_tol {
        return None;
    }
    let graph = LocalGraph { grid: &shooter.grid, radius: chart.local_radius };
    let (ok, end) = flow_check(&shooter.frame, &z, tau + chart.settle_time, &chart.settings, Some(&graph));
    if !ok {
        return None;
    }
    Some(Witness {
        distance: (&x - target).norm(),
        x: x.as_slice().to_vec(),
        p: p.as_slice().to_vec(),
        h,
        flow_check: end,
        seed,
        tau,
        newton_iterations: iters,
    })
}

/// Shooting inside the local ball, started from the tangent space: `x = ξ`
/// on the stable chart and `x = P2 η` on the unstable one.
fn local_witness(hsys: &HamiltonianSystem, chart: &ManifoldChart, query: &DVector<f64>, settings: &CoverageSettings) -> Option<Witness> {
    let start = match chart.kind {
        ChartKind::Stable => query.clone(),
        ChartKind::Unstable => hsys.sym.p2.clone().lu().solve(query)?,
    };
    if start.norm() > 1.5 * chart.local_radius {
        return None;
    }
    let w = shoot(hsys, chart, start, 0.0, None, query, settings)?;
    let frame = ChartFrame { hsys, kind: chart.kind };
    let z = join_state(&DVector::from_column_slice(&w.x), &DVector::from_column_slice(&w.p));
    (chart_coordinate(&frame, &z).norm() <= chart.local_radius * (1.0 + 1e-9)).then_some(w)
}

fn origin_witness(n: usize, query: &DVector<f64>) -> Witness {
    Witness {
        x: vec![0.0; n],
        p: vec![0.0; n],
        h: 0.0,
        flow_check: 0.0,
        distance: query.norm(),
        seed: None,
        tau: 0.0,
        newton_iterations: 0,
    }
}

fn classify(
    hsys: &HamiltonianSystem,
    chart: &ManifoldChart,
    query: &DVector<f64>,
    snap: f64,
    boundary: f64,
    settings: &CoverageSettings,
) -> QueryResult {
    let n = hsys.n();
    let q = query.as_slice();
    let mut order: Vec<(f64, usize)> = chart.global_points.iter().enumerate().map(|(i, c)| (dist(&c.x, q), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let nearest = order.first().map_or(f64::INFINITY, |o| o.0).min(query.norm());
    let mut result = QueryResult {
        query: q.to_vec(),
        status: CoverageStatus::Uncovered,
        nearest_distance: nearest,
        witnesses: Vec::new(),
    };
    if query.norm() <= ORIGIN_RADIUS {
        result.status = CoverageStatus::Covered;
        result.witnesses.push(origin_witness(n, query));
        return result;
    }
    let mut used_orbits = Vec::new();
    for &(d, i) in &order {
        if d > snap || used_orbits.len() >= settings.candidates {
            break;
        }
        let cand = &chart.global_points[i];
        if used_orbits.contains(&cand.seed) {
            continue;
        }
        used_orbits.push(cand.seed);
        if let Some(w) = try_candidate(hsys, chart, cand, query, settings) {
            let duplicate = result
                .witnesses
                .iter()
                .any(|o| dist(&o.x, &w.x) + dist(&o.p, &w.p) <= 1e-6 * (1.0 + norm(&w.p)));
            if !duplicate {
                result.witnesses.push(w);
            }
        }
    }
    // Inside the local ball the graph is available at any chart coordinate,
    // so sampling gaps there do not count as missing coverage.
    if result.witnesses.is_empty() {
        if let Some(w) = local_witness(hsys, chart, query, settings) {
            result.witnesses.push(w);
        }
    }
    result.status = if !result.witnesses.is_empty() {
        CoverageStatus::Covered
    } else if nearest <= boundary {
        CoverageStatus::Boundary
    } else {
        CoverageStatus::Uncovered
    };
    result
}

/// Classifies each query point as covered (with refined witnesses on the
/// manifold), boundary or uncovered.
pub fn coverage(
    chart: &ManifoldChart,
    hsys: &HamiltonianSystem,
    queries: &[DVector<f64>],
    settings: &CoverageSettings,
) -> Result<CoverageEstimate> {
    let n = hsys.n();
    if let Some(q) = queries.iter().find(|q| q.len() != n) {
        return Err(Error::Dimension(format!("query has length {}, expected {n}", q.len())));
    }
    let (spacing, snap) = snap_radius(chart, settings);
    let boundary = settings.boundary_factor * spacing;
    let boundary = if boundary.is_finite() { boundary } else { 0.0 };
    let results: Vec<QueryResult> = queries
        .par_iter()
        .map(|q| classify(hsys, chart, q, snap, boundary, settings))
        .collect();
    let count = |s| results.iter().filter(|r| r.status == s).count();
    Ok(CoverageEstimate {
        kind: chart.kind,
        covered: count(CoverageStatus::Covered),
        boundary: count(CoverageStatus::Boundary),
        uncovered: count(CoverageStatus::Uncovered),
        queries: results,
        method: CoverageMethod {
            refinement: "shooting".into(),
            median_spacing: spacing,
            snap_radius: snap,
            boundary_radius: boundary,
            settings: settings.clone(),
        },
    })
}

/// Costate interpolated at `x` from the `k` nearest chart points (and the
/// origin) by an inverse-distance weighted affine fit. When the fit shows
/// that the neighbours come from different branches, the neighbour with the
/// smallest costate is used instead.
pub fn costate_estimate(chart: &ManifoldChart, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    let n = x.len();
    if chart.n() != n {
        return Err(Error::Dimension(format!("query has length {n}, chart has {}", chart.n())));
    }
    if x.norm() <= ORIGIN_RADIUS {
        return Ok(DVector::zeros(n));
    }
    let origin = ChartPoint {
        x: vec![0.0; n],
        p: vec![0.0; n],
        h: 0.0,
        flow_check: 0.0,
        seed: usize::MAX,
        tau: 0.0,
        source: PointSource::Seed,
    };
    let mut near: Vec<(f64, &ChartPoint)> = chart
        .global_points
        .iter()
        .chain(std::iter::once(&origin))
        .map(|c| (dist(&c.x, x.as_slice()), c))
        .collect();
    near.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (_, snap) = snap_radius(chart, &CoverageSettings::default());
    let snap = if snap > 0.0 { snap } else { f64::INFINITY };
    if near[0].0 > snap {
        return Err(Error::Uncovered);
    }
    near.truncate(k.max(n + 2));
    if near[0].0 <= 1e-15 {
        return Ok(DVector::from_column_slice(&near[0].1.p));
    }

    // Weighted least squares for p ≈ c + M (y − x).
    let rows = near.len();
    let mut design = DMatrix::zeros(rows, n + 1);
    let mut rhs = DMatrix::zeros(rows, n);
    for (r, (d, c)) in near.iter().enumerate() {
        let w = 1.0 / d.max(1e-300);
        design[(r, 0)] = w;
        for j in 0..n {
            design[(r, j + 1)] = w * (c.x[j] - x[j]);
            rhs[(r, j)] = w * c.p[j];
        }
    }
    let svd = design.clone().svd(true, true);
    let coef = svd.solve(&rhs, 1e-12).map_err(|e| Error::NoConvergence(e.into()))?;
    let fitted = &design * &coef;
    let weights: f64 = near.iter().map(|(d, _)| 1.0 / d.max(1e-300).powi(2)).sum();
    let misfit = ((&fitted - &rhs).norm_squared() / weights).sqrt();
    let p_hat = coef.row(0).transpose();
    let scale = 1.0 + near.iter().map(|(_, c)| norm(&c.p)).fold(0.0, f64::max);
    if misfit <= 1e-3 * scale {
        return Ok(p_hat);
    }
    let reach = 3.0 * near[0].0;
    let best = near
        .iter()
        .filter(|(d, _)| *d <= reach)
        .min_by(|a, b| norm(&a.1.p).total_cmp(&norm(&b.1.p)))
        .map(|(_, c)| c)
        .expect("nearest point is within reach");
    Ok(DVector::from_column_slice(&best.p))
}

/// `u = −g(x)ᵀ p̂(x)` with `p̂` from [`costate_estimate`] over 8 neighbours.
pub fn manifold_feedback(chart: &ManifoldChart, hsys: &HamiltonianSystem, x: &DVector<f64>) -> Result<DVector<f64>> {
    let p = costate_estimate(chart, x, 8)?;
    Ok(hsys.optimal_feedback(x, &p))
}
