//! Lyapunov–Perron iteration for the graph `b = θ(a)` of a local invariant
//! manifold of `ȧ = S a + ν_a(a,b)`, `ḃ = U b + ν_b(a,b)` with `S` stable and
//! `U` anti-stable.
//!
//! Time is discretized by uniform intervals carrying Gauss–Legendre nodes.
//! The forcing is interpolated by a polynomial on each interval and the
//! variation-of-constants integrals are evaluated exactly through
//! φ-functions of `S h`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{phi_functions, spectral_norm};

/// Nodes per interval.
pub const NODES: usize = 8;
/// Longest horizon the iteration will use.
pub const MAX_HORIZON: f64 = 200.0;
const MIN_HORIZON: f64 = 5.0;
/// The forcing is at least quadratic, so it is dropped where the state is
/// below this size.
const FORCING_FLOOR: f64 = 1e-9;
/// Iterates larger than this are treated as divergence.
const BLOWUP: f64 = 1e6;

/// Gauss–Legendre nodes on `[0, 1]`, ascending and exactly symmetric.
pub fn gauss_legendre_nodes(q: usize) -> Vec<f64> {
    let mut nodes = vec![0.0; q];
    for i in 0..q.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=q {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = q as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = 0.5 * (1.0 - x);
        nodes[q - 1 - i] = 1.0 - nodes[i];
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.5;
    }
    nodes
}

/// Exact one-interval propagator for `ȧ = S a + ν(t)` with `ν` given at the
/// interval nodes.
#[derive(Debug, Clone)]
pub struct ExpQuad {
    dim: usize,
    /// Stacked `e^{S h c_k}` for each node and, last, `e^{S h}`.
    start_map: DMatrix<f64>,
    /// Block `(k, j)`: contribution of the forcing at node `j` to the value
    /// at node `k` (the last block row is the interval end).
    forcing_map: DMatrix<f64>,
}

impl ExpQuad {
    pub fn new(s: &DMatrix<f64>, h: f64, nodes: &[f64]) -> Self {
        let q = nodes.len();
        let n = s.nrows();
        let vander = DMatrix::from_fn(q, q, |k, m| nodes[k].powi(m as i32));
        let vinv = vander.try_inverse().expect("distinct nodes");
        let mut factorial = vec![1.0; q + 1];
        for m in 1..=q {
            factorial[m] = factorial[m - 1] * m as f64;
        }
        let mut start_map = DMatrix::zeros((q + 1) * n, n);
        let mut forcing_map = DMatrix::zeros((q + 1) * n, q * n);
        for (k, &tau) in nodes.iter().chain(std::iter::once(&1.0)).enumerate() {
            let phis = phi_functions(&(s * (h * tau)), q);
            // ∫₀^τ e^{Sh(τ−σ)} σ^m dσ = m! τ^{m+1} φ_{m+1}(Shτ)
            let mono: Vec<DMatrix<f64>> = (0..q)
                .map(|m| &phis[m + 1] * (h * factorial[m] * tau.powi(m as i32 + 1)))
                .collect();
            for j in 0..q {
                let w = mono
                    .iter()
                    .enumerate()
                    .fold(DMatrix::zeros(n, n), |acc, (m, w)| acc + w * vinv[(m, j)]);
                forcing_map.view_mut((k * n, j * n), (n, n)).copy_from(&w);
            }
            start_map.view_mut((k * n, 0), (n, n)).copy_from(&phis[0]);
        }
        Self {
            dim: n,
            start_map,
            forcing_map,
        }
    }

    /// Values at the nodes and at the end of the interval.
    pub fn step(&self, start: &DVector<f64>, forcing: &[DVector<f64>]) -> (Vec<DVector<f64>>, DVector<f64>) {
        let n = self.dim;
        let stacked = DVector::from_iterator(forcing.len() * n, forcing.iter().flat_map(|f| f.iter().copied()));
        let mut all = &self.start_map * start;
        all.gemv(1.0, &self.forcing_map, &stacked, 1.0);
        let q = forcing.len();
        let out: Vec<DVector<f64>> = (0..q).map(|k| all.rows(k * n, n).into_owned()).collect();
        (out, all.rows(q * n, n).into_owned())
    }
}

/// Grid and propagators shared by every seed of one chart.
#[derive(Debug, Clone)]
pub struct PerronGrid {
    pub horizon: f64,
    pub interval: f64,
    pub intervals: usize,
    nodes: Vec<f64>,
    forward: ExpQuad,
    /// Propagator for the reflected `b` equation, `−U`.
    backward: ExpQuad,
}

impl PerronGrid {
    /// Picks the interval length from the spectral radii and the horizon so
    /// that `‖e^{ST}‖ ≤ tol/10`, clamped to `[5, 200]`.
    pub fn new(s: &DMatrix<f64>, u: &DMatrix<f64>, tol: f64, horizon: Option<f64>) -> Self {
        let rho = spectral_norm(s).max(spectral_norm(u)).max(1e-12);
        let mut h = 0.5f64.min(1.0 / rho);
        let horizon = horizon.unwrap_or_else(|| {
            let target = tol / 10.0;
            let mut t = MIN_HORIZON;
            while t < MAX_HORIZON && spectral_norm(&(s * t).exp()) > target {
                t *= 1.25;
            }
            t.min(MAX_HORIZON)
        });
        let intervals = (horizon / h).ceil().max(1.0) as usize;
        h = horizon / intervals as f64;
        let nodes = gauss_legendre_nodes(NODES);
        Self {
            horizon,
            interval: h,
            intervals,
            forward: ExpQuad::new(s, h, &nodes),
            backward: ExpQuad::new(&-u, h, &nodes),
            nodes,
        }
    }

    pub fn node_count(&self) -> usize {
        self.intervals * NODES
    }

    /// Time of node `k` of interval `i`.
    pub fn time(&self, i: usize, k: usize) -> f64 {
        (i as f64 + self.nodes[k]) * self.interval
    }
}

/// Converged solution for one seed.
#[derive(Debug, Clone)]
pub struct PerronSolution {
    pub a0: DVector<f64>,
    pub b0: DVector<f64>,
    /// `a` and `b` at the interval ends `t = i h`, `i = 0..=intervals`.
    pub a_ends: Vec<DVector<f64>>,
    pub b_ends: Vec<DVector<f64>>,
    /// `a` and `b` at the quadrature nodes of each interval, see [`PerronGrid::time`].
    pub a_nodes: Vec<Vec<DVector<f64>>>,
    pub b_nodes: Vec<Vec<DVector<f64>>>,
    pub residuals: Vec<f64>,
}

/// Nonlinear forcing `(ν_a, ν_b)` as a function of `(a, b)`.
pub trait Forcing: Sync {
    fn forcing(&self, a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>);
}

struct Iterate {
    a: Vec<Vec<DVector<f64>>>,
    a_ends: Vec<DVector<f64>>,
    b: Vec<Vec<DVector<f64>>>,
    b_ends: Vec<DVector<f64>>,
}

fn sup_diff(x: &[Vec<DVector<f64>>], y: &[Vec<DVector<f64>>]) -> f64 {
    x.iter()
        .flatten()
        .zip(y.iter().flatten())
        .map(|(a, b)| max_abs_diff(a, b))
        .fold(0.0, f64::max)
}

fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

fn sup_diff_flat(x: &[DVector<f64>], y: &[DVector<f64>]) -> f64 {
    x.iter().zip(y).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max)
}

impl PerronGrid {
    fn sweep(&self, a0: &DVector<f64>, nu_a: &[Vec<DVector<f64>>], nu_b: &[Vec<DVector<f64>>]) -> Iterate {
        let dim_b = nu_b.first().and_then(|v| v.first()).map_or(a0.len(), |v| v.len());
        let mut a = Vec::with_capacity(self.intervals);
        let mut a_ends = vec![a0.clone()];
        for forcing in nu_a {
            let (nodes, end) = self.forward.step(a_ends.last().expect("start"), forcing);
            a.push(nodes);
            a_ends.push(end);
        }
        // b(T) = 0; the reflected equation runs from T back to 0 with the
        // node order reversed and the forcing negated.
        let mut b = vec![Vec::new(); self.intervals];
        let mut b_ends = vec![DVector::zeros(dim_b); self.intervals + 1];
        for i in (0..self.intervals).rev() {
            let reflected: Vec<DVector<f64>> = nu_b[i].iter().rev().map(|v| -v).collect();
            let (mut nodes, end) = self.backward.step(&b_ends[i + 1], &reflected);
            nodes.reverse();
            b[i] = nodes;
            b_ends[i] = end;
        }
        Iterate { a, a_ends, b, b_ends }
    }

    /// Runs the fixed-point iteration from `(e^{St}a₀, 0)` until successive
    /// iterates differ by at most `tol` in the sup norm.
    pub fn solve<F: Forcing + ?Sized>(&self, forcing: &F, a0: &DVector<f64>, tol: f64, max_iter: usize) -> Result<PerronSolution> {
        let q = NODES;
        let zero_a: Vec<Vec<DVector<f64>>> = vec![vec![DVector::zeros(a0.len()); q]; self.intervals];
        // Both blocks share the dimension of the seed.
        let dim_b = a0.len();
        let zero_b: Vec<Vec<DVector<f64>>> = vec![vec![DVector::zeros(dim_b); q]; self.intervals];
        let mut cur = self.sweep(a0, &zero_a, &zero_b);
        // Start from b ≡ 0.
        for v in cur.b.iter_mut().flatten().chain(cur.b_ends.iter_mut()) {
            v.fill(0.0);
        }
        let mut residuals = Vec::new();
        for _ in 0..max_iter {
            let mut nu_a = Vec::with_capacity(self.intervals);
            let mut nu_b = Vec::with_capacity(self.intervals);
            for (ai, bi) in cur.a.iter().zip(&cur.b) {
                let (fa, fb): (Vec<_>, Vec<_>) = ai
                    .iter()
                    .zip(bi)
                    .map(|(a, b)| {
                        if a.amax().max(b.amax()) < FORCING_FLOOR {
                            (DVector::zeros(a.len()), DVector::zeros(b.len()))
                        } else {
                            forcing.forcing(a, b)
                        }
                    })
                    .unzip();
                nu_a.push(fa);
                nu_b.push(fb);
            }
            let next = self.sweep(a0, &nu_a, &nu_b);
            let diff = sup_diff(&next.a, &cur.a)
                .max(sup_diff(&next.b, &cur.b))
                .max(sup_diff_flat(&next.a_ends, &cur.a_ends))
                .max(sup_diff_flat(&next.b_ends, &cur.b_ends));
            residuals.push(diff);
            let size = next.b_ends.iter().chain(&next.a_ends).map(|v| v.amax()).fold(0.0, f64::max);
            cur = next;
            if !diff.is_finite() || size > BLOWUP {
                return Err(Error::NoConvergence(format!("iterates diverged after {} sweeps", residuals.len())));
            }
            if diff <= tol {
                return Ok(PerronSolution {
                    a0: a0.clone(),
                    b0: cur.b_ends[0].clone(),
                    a_ends: cur.a_ends,
                    b_ends: cur.b_ends,
                    a_nodes: cur.a,
                    b_nodes: cur.b,
                    residuals,
                });
            }
            let k = residuals.len();
            if k >= 3 && residuals[k - 1] > residuals[k - 2] && residuals[k - 2] > residuals[k - 3] {
                return Err(Error::NoConvergence(format!("residual grew twice in a row (last {diff:e})")));
            }
            if k > 10 && diff > 0.999 * residuals[k - 11] {
                return Err(Error::NoConvergence(format!("residual stagnated at {diff:e}")));
            }
        }
        Err(Error::NoConvergence(format!(
            "no convergence in {max_iter} sweeps (last residual {:e})",
            residuals.last().copied().unwrap_or(f64::NAN)
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn nodes_are_legendre_roots() {
        let nodes = gauss_legendre_nodes(NODES);
        // Exact for polynomials of degree 2q − 1 with the standard weights; here
        // just check symmetry and the first node against the tabulated value.
        assert_abs_diff_eq!(nodes[0], 0.5 * (1.0 - 0.960_289_856_497_536_2), epsilon = 1e-15);
        for k in 0..NODES {
            assert_abs_diff_eq!(nodes[k] + nodes[NODES - 1 - k], 1.0, epsilon = 1e-16);
        }
    }

    #[test]
    fn propagator_is_exact_for_polynomial_forcing() {
        // ȧ = −2a + t², a(0) = 1, over one interval of length 0.4.
        let s = DMatrix::from_element(1, 1, -2.0);
        let h = 0.4;
        let nodes = gauss_legendre_nodes(NODES);
        let quad = ExpQuad::new(&s, h, &nodes);
        let forcing: Vec<DVector<f64>> = nodes.iter().map(|c| DVector::from_element(1, (c * h).powi(2))).collect();
        let (vals, end) = quad.step(&DVector::from_element(1, 1.0), &forcing);
        let exact = |t: f64| {
            // particular solution t²/2 − t/2 + 1/4
            let part = t * t / 2.0 - t / 2.0 + 0.25;
            (1.0 - 0.25) * (-2.0 * t).exp() + part
        };
        for (c, v) in nodes.iter().zip(&vals) {
            assert_abs_diff_eq!(v[0], exact(c * h), epsilon = 1e-13);
        }
        assert_abs_diff_eq!(end[0], exact(h), epsilon = 1e-13);
    }

    struct Linear;
    impl Forcing for Linear {
        fn forcing(&self, a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
            (DVector::zeros(a.len()), DVector::zeros(b.len()))
        }
    }

    /// `ȧ = −a`, `ḃ = b + a²`: the stable manifold is `b = −a²/3`.
    struct Quadratic;
    impl Forcing for Quadratic {
        fn forcing(&self, a: &DVector<f64>, _b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
            (DVector::zeros(1), DVector::from_element(1, a[0] * a[0]))
        }
    }

    #[test]
    fn linear_forcing_gives_flat_graph() {
        let s = DMatrix::from_element(1, 1, -1.0);
        let grid = PerronGrid::new(&s, &-&s, 1e-10, None);
        let sol = grid.solve(&Linear, &DVector::from_element(1, 0.5), 1e-10, 50).unwrap();
        assert_eq!(sol.b0[0], 0.0);
        assert_eq!(sol.residuals.len(), 1);
        assert_abs_diff_eq!(sol.a_ends[2][0], 0.5 * (-2.0 * grid.interval).exp(), epsilon = 1e-14);
    }

    #[test]
    fn recovers_known_graph() {
        let s = DMatrix::from_element(1, 1, -1.0);
        let grid = PerronGrid::new(&s, &-&s, 1e-12, None);
        for a0 in [0.3, -0.8, 1.5] {
            let sol = grid.solve(&Quadratic, &DVector::from_element(1, a0), 1e-12, 100).unwrap();
            assert_abs_diff_eq!(sol.b0[0], -a0 * a0 / 3.0, epsilon = 1e-11);
        }
    }
}
