//! Dormand–Prince 5(4) integrator with PI step control and continuous
//! (dense) output.
//!
//! Integration may run backward in time (`t1 < t0`). A failing run keeps the
//! accepted part of the solution so callers can use what was computed before
//! the failure.

use nalgebra::DVector;

use crate::error::{Error, Result};

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];

const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// `|y|` above this bound is reported as a finite escape.
    pub escape_norm: f64,
    pub h_max: Option<f64>,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-9,
            atol: 1e-9,
            max_steps: 500_000,
            escape_norm: 1e8,
            h_max: None,
        }
    }
}

impl OdeOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            rtol: tol,
            atol: tol,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegratorStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl IntegratorStats {
    pub fn merge(&mut self, other: &IntegratorStats) {
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.evaluations += other.evaluations;
    }
}

#[derive(Debug, Clone)]
struct DenseStep {
    t: f64,
    h: f64,
    cont: [DVector<f64>; 5],
}

impl DenseStep {
    fn eval(&self, t: f64) -> DVector<f64> {
        let s = if self.h == 0.0 { 0.0 } else { (t - self.t) / self.h };
        let s1 = 1.0 - s;
        let [c0, c1, c2, c3, c4] = &self.cont;
        c0 + (c1 + (c2 + (c3 + c4 * s1) * s) * s1) * s
    }

    fn end(&self) -> f64 {
        self.t + self.h
    }
}

/// Piecewise quartic continuous extension of an integrated solution.
#[derive(Debug, Clone, Default)]
pub struct DenseOutput {
    steps: Vec<DenseStep>,
}

impl DenseOutput {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Covered time interval as `(min, max)`.
    pub fn span(&self) -> Option<(f64, f64)> {
        let first = self.steps.first()?;
        let last = self.steps.last()?;
        let (a, b) = (first.t, last.end());
        Some((a.min(b), a.max(b)))
    }

    /// Evaluates the interpolant; `None` outside the covered interval.
    pub fn eval(&self, t: f64) -> Option<DVector<f64>> {
        let (lo, hi) = self.span()?;
        let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
        if t < lo - slack || t > hi + slack {
            return None;
        }
        let forward = self.steps[0].h >= 0.0;
        let idx = if forward {
            self.steps.partition_point(|s| s.end() < t)
        } else {
            self.steps.partition_point(|s| s.end() > t)
        };
        let step = &self.steps[idx.min(self.steps.len() - 1)];
        Some(step.eval(t))
    }

    /// Appends a later piece. Both pieces must run in the same direction.
    pub fn extend(&mut self, other: DenseOutput) {
        self.steps.extend(other.steps);
    }

    /// Step boundaries, in integration order.
    pub fn knots(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.steps.iter().map(|s| s.t).collect();
        if let Some(last) = self.steps.last() {
            out.push(last.end());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Completed,
    /// The stop predicate fired at the last stored time.
    Stopped,
    Failed(Error),
}

#[derive(Debug, Clone)]
pub struct OdeSolution {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub dense: DenseOutput,
    pub stats: IntegratorStats,
    pub outcome: Outcome,
}

impl OdeSolution {
    pub fn last(&self) -> (f64, &DVector<f64>) {
        let i = self.times.len() - 1;
        (self.times[i], &self.states[i])
    }

    pub fn into_result(self) -> Result<Self> {
        match &self.outcome {
            Outcome::Failed(e) => Err(e.clone()),
            _ => Ok(self),
        }
    }
}

fn error_norm(err: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>, opts: &OdeOptions) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(e, (a, b))| {
            let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

fn rms_scaled(v: &DVector<f64>, y: &DVector<f64>, opts: &OdeOptions) -> f64 {
    let n = v.len().max(1) as f64;
    let sum: f64 = v
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (a / (opts.atol + opts.rtol * b.abs())).powi(2))
        .sum();
    (sum / n).sqrt()
}

fn initial_step<F>(rhs: &mut F, t0: f64, y0: &DVector<f64>, f0: &DVector<f64>, dir: f64, span: f64, opts: &OdeOptions) -> f64
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let d0 = rms_scaled(y0, y0, opts);
    let d1 = rms_scaled(f0, y0, opts);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let y1 = y0 + f0 * (dir * h0);
    let f1 = rhs(t0 + dir * h0, &y1);
    let d2 = rms_scaled(&(f1 - f0), y0, opts) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / dmax).powf(0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Integrates `y' = rhs(t, y)` from `t0` to `t1`, stopping early once
/// `stop(t, y)` holds at an accepted step.
pub fn integrate<F, S>(
    mut rhs: F,
    t0: f64,
    y0: &DVector<f64>,
    t1: f64,
    opts: &OdeOptions,
    mut stop: S,
) -> OdeSolution
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    S: FnMut(f64, &DVector<f64>) -> bool,
{
    let mut sol = OdeSolution {
        times: vec![t0],
        states: vec![y0.clone()],
        dense: DenseOutput::default(),
        stats: IntegratorStats::default(),
        outcome: Outcome::Completed,
    };
    if !y0.iter().all(|v| v.is_finite()) {
        sol.outcome = Outcome::Failed(Error::NonFiniteState { t: t0 });
        return sol;
    }
    let span = (t1 - t0).abs();
    if span == 0.0 {
        return sol;
    }
    if stop(t0, y0) {
        sol.outcome = Outcome::Stopped;
        return sol;
    }
    let dir = (t1 - t0).signum();
    let h_min = 1e-14 * span;
    let h_max = opts.h_max.unwrap_or(span).min(span);

    let mut t = t0;
    let mut y = y0.clone();
    let mut k1 = rhs(t, &y);
    sol.stats.evaluations += 1;
    let mut h = initial_step(&mut rhs, t0, y0, &k1, dir, span, opts).min(h_max);
    sol.stats.evaluations += 1;
    let mut fac_old: f64 = 1e-4;
    let mut last_rejected = false;

    loop {
        if sol.stats.accepted + sol.stats.rejected >= opts.max_steps {
            sol.outcome = Outcome::Failed(Error::TooManySteps(opts.max_steps));
            return sol;
        }
        let remaining = (t1 - t).abs();
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        if h < h_min && !last {
            sol.outcome = Outcome::Failed(Error::StepSizeUnderflow { t });
            return sol;
        }
        let hs = dir * h;

        let y2 = &y + &k1 * (hs * A2[0]);
        let k2 = rhs(t + C[1] * hs, &y2);
        let y3 = &y + (&k1 * A3[0] + &k2 * A3[1]) * hs;
        let k3 = rhs(t + C[2] * hs, &y3);
        let y4 = &y + (&k1 * A4[0] + &k2 * A4[1] + &k3 * A4[2]) * hs;
        let k4 = rhs(t + C[3] * hs, &y4);
        let y5 = &y + (&k1 * A5[0] + &k2 * A5[1] + &k3 * A5[2] + &k4 * A5[3]) * hs;
        let k5 = rhs(t + C[4] * hs, &y5);
        let y6 = &y
            + (&k1 * A6[0] + &k2 * A6[1] + &k3 * A6[2] + &k4 * A6[3] + &k5 * A6[4]) * hs;
        let k6 = rhs(t + hs, &y6);
        let y_new = &y
            + (&k1 * B[0] + &k3 * B[2] + &k4 * B[3] + &k5 * B[4] + &k6 * B[5]) * hs;
        let t_new = if last { t1 } else { t + hs };
        let k7 = rhs(t_new, &y_new);
        sol.stats.evaluations += 6;

        let err_vec = (&k1 * E[0] + &k3 * E[2] + &k4 * E[3] + &k5 * E[4] + &k6 * E[5] + &k7 * E[6]) * hs;
        let err = error_norm(&err_vec, &y, &y_new, opts);

        if !err.is_finite() || !y_new.iter().all(|v| v.is_finite()) {
            // Treat as a rejection with a sharp reduction.
            sol.stats.rejected += 1;
            h *= 0.1;
            last_rejected = true;
            if h < h_min {
                sol.outcome = Outcome::Failed(Error::NonFiniteState { t });
                return sol;
            }
            continue;
        }

        let fac11 = err.powf(0.2 - BETA * 0.75);
        if err <= 1.0 {
            let mut fac = fac11 / fac_old.powf(BETA);
            fac = (fac / SAFETY).clamp(FAC_MIN, FAC_MAX);
            let mut h_new = h / fac;
            if last_rejected {
                h_new = h_new.min(h);
            }
            fac_old = err.max(1e-4);

            let ydiff = &y_new - &y;
            let bspl = &k1 * hs - &ydiff;
            let c3 = &ydiff - &k7 * hs - &bspl;
            let c4 = (&k1 * D[0] + &k3 * D[2] + &k4 * D[3] + &k5 * D[4] + &k6 * D[5] + &k7 * D[6]) * hs;
            sol.dense.steps.push(DenseStep {
                t,
                h: hs,
                cont: [y.clone(), ydiff, bspl, c3, c4],
            });

            t = t_new;
            y = y_new;
            k1 = k7;
            sol.stats.accepted += 1;
            sol.times.push(t);
            sol.states.push(y.clone());
            last_rejected = false;

            if y.norm() > opts.escape_norm {
                sol.outcome = Outcome::Failed(Error::FiniteEscape { t });
                return sol;
            }
            if stop(t, &y) {
                sol.outcome = Outcome::Stopped;
                return sol;
            }
            if last {
                return sol;
            }
            h = h_new.min(h_max);
        } else {
            sol.stats.rejected += 1;
            h /= (fac11 / SAFETY).min(FAC_MAX);
            last_rejected = true;
        }
    }
}

/// [`integrate`] without a stop condition, failing on integrator errors.
pub fn solve<F>(rhs: F, t0: f64, y0: &DVector<f64>, t1: f64, opts: &OdeOptions) -> Result<OdeSolution>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    integrate(rhs, t0, y0, t1, opts, |_, _| false).into_result()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn exponential_decay() {
        let y0 = DVector::from_vec(vec![1.0]);
        let sol = solve(|_, y| -y, 0.0, &y0, 5.0, &OdeOptions::with_tol(1e-10)).unwrap();
        let (t, y) = sol.last();
        assert_eq!(t, 5.0);
        assert_abs_diff_eq!(y[0], (-5.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn harmonic_oscillator_dense_output() {
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let rhs = |_: f64, y: &DVector<f64>| DVector::from_vec(vec![y[1], -y[0]]);
        let sol = solve(rhs, 0.0, &y0, 10.0, &OdeOptions::with_tol(1e-10)).unwrap();
        for k in 0..=100 {
            let t = 0.1 * k as f64;
            let y = sol.dense.eval(t).unwrap();
            assert_abs_diff_eq!(y[0], t.cos(), epsilon = 1e-7);
            assert_abs_diff_eq!(y[1], -t.sin(), epsilon = 1e-7);
        }
        assert!(sol.dense.eval(10.5).is_none());
    }

    #[test]
    fn backward_integration() {
        let y0 = DVector::from_vec(vec![(-3.0f64).exp()]);
        let sol = solve(|_, y| -y, 3.0, &y0, 0.0, &OdeOptions::with_tol(1e-11)).unwrap();
        assert_abs_diff_eq!(sol.last().1[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.dense.eval(1.5).unwrap()[0], (-1.5f64).exp(), epsilon = 1e-8);
    }

    #[test]
    fn finite_escape_is_reported() {
        // y' = y², y(0) = 1 escapes at t = 1
        let y0 = DVector::from_vec(vec![1.0]);
        let sol = integrate(|_, y| y.map(|v| v * v), 0.0, &y0, 2.0, &OdeOptions::default(), |_, _| false);
        match sol.outcome {
            Outcome::Failed(e) => assert!(e.is_integrator_failure()),
            other => panic!("expected failure, got {other:?}"),
        }
        assert!(sol.times.last().unwrap() < &1.0);
    }

    #[test]
    fn stop_predicate() {
        let y0 = DVector::from_vec(vec![1.0]);
        let sol = integrate(|_, y| -y, 0.0, &y0, 100.0, &OdeOptions::default(), |_, y| y[0] < 1e-3);
        assert_eq!(sol.outcome, Outcome::Stopped);
        assert!(sol.last().1[0] < 1e-3);
    }
}
