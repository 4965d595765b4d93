use std::sync::Arc;

use hamflow_core::hamiltonian::{build_hamiltonian, join_state, HamiltonianSystem};
use hamflow_core::manifold::perron::{Forcing, PerronGrid};
use hamflow_core::manifold::*;
use hamflow_core::systems::{example_system, ExampleParams, ExprSystem};
use nalgebra::{DMatrix, DVector};

fn example(name: &str) -> HamiltonianSystem {
    build_hamiltonian(example_system(name, &ExampleParams::default()).unwrap()).unwrap()
}

fn scalar_settings() -> ManifoldSettings {
    ManifoldSettings {
        bounds: Some(Bounds {
            lower: vec![-3.0],
            upper: vec![0.99],
            p_max: 10.0,
        }),
        ..Default::default()
    }
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

#[test]
fn pendulum_seeds_flow_to_origin() {
    let hs = example("pendulum");
    let settings = ManifoldSettings::default();
    let seeds: Vec<DVector<f64>> = hamflow_core::sampling::sphere_directions(2, 12).into_iter().map(|d| d * 0.1).collect();
    let chart = local_stable_manifold(&hs, &seeds, &settings).unwrap();
    for s in &chart.seeds {
        assert!(s.converged);
        let z0 = join_state(&v(&s.x), &v(&s.p));
        // The unstable directions amplify any residual, so the check is that
        // the orbit enters the ball before t = 30 rather than stays there.
        let opts = hamflow_core::ode::OdeOptions::with_tol(1e-11);
        let (traj, outcome) = hs.flow_with(&z0, 30.0, &opts, |_, z| z.norm() < 1e-3);
        assert_eq!(outcome, hamflow_core::ode::Outcome::Stopped);
        assert!(traj.t_end() < 30.0);
    }
}

#[test]
fn chart_points_satisfy_invariants() {
    let hs = example("zero_dynamics");
    let settings = ManifoldSettings {
        orbits: 24,
        extend_time: 4.0,
        ..Default::default()
    };
    for chart in [stable_manifold(&hs, &settings).unwrap(), unstable_manifold(&hs, &settings).unwrap()] {
        assert!(!chart.global_points.is_empty());
        assert!(chart.max_abs_hamiltonian() <= 1e-6);
        assert!(chart.tangent_defect <= 10.0 * chart.tol, "{}", chart.tangent_defect);
        let sign = if chart.kind == ChartKind::Stable { 1.0 } else { -1.0 };
        // Spot-check the outermost point of a few orbits against an independent flow.
        for pt in chart.global_points.iter().filter(|p| p.source == PointSource::Global).step_by(97).take(5) {
            let z0 = join_state(&v(&pt.x), &v(&pt.p));
            let traj = hs.flow(&z0, sign * (pt.tau + chart.settle_time), 1e-10).unwrap();
            let closest = traj.states.iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
            assert!(closest < 1e-3, "{closest}");
        }
    }
}

#[test]
fn scalar_coverage_boundary() {
    let hs = example("scalar");
    let chart = stable_manifold(&hs, &scalar_settings()).unwrap();
    assert!(chart.global_points.iter().all(|c| c.x[0] < 1.0));
    let queries: Vec<DVector<f64>> = [-2.0, 0.0, 0.9, 1.1, 1.5].iter().map(|x| v(&[*x])).collect();
    let cov = coverage(&chart, &hs, &queries, &CoverageSettings::default()).unwrap();
    let status: Vec<CoverageStatus> = cov.queries.iter().map(|q| q.status).collect();
    use CoverageStatus::*;
    assert_eq!(status, vec![Covered, Covered, Covered, Uncovered, Uncovered]);
    let origin = cov.queries[1].witness().unwrap();
    assert_eq!(origin.x, vec![0.0]);
    assert_eq!(origin.p, vec![0.0]);
    for q in &cov.queries {
        for w in &q.witnesses {
            assert!(w.h.abs() <= 1e-6);
            assert!(w.distance <= 1e-8);
            assert!(w.p[0].abs() <= 1e-6);
        }
    }
}

#[test]
fn scalar_feedback_is_zero() {
    let hs = example("scalar");
    let chart = stable_manifold(&hs, &scalar_settings()).unwrap();
    for x in [-2.5, -1.0, 0.0, 0.3, 0.95] {
        let u = manifold_feedback(&chart, &hs, &v(&[x])).unwrap();
        assert!(u[0].abs() <= 1e-6, "{x}: {}", u[0]);
    }
    assert_eq!(manifold_feedback(&chart, &hs, &v(&[2.0])), Err(hamflow_core::Error::Uncovered));
}

fn damped_oscillator() -> HamiltonianSystem {
    let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.3]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    build_hamiltonian(Arc::new(ExprSystem::linear(&a, &b, &c).unwrap())).unwrap()
}

#[test]
fn linear_feedback_matches_riccati_gain() {
    let hs = damped_oscillator();
    let settings = ManifoldSettings {
        orbits: 32,
        bounds: Some(Bounds::cube(2, 1.5, 100.0)),
        ..Default::default()
    };
    let chart = stable_manifold(&hs, &settings).unwrap();
    for (x, p) in chart.points() {
        assert!((p - &hs.sym.p1 * &x).amax() <= 1e-6);
    }
    let gain = -hs.linear.b.transpose() * &hs.sym.p1;
    for x in [v(&[0.0, 0.0]), v(&[0.5, -0.2]), v(&[-0.7, 0.6]), v(&[0.1, 0.9])] {
        let u = manifold_feedback(&chart, &hs, &x).unwrap();
        assert!((u - &gain * &x).amax() <= 1e-6);
    }
}

/// Mirrored coordinates built directly from the reversed field.
struct Reversed<'a>(&'a HamiltonianSystem);

impl Forcing for Reversed<'_> {
    fn forcing(&self, eta: &DVector<f64>, xi: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let hs = self.0;
        let n = hs.n();
        let (x, p) = hs.from_xi_eta(xi, eta);
        let zdot = -hs.rhs(&join_state(&x, &p));
        let (xdot, pdot) = (zdot.rows(0, n).into_owned(), zdot.rows(n, n).into_owned());
        let eta_dot = &pdot - &hs.sym.p1 * &xdot;
        let xi_dot = &xdot - &hs.sym.p2 * &eta_dot;
        let f = &hs.sym.f;
        (eta_dot - f.transpose() * eta, xi_dot + f * xi)
    }
}

#[test]
fn unstable_chart_is_stable_chart_of_reversed_field() {
    let hs = example("backstepping");
    let settings = ManifoldSettings::default();
    let seeds: Vec<DVector<f64>> = hamflow_core::sampling::sphere_directions(2, 6).into_iter().map(|d| d * 0.2).collect();
    let chart = local_unstable_manifold(&hs, &seeds, &settings).unwrap();
    let f = &hs.sym.f;
    let grid = PerronGrid::new(&f.transpose(), &-f, settings.tol, None);
    for (seed, rec) in seeds.iter().zip(&chart.seeds) {
        let sol = grid.solve(&Reversed(&hs), seed, settings.tol, settings.max_iter).unwrap();
        let (x, p) = hs.from_xi_eta(&sol.b0, &sol.a0);
        assert!((x - v(&rec.x)).amax() <= 1e-12);
        assert!((p - v(&rec.p)).amax() <= 1e-12);
    }
}

#[test]
fn tangency_fit_approaches_riccati_solution() {
    let hs = example("pendulum");
    let settings = ManifoldSettings {
        orbits: 32,
        shells: 6,
        extend_time: 1.0,
        ..Default::default()
    };
    let chart = stable_manifold(&hs, &settings).unwrap();
    let mut errors = Vec::new();
    for r in [0.3, 0.1, 0.03] {
        let near: Vec<(DVector<f64>, DVector<f64>)> = chart.points().filter(|(x, _)| x.norm() <= r).collect();
        assert!(near.len() >= 10, "{r}: {}", near.len());
        let xs = DMatrix::from_fn(near.len(), 2, |i, j| near[i].0[j]);
        let ps = DMatrix::from_fn(near.len(), 2, |i, j| near[i].1[j]);
        let fit = xs.svd(true, true).solve(&ps, 1e-14).unwrap().transpose();
        errors.push((fit - &hs.sym.p1).norm());
    }
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
}

#[test]
fn charts_are_deterministic() {
    let hs = example("pendulum");
    let settings = ManifoldSettings {
        orbits: 16,
        extend_time: 2.0,
        ..Default::default()
    };
    let a = stable_manifold(&hs, &settings).unwrap();
    let b = stable_manifold(&hs, &settings).unwrap();
    assert_eq!(
        hamflow_core::io::to_canonical_json(&a).unwrap(),
        hamflow_core::io::to_canonical_json(&b).unwrap()
    );
}

#[test]
fn backstepping_coverage_grows_with_extension_time() {
    let hs = example("backstepping");
    let settings = ManifoldSettings::default();
    let local = local_manifold(&hs, ChartKind::Stable, &default_seeds(2, &settings), &settings).unwrap();
    let bounds = settings.bounds_for(2);
    let radius = |t: f64| {
        let chart = globalize(&local, &hs, t, &bounds).unwrap();
        chart.global_points.iter().map(|c| v(&c.x).norm()).fold(0.0, f64::max)
    };
    let radii: Vec<f64> = [0.5, 1.0, 2.0].iter().map(|t| radius(*t)).collect();
    assert!(radii[0] < radii[1] && radii[1] < radii[2], "{radii:?}");
}

#[test]
fn backstepping_covers_unit_corner() {
    let hs = example("backstepping");
    let chart = stable_manifold(&hs, &ManifoldSettings::default()).unwrap();
    let cov = coverage(&chart, &hs, &[v(&[1.0, 1.0])], &CoverageSettings::default()).unwrap();
    assert_eq!(cov.queries[0].status, CoverageStatus::Covered);
    let w = cov.queries[0].witness().unwrap();
    assert!(w.h.abs() <= 1e-6 && w.flow_check < 1e-3);
}

#[test]
fn rejects_bad_settings() {
    let hs = example("scalar");
    let settings = ManifoldSettings {
        tol: -1.0,
        ..Default::default()
    };
    assert!(stable_manifold(&hs, &settings).is_err());
    let chart = stable_manifold(&hs, &scalar_settings()).unwrap();
    assert!(globalize(&chart, &hs, 1.0, &Bounds::cube(2, 1.0, 1.0)).is_err());
}

#[test]
fn stiff_linear_chart_keeps_points_and_covers_local_ball() {
    // Expanding rate 8 against decay rate 1: forward flows cannot reach the
    // check ball before round-off takes over.
    let a = DMatrix::from_diagonal(&v(&[-1.0, -4.0, -8.0]));
    let eye = DMatrix::<f64>::identity(3, 3);
    let hs = build_hamiltonian(Arc::new(ExprSystem::linear(&a, &eye, &eye).unwrap())).unwrap();
    let settings = ManifoldSettings {
        local_radius: 1.0,
        shells: 1,
        orbits: 6,
        extend_time: 0.1,
        bounds: Some(Bounds::cube(3, 1.5, 100.0)),
        ..Default::default()
    };
    let chart = stable_manifold(&hs, &settings).unwrap();
    assert_eq!(chart.rejected.flow, 0);
    assert!(chart.global_points.len() > 6);
    let x = v(&[0.3, -0.4, 0.5]);
    let cov = coverage(&chart, &hs, &[x.clone()], &CoverageSettings::default()).unwrap();
    assert_eq!(cov.queries[0].status, CoverageStatus::Covered);
    let w = cov.queries[0].witness().unwrap();
    assert!((v(&w.p) - &hs.sym.p1 * &x).amax() <= 1e-8);
}
