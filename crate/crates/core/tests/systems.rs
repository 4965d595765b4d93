use std::sync::Arc;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitDisc};

use hamflow_core::hamiltonian::{simulate_until, InputSource};
use hamflow_core::ode::{OdeOptions, Outcome};
use hamflow_core::systems::{
    backstepping_feedback, derivative_defect, example_system, geometric_radii, growth_certificate, linearize, Backstepping, BacksteppingExample,
    ExampleParams, EXAMPLE_NAMES,
};

#[test]
fn backstepping_stabilizes_ball_of_radius_two() {
    let sys = BacksteppingExample::system();
    let law = backstepping_feedback(Arc::new(BacksteppingExample));
    let design = Backstepping::new(Arc::new(BacksteppingExample));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..50 {
        let d: [f64; 2] = UnitDisc.sample(&mut rng);
        let x0 = DVector::from_vec(vec![2.0 * d[0], 2.0 * d[1]]);
        let (traj, outcome) = simulate_until(&sys, &x0, &InputSource::Feedback(law.clone()), 50.0, &OdeOptions::with_tol(1e-10), |_, x| x.norm() < 1e-4).unwrap();
        assert_eq!(outcome, Outcome::Stopped, "start {k}: {x0}");
        let v: Vec<f64> = traj.states.iter().map(|x| design.lyapunov(x).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9) + 1e-14), "start {k}: V increased");
    }
}

#[test]
fn generator_growth_is_linear() {
    let sys = example_system("generator", &ExampleParams::default()).unwrap();
    let cert = growth_certificate(sys.as_ref(), &geometric_radii(4.0, 2.0, 8), 400).unwrap();
    assert!((0.8..=1.2).contains(&cert.f_exponent), "{}", cert.f_exponent);
    assert!(cert.passes());
}

#[test]
fn examples_linearize() {
    for name in EXAMPLE_NAMES {
        let sys = example_system(name, &ExampleParams::default()).unwrap();
        let lin = linearize(sys.as_ref()).unwrap();
        assert_eq!(lin.a.nrows(), sys.n());
        assert_eq!(lin.b.ncols(), sys.m());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn analytic_derivatives_match_differences(k in 0usize..5, seed in 0u64..1000) {
        let sys = example_system(EXAMPLE_NAMES[k], &ExampleParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DVector::from_fn(sys.n(), |_, _| rng.random_range(-1.5..1.5));
        prop_assert!(derivative_defect(sys.as_ref(), &x) <= 1e-5);
    }
}
