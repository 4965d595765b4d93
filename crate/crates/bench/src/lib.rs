//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use hamflow_core::hamiltonian::{build_hamiltonian, HamiltonianSystem};
use hamflow_core::systems::{example_system, ExampleParams, ExprSystem};
use nalgebra::DMatrix;

pub fn example(name: &str) -> HamiltonianSystem {
    build_hamiltonian(example_system(name, &ExampleParams::default()).unwrap()).unwrap()
}

/// Chain of `n` integrators with a damped last state; controllable and
/// observable for every `n`.
pub fn chain(n: usize) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut a = DMatrix::zeros(n, n);
    for i in 0..n - 1 {
        a[(i, i + 1)] = 1.0;
    }
    a[(n - 1, n - 1)] = -0.5;
    let mut b = DMatrix::zeros(n, 1);
    b[(n - 1, 0)] = 1.0;
    let mut c = DMatrix::zeros(1, n);
    c[(0, 0)] = 1.0;
    (a, b, c)
}

pub fn chain_system(n: usize) -> HamiltonianSystem {
    let (a, b, c) = chain(n);
    build_hamiltonian(Arc::new(ExprSystem::linear(&a, &b, &c).unwrap())).unwrap()
}
