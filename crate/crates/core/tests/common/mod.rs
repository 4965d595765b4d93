#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use hamflow_core::linalg::{pbh_detectable, pbh_stabilizable};

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random stabilizable and detectable `(A, B, C)` with `n ≤ 4`.
pub fn random_linear(seed: u64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=n);
        let q = rng.random_range(1..=n);
        let a = gaussian(&mut rng, n, n, 1.0 / (n as f64).sqrt());
        let b = gaussian(&mut rng, n, m, 1.0);
        let c = gaussian(&mut rng, q, n, 1.0);
        if pbh_stabilizable(&a, &b) && pbh_detectable(&c, &a) {
            return (a, b, c);
        }
    }
}

/// Solution of the linear two-point problem `ż = Ham z`, `x(0) = x0`,
/// `x(T) = xf`, sampled at `times`. Nodes are chained with `e^{Ham h}` over
/// short intervals so the dense system stays well conditioned.
pub fn linear_bvp_oracle(
    ham: &DMatrix<f64>,
    x0: &nalgebra::DVector<f64>,
    xf: &nalgebra::DVector<f64>,
    horizon: f64,
    times: &[f64],
) -> Vec<nalgebra::DVector<f64>> {
    let n = x0.len();
    let d = 2 * n;
    let rate = ham.complex_eigenvalues().iter().map(|e| e.re.abs()).fold(1.0, f64::max);
    let k = ((horizon * rate).ceil() as usize).max(1);
    let h = horizon / k as f64;
    let step = (ham * h).exp();
    let size = d * (k + 1);
    let mut m = DMatrix::zeros(size, size);
    let mut rhs = nalgebra::DVector::zeros(size);
    for i in 0..n {
        m[(i, i)] = 1.0;
        rhs[i] = x0[i];
    }
    for j in 0..k {
        let row = n + d * j;
        m.view_mut((row, d * j), (d, d)).copy_from(&(-&step));
        for i in 0..d {
            m[(row + i, d * (j + 1) + i)] = 1.0;
        }
    }
    for i in 0..n {
        m[(n + d * k + i, d * k + i)] = 1.0;
        rhs[n + d * k + i] = xf[i];
    }
    let nodes = m.lu().solve(&rhs).expect("oracle system is singular");
    times
        .iter()
        .map(|&t| {
            let j = ((t / h).floor() as usize).min(k - 1);
            (ham * (t - j as f64 * h)).exp() * nodes.rows(d * j, d)
        })
        .collect()
}
