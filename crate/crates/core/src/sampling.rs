//! Deterministic low-discrepancy point sets on spheres.

use nalgebra::DVector;

const PRIMES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: u64, base: u32) -> f64 {
    let b = base as f64;
    let mut inv = 1.0 / b;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base as u64) as f64 * inv;
        i /= base as u64;
        inv /= b;
    }
    out
}

/// `count` unit vectors in `ℝⁿ` spread evenly over the sphere.
///
/// One dimension yields `±1`; two use equispaced angles; three use a
/// Fibonacci lattice; higher dimensions normalize Halton points of the cube.
pub fn sphere_directions(n: usize, count: usize) -> Vec<DVector<f64>> {
    match n {
        0 => Vec::new(),
        1 => (0..count.min(2))
            .map(|k| DVector::from_element(1, if k == 0 { 1.0 } else { -1.0 }))
            .collect(),
        2 => (0..count)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / count as f64;
                DVector::from_vec(vec![a.cos(), a.sin()])
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..count)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
                    let r = (1.0 - z * z).sqrt();
                    let a = golden * k as f64;
                    DVector::from_vec(vec![r * a.cos(), r * a.sin(), z])
                })
                .collect()
        }
        _ => {
            let mut out = Vec::with_capacity(count);
            let mut i = 1u64;
            while out.len() < count {
                let v = DVector::from_iterator(
                    n,
                    (0..n).map(|d| 2.0 * radical_inverse(i, PRIMES[d % PRIMES.len()]) - 1.0),
                );
                i += 1;
                let norm = v.norm();
                if norm > 0.2 && norm <= 1.0 {
                    out.push(v / norm);
                }
            }
            out
        }
    }
}
