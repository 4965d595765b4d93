//! Dense kernels for the linearized problem: the continuous algebraic Riccati
//! equation, the Lyapunov equation, PBH rank tests and the symplectic
//! block-diagonalization of the linear Hamiltonian matrix.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative rank threshold for the PBH tests.
pub const PBH_RANK_TOL: f64 = 1e-10;

/// Condition-number ceiling for the stable-subspace basis.
pub const SUBSPACE_COND_MAX: f64 = 1e12;

/// Largest real part over the spectrum of `m`.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    m.complex_eigenvalues()
        .iter()
        .map(|l| l.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

pub fn is_hurwitz(m: &DMatrix<f64>) -> bool {
    spectral_abscissa(m) < 0.0
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Eigenvalues of `m` with real part not safely negative.
fn unstable_eigenvalues(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let scale = spectral_norm(m).max(1.0);
    m.complex_eigenvalues()
        .iter()
        .copied()
        .filter(|l| l.re >= -PBH_RANK_TOL * scale)
        .collect()
}

fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > PBH_RANK_TOL * smax).count()
}

/// PBH stabilizability: `rank [λI − A, B] = n` at every eigenvalue with `Re λ ≥ 0`.
pub fn pbh_stabilizable(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    let n = a.nrows();
    let m = b.ncols();
    for lambda in unstable_eigenvalues(a) {
        let mut pencil = DMatrix::<Complex<f64>>::zeros(n, n + m);
        for i in 0..n {
            for j in 0..n {
                let d = if i == j { lambda } else { Complex::new(0.0, 0.0) };
                pencil[(i, j)] = d - Complex::new(a[(i, j)], 0.0);
            }
            for j in 0..m {
                pencil[(i, n + j)] = Complex::new(b[(i, j)], 0.0);
            }
        }
        if complex_rank(&pencil) < n {
            return false;
        }
    }
    true
}

/// PBH detectability: `rank [λI − A; C] = n` at every eigenvalue with `Re λ ≥ 0`.
pub fn pbh_detectable(c: &DMatrix<f64>, a: &DMatrix<f64>) -> bool {
    pbh_stabilizable(&a.transpose(), &c.transpose())
}

/// The linear Hamiltonian matrix `[[A, −BBᵀ], [−CᵀC, −Aᵀ]]`.
pub fn hamiltonian_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut ham = DMatrix::zeros(2 * n, 2 * n);
    ham.view_mut((0, 0), (n, n)).copy_from(a);
    ham.view_mut((0, n), (n, n)).copy_from(&(-(b * b.transpose())));
    ham.view_mut((n, 0), (n, n)).copy_from(&(-(c.transpose() * c)));
    ham.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    ham
}

/// The canonical symplectic form `J = [[0, I], [−I, 0]]`.
pub fn symplectic_form(n: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        j[(i, n + i)] = 1.0;
        j[(n + i, i)] = -1.0;
    }
    j
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    let lu = m.clone().lu();
    lu.u().diagonal().iter().map(|d| d.abs().ln()).sum()
}

/// Matrix sign function by the scaled Newton iteration.
fn matrix_sign(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = h.nrows() as f64;
    let mut z = h.clone();
    let mut scaled = true;
    for _ in 0..100 {
        let inv = z
            .clone()
            .try_inverse()
            .ok_or(Error::IllConditionedSubspace { cond: f64::INFINITY })?;
        let c = if scaled {
            (-log_abs_det(&z) / dim).exp()
        } else {
            1.0
        };
        let next = (&z * c + inv / c) * 0.5;
        let diff = (&next - &z).norm();
        let size = next.norm();
        z = next;
        if !diff.is_finite() {
            break;
        }
        if diff <= 1e-2 * size {
            scaled = false;
        }
        if diff <= 1e-14 * size {
            return Ok(z);
        }
    }
    if z.iter().all(|v| v.is_finite()) {
        Ok(z)
    } else {
        Err(Error::NoConvergence("matrix sign iteration".into()))
    }
}

/// Residual `P A + Aᵀ P − P B Bᵀ P + CᵀC` of the CARE.
pub fn care_residual(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> DMatrix<f64> {
    p * a + a.transpose() * p - p * b * b.transpose() * p + c.transpose() * c
}

/// Stabilizing solution of `PA + AᵀP − PBBᵀP + CᵀC = 0`.
///
/// The stable invariant subspace of the Hamiltonian matrix is read off the
/// matrix sign function; it is the graph `[I; P]` of the solution.
pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || c.ncols() != n {
        return Err(Error::Dimension(format!(
            "CARE with A {}x{}, B {}x{}, C {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            c.nrows(),
            c.ncols()
        )));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if !pbh_stabilizable(a, b) {
        return Err(Error::NotStabilizable);
    }
    if !pbh_detectable(c, a) {
        return Err(Error::NotDetectable);
    }
    let ham = hamiltonian_matrix(a, b, c);
    let w = matrix_sign(&ham)?;
    let eye = DMatrix::<f64>::identity(n, n);

    // (W + I) [I; P] = 0 on the stable subspace.
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n))
        .copy_from(&(w.view((n, n), (n, n)) + &eye));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(w.view((0, 0), (n, n)) + &eye)));
    rhs.view_mut((n, 0), (n, n))
        .copy_from(&(-w.view((n, 0), (n, n))));

    let svd = lhs.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > SUBSPACE_COND_MAX {
        return Err(Error::IllConditionedSubspace { cond });
    }
    let p = svd
        .solve(&rhs, 0.0)
        .map_err(|e| Error::NoConvergence(e.to_string()))?;
    let p = symmetrize(&p);

    let closed = a - b * b.transpose() * &p;
    let abscissa = spectral_abscissa(&closed);
    if abscissa >= 0.0 {
        return Err(Error::NotHurwitz { max_real: abscissa });
    }
    Ok(p)
}

/// Solves `P Fᵀ + F P = Q` by Kronecker vectorization.
pub fn solve_lyapunov(f: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = f.nrows();
    if f.ncols() != n || q.nrows() != n || q.ncols() != n {
        return Err(Error::Dimension("Lyapunov operands must be square and equal".into()));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let abscissa = spectral_abscissa(f);
    if abscissa >= 0.0 {
        return Err(Error::NotHurwitz { max_real: abscissa });
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let op = eye.kronecker(f) + f.kronecker(&eye);
    let vec_q = DVector::from_column_slice(q.as_slice());
    let vec_p = op
        .lu()
        .solve(&vec_q)
        .ok_or_else(|| Error::NoConvergence("singular Lyapunov operator".into()))?;
    let p = symmetrize(&DMatrix::from_column_slice(n, n, vec_p.as_slice()));

    let top = p.symmetric_eigenvalues().max();
    if top > 1e-10 * (1.0 + p.norm()) && is_psd(q, 1e-12) {
        return Err(Error::NotNegativeSemidefinite { max_eigenvalue: top });
    }
    Ok(p)
}

fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    m.nrows() == 0 || symmetrize(m).symmetric_eigenvalues().min() >= -tol * (1.0 + m.norm())
}

/// Riccati/Lyapunov data together with the symplectic change of variables
/// that block-diagonalizes the linear Hamiltonian matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymplecticData {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Stabilizing CARE solution (PSD).
    pub p1: DMatrix<f64>,
    /// Lyapunov solution for the closed loop (NSD).
    pub p2: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub l_inv: DMatrix<f64>,
    /// Closed-loop matrix `A − BBᵀP1`.
    pub f: DMatrix<f64>,
    pub ham: DMatrix<f64>,
}

/// Norms of the defects in the identities `SymplecticData` must satisfy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymplecticResiduals {
    pub inverse: f64,
    pub symplectic: f64,
    pub off_diagonal: f64,
    pub diagonal: f64,
    pub closed_form_inverse: f64,
}

impl SymplecticData {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn residuals(&self) -> SymplecticResiduals {
        let n = self.n();
        let eye = DMatrix::<f64>::identity(2 * n, 2 * n);
        let j = symplectic_form(n);
        let blocks = &self.l_inv * &self.ham * &self.l;
        let off = blocks
            .view((0, n), (n, n))
            .norm()
            .max(blocks.view((n, 0), (n, n)).norm());
        let diag = (blocks.view((0, 0), (n, n)) - &self.f).norm()
            + (blocks.view((n, n), (n, n)) + self.f.transpose()).norm();
        let closed_form = match self.l.clone().try_inverse() {
            Some(inv) => (inv - &self.l_inv).norm(),
            None => f64::INFINITY,
        };
        SymplecticResiduals {
            inverse: (&self.l * &self.l_inv - &eye).norm(),
            symplectic: (self.l.transpose() * &j * &self.l - &j).norm(),
            off_diagonal: off,
            diagonal: diag,
            closed_form_inverse: closed_form,
        }
    }

    /// `(x, p) = L (ξ, η)`.
    pub fn from_xi_eta(&self, xi: &DVector<f64>, eta: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let x = xi + &self.p2 * eta;
        let p = &self.p1 * &x + eta;
        (x, p)
    }

    /// `(ξ, η) = L⁻¹ (x, p)`.
    pub fn to_xi_eta(&self, x: &DVector<f64>, p: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let eta = p - &self.p1 * x;
        let xi = x - &self.p2 * &eta;
        (xi, eta)
    }
}

/// CARE, closed-loop Lyapunov equation and the transform `L`.
pub fn build_symplectic(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<SymplecticData> {
    let n = a.nrows();
    let p1 = solve_care(a, b, c)?;
    let bbt = b * b.transpose();
    let f = a - &bbt * &p1;
    let p2 = solve_lyapunov(&f, &bbt)?;
    let eye = DMatrix::<f64>::identity(n, n);

    let mut l = DMatrix::zeros(2 * n, 2 * n);
    l.view_mut((0, 0), (n, n)).copy_from(&eye);
    l.view_mut((0, n), (n, n)).copy_from(&p2);
    l.view_mut((n, 0), (n, n)).copy_from(&p1);
    l.view_mut((n, n), (n, n)).copy_from(&(&eye + &p1 * &p2));

    let mut l_inv = DMatrix::zeros(2 * n, 2 * n);
    l_inv.view_mut((0, 0), (n, n)).copy_from(&(&eye + &p2 * &p1));
    l_inv.view_mut((0, n), (n, n)).copy_from(&(-&p2));
    l_inv.view_mut((n, 0), (n, n)).copy_from(&(-&p1));
    l_inv.view_mut((n, n), (n, n)).copy_from(&eye);

    Ok(SymplecticData {
        a: a.clone(),
        b: b.clone(),
        c: c.clone(),
        ham: hamiltonian_matrix(a, b, c),
        p1,
        p2,
        l,
        l_inv,
        f,
    })
}

/// `[e^Z, φ₁(Z), …, φ_p(Z)]` with `φ_k(Z) = Σ_j Z^j / (j + k)!`, read off the
/// exponential of the block matrix with `Z` in the corner and identities on
/// the superdiagonal.
pub fn phi_functions(z: &DMatrix<f64>, p: usize) -> Vec<DMatrix<f64>> {
    let n = z.nrows();
    let size = n * (p + 1);
    let mut aug = DMatrix::zeros(size, size);
    aug.view_mut((0, 0), (n, n)).copy_from(z);
    for k in 0..p {
        for i in 0..n {
            aug[(k * n + i, (k + 1) * n + i)] = 1.0;
        }
    }
    let e = aug.exp();
    (0..=p)
        .map(|k| e.view((0, k * n), (n, n)).into_owned())
        .collect()
}
