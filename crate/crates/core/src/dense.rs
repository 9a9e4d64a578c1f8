//! Dense complex linear algebra for desk-scale oracles (nalgebra backed).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::C64;

pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

pub fn to_dvec(v: &[C64]) -> CVector {
    CVector::from_column_slice(v)
}

pub fn from_dvec(v: &CVector) -> Vec<C64> {
    v.iter().copied().collect()
}

/// Moore-Penrose pseudoinverse; singular values below `rtol * s_max` are dropped.
pub fn pinv(a: &CMatrix, rtol: f64) -> CMatrix {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return CMatrix::zeros(n, m);
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = rtol * smax;
    let mut out = CMatrix::zeros(n, m);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > 0.0 {
            let vk = vt.row(k).adjoint();
            let uk = u.column(k).adjoint();
            out += (vk * uk) * C64::new(1.0 / s, 0.0);
        }
    }
    out
}

/// Orthogonal projection onto the row space of `a`: `A^+ A`.
pub fn row_space_projection(a: &CMatrix) -> CMatrix {
    pinv(a, 1e-10) * a
}

/// Eigenvalues of a Hermitian matrix in ascending order.
pub fn hermitian_eigenvalues(m: &CMatrix) -> Vec<f64> {
    let h = hermitian_part(m);
    let mut ev: Vec<f64> = h.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// `L` with `L L^* = m` for a Hermitian PSD matrix (negative eigenvalues clipped).
pub fn psd_factor(m: &CMatrix) -> CMatrix {
    let eig = hermitian_part(m).symmetric_eigen();
    let mut l = eig.eigenvectors.clone();
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        l.column_mut(k).scale_mut(s);
    }
    l
}

/// Solve `m x = b` for Hermitian positive definite `m`.
pub fn solve_hpd(m: &CMatrix, b: &CVector) -> Result<CVector> {
    match hermitian_part(m).cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => Err(Error::Singular("matrix is not positive definite".into())),
    }
}

pub fn solve_hpd_mat(m: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    match hermitian_part(m).cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => Err(Error::Singular("matrix is not positive definite".into())),
    }
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

/// Real representation of a complex matrix under the interleaved `(re, im)` layout.
pub fn real_representation(m: &CMatrix) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let mut out = DMatrix::zeros(2 * r, 2 * c);
    for i in 0..r {
        for j in 0..c {
            let z = m[(i, j)];
            out[(2 * i, 2 * j)] = z.re;
            out[(2 * i, 2 * j + 1)] = -z.im;
            out[(2 * i + 1, 2 * j)] = z.im;
            out[(2 * i + 1, 2 * j + 1)] = z.re;
        }
    }
    out
}

pub fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}
