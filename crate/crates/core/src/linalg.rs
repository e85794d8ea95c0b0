//! Dense linear-algebra helpers on top of `nalgebra`, generic over [`Real`].

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};

use crate::error::{Error, Result};
use crate::scalar::{c, Real};

/// Symmetric eigen-decomposition with eigenvalues sorted ascending.
pub fn sym_eigen<T: Real>(m: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        vecs.set_column(k, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

/// `(m + m^T) / 2`.
pub fn symmetrize<T: Real>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * c::<T>(0.5)
}

/// `‖m − m^T‖_F / ‖m‖_F`, zero for the zero matrix.
pub fn relative_asymmetry<T: Real>(m: &DMatrix<T>) -> T {
    let norm = m.norm();
    if norm == T::zero() {
        return T::zero();
    }
    (m - m.transpose()).norm() / norm
}

/// Solves `S v = λ M v` for symmetric `S` and SPD `M`.
///
/// Eigenvectors are returned `M`-orthonormal, eigenvalues ascending.
pub fn generalized_sym_eigen<T: Real>(
    s: &DMatrix<T>,
    mass: &DMatrix<T>,
) -> Result<(DVector<T>, DMatrix<T>)> {
    let chol = Cholesky::new(symmetrize(mass))
        .ok_or_else(|| Error::Dimension("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Dimension("singular Cholesky factor".into()))?;
    let reduced = &l_inv * s * l_inv.transpose();
    let (vals, w) = sym_eigen(&reduced);
    let vecs = l_inv.transpose() * w;
    Ok((vals, vecs))
}

/// Minimum-norm least-squares solution of `a x ≈ b` via SVD, discarding
/// singular values below `rtol · σ_max`.
pub fn lstsq<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, rtol: T) -> DMatrix<T> {
    pseudo_inverse(a, rtol) * b
}

/// Moore–Penrose pseudo-inverse with relative singular-value cutoff.
pub fn pseudo_inverse<T: Real>(a: &DMatrix<T>, rtol: T) -> DMatrix<T> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.as_ref().expect("svd u");
    let vt = svd.v_t.as_ref().expect("svd v_t");
    let smax = svd.singular_values.max();
    let cutoff = rtol * smax;
    let k = svd.singular_values.len();
    let mut out = DMatrix::zeros(n, m);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > cutoff && s > T::zero() {
            out += vt.row(i).transpose() * u.column(i).transpose() * (T::one() / s);
        }
    }
    out
}

/// Ridge-regularized solve of the symmetric system `(g + ρ I) x = rhs`.
pub fn ridge_solve<T: Real>(g: &DMatrix<T>, rhs: &DMatrix<T>, ridge: T) -> Result<DMatrix<T>> {
    let n = g.nrows();
    let reg = symmetrize(g) + DMatrix::<T>::identity(n, n) * ridge;
    if let Some(ch) = Cholesky::new(reg.clone()) {
        return Ok(ch.solve(rhs));
    }
    reg.lu().solve(rhs).ok_or(Error::SingularGram {
        condition: f64::INFINITY,
    })
}

/// Singular values, descending.
pub fn singular_values<T: Real>(a: &DMatrix<T>) -> DVector<T> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DVector::zeros(0);
    }
    let mut s: Vec<T> = SVD::new(a.clone(), false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    DVector::from_vec(s)
}

/// 2-norm condition number `σ_max / σ_min` (infinite when singular).
pub fn condition_number<T: Real>(a: &DMatrix<T>) -> T {
    let s = singular_values(a);
    if s.is_empty() {
        return T::zero();
    }
    let smin = s[s.len() - 1];
    if smin <= T::zero() {
        return c(f64::INFINITY);
    }
    s[0] / smin
}

/// Numerical rank with relative cutoff.
pub fn rank<T: Real>(a: &DMatrix<T>, rtol: T) -> usize {
    let s = singular_values(a);
    if s.is_empty() {
        return 0;
    }
    let cut = s[0] * rtol;
    s.iter().filter(|&&x| x > cut && x > T::zero()).count()
}

/// Inverse square root of a symmetric positive semidefinite matrix,
/// with eigenvalues below `rtol · λ_max` dropped.
pub fn inv_sqrt_psd<T: Real>(m: &DMatrix<T>, rtol: T) -> DMatrix<T> {
    let (vals, vecs) = sym_eigen(m);
    let n = vals.len();
    let lmax = vals
        .iter()
        .fold(T::zero(), |a, &b| if b > a { b } else { a });
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        if vals[i] > rtol * lmax && vals[i] > T::zero() {
            let col = vecs.column(i);
            out += col * col.transpose() * (T::one() / vals[i].sqrt());
        }
    }
    out
}

/// Block-diagonal matrix from equally sized square blocks.
pub fn block_diag<T: Real>(blocks: &[DMatrix<T>]) -> DMatrix<T> {
    let d: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(d, d);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(b);
        off += k;
    }
    out
}
