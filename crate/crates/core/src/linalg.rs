//! Dense complex linear algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

pub use nalgebra::Complex;

pub type C64 = Complex<f64>;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// `a + shift * I`, in place.
pub fn add_diagonal(a: &mut CMat, shift: f64) {
    for i in 0..a.nrows().min(a.ncols()) {
        a[(i, i)].re += shift;
    }
}

/// Cholesky factor of a Hermitian positive definite matrix.
pub fn cholesky(a: CMat, what: &'static str) -> Result<Cholesky<C64, Dyn>> {
    Cholesky::new(a).ok_or(Error::Singular(what))
}

/// Solves `a x = b` for Hermitian positive definite `a`.
pub fn solve_hpd(a: CMat, b: &CMat, what: &'static str) -> Result<CMat> {
    let chol = cholesky(a, what)?;
    let x = chol.solve(b);
    if x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(what))
    }
}

/// General square inverse through LU.
pub fn inverse(a: CMat, what: &'static str) -> Result<CMat> {
    let inv = a.try_inverse().ok_or(Error::Singular(what))?;
    if inv.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(inv)
    } else {
        Err(Error::Singular(what))
    }
}

/// Base-2 log-determinant of a Hermitian positive definite matrix.
pub fn log2_det_hpd(a: CMat, what: &'static str) -> Result<f64> {
    let chol = cholesky(a, what)?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..l.nrows() {
        let d = l[(i, i)].re;
        if !(d > 0.0) {
            return Err(Error::Singular(what));
        }
        acc += d.log2();
    }
    Ok(2.0 * acc)
}

pub fn is_finite(a: &CMat) -> bool {
    a.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Largest entrywise deviation from Hermitian symmetry.
pub fn hermitian_defect(a: &CMat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in i..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)].conj()).norm());
        }
    }
    worst
}

/// `x / ||x||_2`.
pub fn normalize_vector(x: &CVec) -> Result<CVec> {
    if !x.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        return Err(Error::NonFinite("vector to normalize"));
    }
    let n = x.norm();
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(x.unscale(n))
}

/// Divides every column by its l-2 norm.
pub fn column_normalize(a: &CMat) -> Result<CMat> {
    let mut out = a.clone();
    for mut col in out.column_iter_mut() {
        let n = col.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector);
        }
        col.unscale_mut(n);
    }
    Ok(out)
}

/// Unit-modulus factor that rotates `x` so its largest-modulus entry is real
/// and positive. Ties go to the lowest index.
pub fn phase_anchor(x: impl Iterator<Item = C64>) -> C64 {
    let mut best = ZERO;
    let mut best_abs = 0.0;
    for z in x {
        let a = z.norm();
        if a > best_abs {
            best_abs = a;
            best = z;
        }
    }
    if best_abs == 0.0 {
        ONE
    } else {
        best.conj() / best_abs
    }
}

/// Largest entrywise modulus.
pub fn max_abs(a: &CMat) -> f64 {
    a.iter().fold(0.0, |m, z| m.max(z.norm()))
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

pub fn column(a: &CMat, j: usize) -> CVec {
    a.column(j).into_owned()
}

/// Stacks column vectors into a matrix.
pub fn from_columns(n_rows: usize, cols: &[CVec]) -> CMat {
    let mut out = CMat::zeros(n_rows, cols.len());
    for (j, v) in cols.iter().enumerate() {
        out.set_column(j, v);
    }
    out
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted in
/// nonincreasing order. Each eigenvector is phase-anchored so its
/// largest-modulus entry is real and positive.
pub fn hermitian_eigen_desc(a: CMat) -> (Vec<f64>, CMat) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let mut vecs = CMat::zeros(n, n);
    let vals = order
        .iter()
        .enumerate()
        .map(|(dst, &src)| {
            let col = eig.eigenvectors.column(src);
            let anchor = phase_anchor(col.iter().copied());
            vecs.set_column(dst, &(col * anchor));
            eig.eigenvalues[src]
        })
        .collect();
    (vals, vecs)
}

/// Singular triple `a = Q diag(s) T^H` computed from the eigen-decomposition
/// of the (small) row Gram `a a^H`. Left vectors follow the phase convention
/// of [`hermitian_eigen_desc`]; `t_i = a^H q_i / s_i`, or zero when `s_i`
/// vanishes.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSvd {
    pub left: CMat,
    pub singulars: Vec<f64>,
    pub right: CMat,
}

/// Singular values below this fraction of the largest one count as zero.
pub const RANK_TOL: f64 = 1e-12;

pub fn row_svd(a: &CMat) -> RowSvd {
    let (vals, left) = hermitian_eigen_desc(a * a.adjoint());
    let singulars: Vec<f64> = vals.iter().map(|&v| v.max(0.0).sqrt()).collect();
    let top = singulars.first().copied().unwrap_or(0.0);
    let ah = a.adjoint();
    let mut right = CMat::zeros(a.ncols(), a.nrows());
    for (i, &s) in singulars.iter().enumerate() {
        if s > RANK_TOL * top && s > 0.0 {
            right.set_column(i, &(&ah * left.column(i)).unscale(s));
        }
    }
    RowSvd { left, singulars, right }
}
