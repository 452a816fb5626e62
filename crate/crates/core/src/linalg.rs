//! Small dense linear-algebra helpers shared by the other modules.

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};

/// Row-major nested arrays, the on-disk form of every matrix.
pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Inverse of [`to_rows`]. Returns `None` on ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return None;
    }
    Some(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest absolute asymmetry `max |m_ij - m_ji|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Eigenvalues of a general square matrix, or `None` if the QR iteration
/// does not converge.
///
/// The unbounded iteration behind `DMatrix::complex_eigenvalues` can spin
/// forever on matrices within rounding of `cI`. Here the iteration count is
/// capped, and on failure the scalar part is split off and the rescaled
/// remainder is decomposed instead.
pub fn complex_eigenvalues(m: &DMatrix<f64>) -> Option<Vec<Complex<f64>>> {
    let d = m.nrows();
    if d == 0 {
        return Some(Vec::new());
    }
    let max_iter = 1000 * d;
    if let Some(s) = Schur::try_new(m.clone(), f64::EPSILON, max_iter) {
        return Some(s.complex_eigenvalues().iter().copied().collect());
    }
    let c = m.trace() / d as f64;
    let dev = m - DMatrix::identity(d, d) * c;
    let scale = dev.amax();
    if !scale.is_finite() {
        return None;
    }
    if scale <= 1e-12 * m.amax() {
        return Some(vec![Complex::new(c, 0.0); d]);
    }
    let s = Schur::try_new(dev / scale, f64::EPSILON, max_iter)?;
    Some(
        s.complex_eigenvalues()
            .iter()
            .map(|z| z * scale + c)
            .collect(),
    )
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetric_eigenvalues(m).first().copied().unwrap_or(0.0)
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// `f(M)` for symmetric `M`, applied through its eigendecomposition.
pub fn symmetric_function(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let q = &eig.eigenvectors;
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
    symmetrize(&(q * d * q.transpose()))
}

/// Symmetric square root of a PSD matrix; negative rounding noise is clipped.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    symmetric_function(m, |x| x.max(0.0).sqrt())
}

pub fn outer(a: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    a * b.transpose()
}
