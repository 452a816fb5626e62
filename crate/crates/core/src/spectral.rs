//! Spectral analysis at a target and the theoretical limiting covariances.
//!
//! For a Hurwitz Jacobian `A = ∇h(θ*)` and noise covariance `U`, the raw
//! iterates scaled by `γ_n^{-1/2}` have limiting covariance `V` solving
//!
//! - `V Aᵀ + A V = -U` for slowly decaying steps, and
//! - `V (I + 2γ* Aᵀ) + (I + 2γ* A) V = -2γ* U` for `γ_n = γ*/n`.
//!
//! Both are Lyapunov equations `M V + V Mᵀ = -C` and are solved through the
//! `d² × d²` Kronecker-sum linearisation `(I ⊗ M + M ⊗ I) vec V = -vec C`.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, frobenius, min_symmetric_eigenvalue, spectral_norm, symmetrize};
use crate::schedules::{RegimeTag, StepSchedule};

/// Residual bound for every solved Lyapunov equation, relative to `1 + ‖U‖_F`.
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;
/// Relative floor of the smallest eigenvalue in positive-definiteness checks.
pub const PD_RELATIVE_FLOOR: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("dimension mismatch: expected {expected}x{expected}, got {rows}x{cols}")]
    DimensionMismatch {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("matrix is not Hurwitz: eigenvalue {re} + {im}i has non-negative real part")]
    NotHurwitz { re: f64, im: f64 },
    #[error("fast-rate regime violated: 2Lγ* = {two_l_gamma} must exceed 1")]
    RegimeViolation { two_l_gamma: f64 },
    #[error("Kronecker-sum system is numerically singular")]
    SingularSystem,
    #[error("Lyapunov residual {residual:e} exceeds bound {bound:e}")]
    InaccurateSolution { residual: f64, bound: f64 },
    #[error("matrix is singular")]
    Singular,
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("gamma_star must be positive, got {0}")]
    InvalidGammaStar(f64),
    #[error("eigenvalue iteration did not converge")]
    EigenFailure,
    #[error("L' must be positive, got {0}")]
    InvalidEnvelopeRate(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HurwitzInfo {
    pub matrix: DMatrix<f64>,
    /// `L > 0` with `-L` the largest real part of the spectrum.
    pub decay_rate: f64,
    pub eigenvalues: Vec<Complex<f64>>,
}

fn check_square(a: &DMatrix<f64>) -> Result<usize, SpectralError> {
    if a.nrows() != a.ncols() {
        return Err(SpectralError::NotSquare(a.nrows(), a.ncols()));
    }
    Ok(a.nrows())
}

fn check_dims(d: usize, m: &DMatrix<f64>) -> Result<(), SpectralError> {
    if m.nrows() != d || m.ncols() != d {
        return Err(SpectralError::DimensionMismatch {
            expected: d,
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(())
}

/// Spectrum sorted by decreasing real part.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>, SpectralError> {
    check_square(a)?;
    let mut ev = linalg::complex_eigenvalues(a).ok_or(SpectralError::EigenFailure)?;
    ev.sort_by(|x, y| y.re.total_cmp(&x.re).then(x.im.total_cmp(&y.im)));
    Ok(ev)
}

pub fn hurwitz_info(a: &DMatrix<f64>) -> Result<HurwitzInfo, SpectralError> {
    let ev = eigenvalues(a)?;
    let worst = ev
        .iter()
        .copied()
        .max_by(|x, y| x.re.total_cmp(&y.re))
        .ok_or(SpectralError::NotSquare(0, 0))?;
    if !(worst.re < 0.0) {
        return Err(SpectralError::NotHurwitz {
            re: worst.re,
            im: worst.im,
        });
    }
    Ok(HurwitzInfo {
        matrix: a.clone(),
        decay_rate: -worst.re,
        eigenvalues: ev,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsymptoticCovariance {
    pub v: DMatrix<f64>,
    pub regime: RegimeTag,
    pub residual_norm: f64,
}

/// Column-major vectorisation index of entry `(i, j)` in a `d × d` matrix.
#[inline]
fn vec_index(d: usize, i: usize, j: usize) -> usize {
    i + j * d
}

/// Solve `M X + X Mᵀ = -C` through the Kronecker sum, with one step of
/// iterative refinement.
pub(crate) fn solve_kronecker_lyapunov(
    m: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SpectralError> {
    let d = check_square(m)?;
    check_dims(d, c)?;
    let n = d * d;
    // (I ⊗ M + M ⊗ I) acting on column-major vec(X)
    let mut k = DMatrix::<f64>::zeros(n, n);
    for j in 0..d {
        for i in 0..d {
            let row = vec_index(d, i, j);
            for p in 0..d {
                // (M X)_{ij} = Σ_p M_{ip} X_{pj}
                k[(row, vec_index(d, p, j))] += m[(i, p)];
                // (X Mᵀ)_{ij} = Σ_p X_{ip} M_{jp}
                k[(row, vec_index(d, i, p))] += m[(j, p)];
            }
        }
    }
    let lu = k.clone().lu();
    let u = lu.u();
    let diag_max = u.diagonal().amax();
    let diag_min = u
        .diagonal()
        .iter()
        .fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    if !(diag_max > 0.0) || diag_min <= diag_max * 1e-14 {
        return Err(SpectralError::SingularSystem);
    }
    let rhs = nalgebra::DVector::from_iterator(n, c.iter().map(|v| -v));
    let mut x = lu.solve(&rhs).ok_or(SpectralError::SingularSystem)?;
    let r = &rhs - &k * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::SingularSystem);
    }
    Ok(DMatrix::from_column_slice(d, d, x.as_slice()))
}

fn check_noise_matrix(u: &DMatrix<f64>) -> Result<(), SpectralError> {
    let asym = linalg::asymmetry(u);
    if asym > SYMMETRY_TOL * (1.0 + u.amax()) {
        return Err(SpectralError::NotSymmetric(asym));
    }
    Ok(())
}

fn check_positive_definite(v: &DMatrix<f64>) -> Result<(), SpectralError> {
    let lo = min_symmetric_eigenvalue(v);
    if !(lo > PD_RELATIVE_FLOOR * spectral_norm(v)) {
        return Err(SpectralError::NotPositiveDefinite(lo));
    }
    Ok(())
}

fn finish(
    v: DMatrix<f64>,
    residual: f64,
    u: &DMatrix<f64>,
    regime: RegimeTag,
) -> Result<AsymptoticCovariance, SpectralError> {
    let bound = LYAPUNOV_RESIDUAL_TOL * (1.0 + frobenius(u));
    if !(residual <= bound) {
        return Err(SpectralError::InaccurateSolution { residual, bound });
    }
    check_positive_definite(&v)?;
    Ok(AsymptoticCovariance {
        v,
        regime,
        residual_norm: residual,
    })
}

/// Residual `‖V Aᵀ + A V + U‖_F`.
pub fn slow_residual(a: &DMatrix<f64>, u: &DMatrix<f64>, v: &DMatrix<f64>) -> f64 {
    frobenius(&(v * a.transpose() + a * v + u))
}

/// Residual `‖V (I + 2γ* Aᵀ) + (I + 2γ* A) V + 2γ* U‖_F`.
pub fn fast_residual(a: &DMatrix<f64>, u: &DMatrix<f64>, gamma_star: f64, v: &DMatrix<f64>) -> f64 {
    let id = DMatrix::<f64>::identity(a.nrows(), a.ncols());
    let b = &id + a * (2.0 * gamma_star);
    frobenius(&(v * b.transpose() + &b * v + u * (2.0 * gamma_star)))
}

/// Limiting covariance of `γ_n^{-1/2}(θ_n - θ*)` when `a ∈ (1/2, 1)`.
pub fn solve_lyapunov_slow(
    a: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<AsymptoticCovariance, SpectralError> {
    let d = check_square(a)?;
    check_dims(d, u)?;
    hurwitz_info(a)?;
    check_noise_matrix(u)?;
    let v = symmetrize(&solve_kronecker_lyapunov(a, u)?);
    let residual = slow_residual(a, u, &v);
    finish(v, residual, u, RegimeTag::SlowC2a)
}

/// Limiting covariance of `γ_n^{-1/2}(θ_n - θ*)` when `γ_n = γ*/n`.
///
/// Dividing by `2γ*` turns the equation into `B V + V Bᵀ = -U` with
/// `B = A + I/(2γ*)`, which is Hurwitz exactly when `2Lγ* > 1`.
pub fn solve_lyapunov_fast(
    a: &DMatrix<f64>,
    u: &DMatrix<f64>,
    gamma_star: f64,
) -> Result<AsymptoticCovariance, SpectralError> {
    let d = check_square(a)?;
    check_dims(d, u)?;
    if !(gamma_star.is_finite() && gamma_star > 0.0) {
        return Err(SpectralError::InvalidGammaStar(gamma_star));
    }
    let info = hurwitz_info(a)?;
    let two_l_gamma = 2.0 * info.decay_rate * gamma_star;
    if !(two_l_gamma > 1.0) {
        return Err(SpectralError::RegimeViolation { two_l_gamma });
    }
    check_noise_matrix(u)?;
    let shifted = a + DMatrix::<f64>::identity(d, d) * (0.5 / gamma_star);
    let v = symmetrize(&solve_kronecker_lyapunov(&shifted, u)?);
    let residual = fast_residual(a, u, gamma_star, &v);
    finish(v, residual, u, RegimeTag::FastC2b)
}

fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>, SpectralError> {
    check_square(a)?;
    let inv = a.clone().try_inverse().ok_or(SpectralError::Singular)?;
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::Singular);
    }
    Ok(inv)
}

/// The gain `Γ* = -γ*⁻¹ A⁻¹` minimising the fast-rate covariance.
pub fn optimal_gain(a: &DMatrix<f64>, gamma_star: f64) -> Result<DMatrix<f64>, SpectralError> {
    if !(gamma_star.is_finite() && gamma_star > 0.0) {
        return Err(SpectralError::InvalidGammaStar(gamma_star));
    }
    Ok(inverse(a)? * (-1.0 / gamma_star))
}

/// `A⁻¹ U A⁻ᵀ`, the covariance of `√n(θ̄_n - θ*)`.
pub fn optimal_covariance(
    a: &DMatrix<f64>,
    u: &DMatrix<f64>,
) -> Result<DMatrix<f64>, SpectralError> {
    let d = check_square(a)?;
    check_dims(d, u)?;
    check_noise_matrix(u)?;
    let inv = inverse(a)?;
    Ok(symmetrize(&(&inv * u * inv.transpose())))
}

/// `γ*⁻¹ A⁻¹ U A⁻ᵀ`, the fast-rate covariance of `γ_n^{-1/2}(θ̃_n - θ*)` reached
/// with the optimal gain.
pub fn gain_optimal_covariance(
    a: &DMatrix<f64>,
    u: &DMatrix<f64>,
    gamma_star: f64,
) -> Result<DMatrix<f64>, SpectralError> {
    if !(gamma_star.is_finite() && gamma_star > 0.0) {
        return Err(SpectralError::InvalidGammaStar(gamma_star));
    }
    Ok(optimal_covariance(a, u)? / gamma_star)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductBound {
    /// Spectral norm of `(I + γ_n A_n) ⋯ (I + γ_k A_k)`.
    pub lhs: f64,
    /// `exp(-L' Σ_{j=k}^n γ_j)`.
    pub rhs_envelope: f64,
}

/// Evaluate both sides of the Hurwitz-product bound
/// `|∏_{j=k}^{n} (I + γ_j A_j)| ≤ C exp(-L' Σ_{j=k}^{n} γ_j)`.
///
/// `k = n + 1` is the empty product (identity, envelope 1). Indices start at 1.
pub fn hurwitz_product_bound_check<F>(
    a_seq: F,
    schedule: &StepSchedule,
    l_prime: f64,
    k: u64,
    n: u64,
) -> Result<ProductBound, SpectralError>
where
    F: Fn(u64) -> DMatrix<f64>,
{
    if !(l_prime.is_finite() && l_prime > 0.0) {
        return Err(SpectralError::InvalidEnvelopeRate(l_prime));
    }
    let first = a_seq(k.max(1));
    let d = check_square(&first)?;
    let mut prod = DMatrix::<f64>::identity(d, d);
    let mut gamma_sum = 0.0;
    for j in k.max(1)..=n {
        let aj = if j == k { first.clone() } else { a_seq(j) };
        check_dims(d, &aj)?;
        let g = schedule.gamma(j);
        // left-multiply: later factors act last
        prod = (DMatrix::<f64>::identity(d, d) + aj * g) * prod;
        gamma_sum += g;
    }
    Ok(ProductBound {
        lhs: spectral_norm(&prod),
        rhs_envelope: (-l_prime * gamma_sum).exp(),
    })
}

/// Running ratios `lhs / envelope` for `n = k..=horizon` with a fixed `A`,
/// computed incrementally. Used for boundedness checks over long horizons.
pub fn product_envelope_ratios(
    a: &DMatrix<f64>,
    schedule: &StepSchedule,
    l_prime: f64,
    k: u64,
    horizon: u64,
) -> Result<Vec<f64>, SpectralError> {
    let d = check_square(a)?;
    if !(l_prime.is_finite() && l_prime > 0.0) {
        return Err(SpectralError::InvalidEnvelopeRate(l_prime));
    }
    let id = DMatrix::<f64>::identity(d, d);
    let mut prod = id.clone();
    let mut log_env = 0.0;
    let mut out = Vec::with_capacity((horizon + 1).saturating_sub(k) as usize);
    for j in k.max(1)..=horizon {
        let g = schedule.gamma(j);
        prod = (&id + a * g) * prod;
        log_env -= l_prime * g;
        out.push(spectral_norm(&prod) / log_env.exp());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn hurwitz_examples() {
        let info = hurwitz_info(&(-DMatrix::<f64>::identity(2, 2))).unwrap();
        assert_eq!(info.decay_rate, 1.0);
        // λ² + 3λ + 2 = (λ + 1)(λ + 2)
        let info = hurwitz_info(&m(2, &[0.0, 1.0, -2.0, -3.0])).unwrap();
        assert_relative_eq!(info.decay_rate, 1.0, epsilon = 1e-12);
        assert_relative_eq!(info.eigenvalues[1].re, -2.0, epsilon = 1e-12);
        match hurwitz_info(&m(2, &[0.0, 1.0, -1.0, 0.0])) {
            Err(SpectralError::NotHurwitz { re, im }) => {
                assert!(re.abs() < 1e-12);
                assert_relative_eq!(im.abs(), 1.0, epsilon = 1e-12);
            }
            other => panic!("expected NotHurwitz, got {other:?}"),
        }
        assert!(matches!(
            hurwitz_info(&m(1, &[1.0, 2.0])),
            Err(SpectralError::NotSquare(1, 2))
        ));
    }

    #[test]
    fn slow_lyapunov_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        let cov = solve_lyapunov_slow(&(-&id), &(&id * 2.0)).unwrap();
        assert_relative_eq!(cov.v, id, epsilon = 1e-14);
        assert_eq!(cov.regime, RegimeTag::SlowC2a);
        let cov = solve_lyapunov_slow(&m(1, &[-1.0]), &m(1, &[4.0])).unwrap();
        assert_relative_eq!(cov.v[(0, 0)], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn fast_lyapunov_examples() {
        let cov = solve_lyapunov_fast(&m(1, &[-1.0]), &m(1, &[4.0]), 1.0).unwrap();
        assert_relative_eq!(cov.v[(0, 0)], 4.0, epsilon = 1e-14);
        let id = DMatrix::<f64>::identity(3, 3);
        let cov = solve_lyapunov_fast(&(-&id), &id, 1.0).unwrap();
        assert_relative_eq!(cov.v, id, epsilon = 1e-14);
        // γ* U / (2 γ* L - 1) = 0.5 / 1
        let cov = solve_lyapunov_fast(&m(1, &[-2.0]), &m(1, &[1.0]), 0.5).unwrap();
        assert_relative_eq!(cov.v[(0, 0)], 0.5, epsilon = 1e-14);
        assert!(cov.residual_norm < 1e-14);
    }

    #[test]
    fn fast_lyapunov_rejects_slow_gain() {
        let err = solve_lyapunov_fast(&m(1, &[-1.0]), &m(1, &[1.0]), 0.5).unwrap_err();
        assert_eq!(err, SpectralError::RegimeViolation { two_l_gamma: 1.0 });
        assert!(matches!(
            solve_lyapunov_fast(&m(1, &[1.0]), &m(1, &[1.0]), 1.0),
            Err(SpectralError::NotHurwitz { .. })
        ));
    }

    #[test]
    fn slow_lyapunov_rejects_bad_inputs() {
        assert!(matches!(
            solve_lyapunov_slow(&m(1, &[0.5]), &m(1, &[1.0])),
            Err(SpectralError::NotHurwitz { .. })
        ));
        assert!(matches!(
            solve_lyapunov_slow(&m(2, &[-1.0, 0.0, 0.0, -1.0]), &m(2, &[1.0, 0.5, 0.0, 1.0])),
            Err(SpectralError::NotSymmetric(_))
        ));
        assert!(matches!(
            solve_lyapunov_slow(&m(1, &[-1.0]), &m(1, &[0.0])),
            Err(SpectralError::NotPositiveDefinite(_))
        ));
        assert!(matches!(
            solve_lyapunov_slow(&m(1, &[-1.0]), &m(2, &[1.0, 0.0, 0.0, 1.0])),
            Err(SpectralError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gain_examples() {
        assert_relative_eq!(optimal_gain(&m(1, &[-1.0]), 1.0).unwrap()[(0, 0)], 1.0);
        let id = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(
            optimal_gain(&(&id * -2.0), 0.5).unwrap(),
            id,
            epsilon = 1e-15
        );
        // adjugate: A⁻¹ = 1/det [[d, -b], [-c, a]] with det = 2
        let a = m(2, &[-1.0, 1.0, 0.0, -2.0]);
        let adj_inv = m(2, &[-2.0, -1.0, 0.0, -1.0]) / 2.0;
        assert_relative_eq!(optimal_gain(&a, 1.0).unwrap(), -adj_inv, epsilon = 1e-15);
        assert_eq!(
            optimal_gain(&DMatrix::zeros(2, 2), 1.0),
            Err(SpectralError::Singular)
        );
    }

    #[test]
    fn averaged_covariance_examples() {
        assert_relative_eq!(
            optimal_covariance(&m(1, &[-1.0]), &m(1, &[4.0])).unwrap()[(0, 0)],
            4.0
        );
        let id = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(
            optimal_covariance(&(&id * -2.0), &id).unwrap(),
            &id * 0.25,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            gain_optimal_covariance(&m(1, &[-2.0]), &m(1, &[1.0]), 0.5).unwrap()[(0, 0)],
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn product_examples() {
        let s = StepSchedule::new(1.0, 1.0, 0).unwrap();
        let scalar = |_: u64| m(1, &[-1.0]);
        // ∏_{j=2}^{100} (1 - 1/j) telescopes to 1/100
        let pb = hurwitz_product_bound_check(scalar, &s, 0.5, 2, 100).unwrap();
        assert_relative_eq!(pb.lhs, 0.01, epsilon = 1e-14);
        let empty = hurwitz_product_bound_check(scalar, &s, 0.5, 11, 10).unwrap();
        assert_eq!(
            empty,
            ProductBound {
                lhs: 1.0,
                rhs_envelope: 1.0
            }
        );
    }

    #[test]
    fn product_with_constant_steps() {
        // γ* / (n + n₀)^a with a = 1 cannot give a constant step; emulate one by
        // scaling the matrix sequence with the schedule's inverse.
        let s = StepSchedule::new(1.0, 1.0, 0).unwrap();
        let a = -DMatrix::<f64>::identity(2, 2);
        let pb = hurwitz_product_bound_check(|j| &a * (0.1 / s.gamma(j)), &s, 0.5, 1, 50).unwrap();
        assert_relative_eq!(pb.lhs, 0.9f64.powi(50), max_relative = 1e-12);
    }

    #[test]
    fn scaling_noise_scales_solution() {
        let a = m(2, &[-1.0, 0.3, -0.2, -2.0]);
        let u = m(2, &[2.0, 0.4, 0.4, 1.0]);
        let base = solve_lyapunov_slow(&a, &u).unwrap().v;
        let scaled = solve_lyapunov_slow(&a, &(&u * 3.5)).unwrap().v;
        assert_relative_eq!(scaled, &base * 3.5, max_relative = 1e-12);
        let base = solve_lyapunov_fast(&a, &u, 2.0).unwrap().v;
        let scaled = solve_lyapunov_fast(&a, &(&u * 0.2), 2.0).unwrap().v;
        assert_relative_eq!(scaled, &base * 0.2, max_relative = 1e-12);
    }
}
