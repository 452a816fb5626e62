//! Finite-state controlled Markov kernels.
//!
//! A [`KernelFamily`] maps a parameter `θ` to a row-stochastic matrix `Q_θ`
//! and an observation `H(θ, x)`. On a finite state space every object the
//! CLT needs is exactly computable: the stationary law `π_θ`, the mean field
//! `h(θ) = Σ_x π_θ(x) H(θ, x)`, the centred Poisson solution `Ĥ_θ` of
//! `H(θ, ·) - h(θ) = Ĥ_θ - Q_θ Ĥ_θ`, the conditional covariances `F_θ(x)`
//! and the noise covariance `U* = Σ_x π(x) (Ĥ Ĥᵀ - QĤ (QĤ)ᵀ)(x)`.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{min_symmetric_eigenvalue, symmetrize};

/// Row sums must match 1 to this tolerance.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Second-largest eigenvalue modulus must not exceed `1 - ERGODIC_GAP`.
pub const ERGODIC_GAP: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MarkovError {
    #[error("kernel must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("row {row} is not a probability vector (sum {sum}, min entry {min})")]
    NotStochastic { row: usize, sum: f64, min: f64 },
    #[error("chain is not ergodic: second-largest eigenvalue modulus {slem}")]
    NonErgodic { slem: f64 },
    #[error("fundamental matrix is numerically singular")]
    SingularFundamental,
    #[error("observation table has {rows} rows for {states} states")]
    ObservationShape { rows: usize, states: usize },
    #[error("state {0} out of range")]
    StateOutOfRange(usize),
    #[error("root search did not converge (|h| = {residual:e} after {iterations} iterations)")]
    RootNotFound { residual: f64, iterations: usize },
    #[error("invalid family parameter: {0}")]
    InvalidParameter(String),
}

/// A `θ`-indexed family of transition kernels on `{0, .., S-1}` with an
/// `R^d`-valued observation.
///
/// Implementations must be deterministic and side-effect free in `θ`.
pub trait KernelFamily: Debug + Send + Sync {
    fn state_count(&self) -> usize;

    fn dim(&self) -> usize;

    fn kernel(&self, theta: &[f64]) -> DMatrix<f64>;

    /// `H(θ, x)` written into `out` (length `dim()`).
    fn observe(&self, theta: &[f64], x: usize, out: &mut [f64]);

    /// Row `Q_θ(x, ·)` written into `out` (length `state_count()`).
    fn transition_row(&self, theta: &[f64], x: usize, out: &mut [f64]) {
        let q = self.kernel(theta);
        for (o, v) in out.iter_mut().zip(q.row(x).iter()) {
            *o = *v;
        }
    }

    fn stationary(&self, theta: &[f64]) -> Result<DVector<f64>, MarkovError> {
        stationary_distribution(&self.kernel(theta))
    }

    /// Lipschitz-in-θ estimate of the kernel, for diagnostics only.
    fn lipschitz_hint(&self) -> Option<f64> {
        None
    }
}

/// `H(θ, x) = v(x) - B θ`, shared by the built-in families.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineObservation {
    /// `S × d`, row `x` is `v(x)`.
    pub values: DMatrix<f64>,
    /// `d × d`, the identity unless configured.
    pub drift: DMatrix<f64>,
}

impl AffineObservation {
    pub fn new(values: DMatrix<f64>, drift: Option<DMatrix<f64>>) -> Result<Self, MarkovError> {
        let d = values.ncols();
        if d == 0 || values.nrows() == 0 {
            return Err(MarkovError::InvalidParameter(
                "empty observation table".into(),
            ));
        }
        let drift = drift.unwrap_or_else(|| DMatrix::identity(d, d));
        if drift.nrows() != d || drift.ncols() != d {
            return Err(MarkovError::InvalidParameter(format!(
                "drift must be {d}x{d}, got {}x{}",
                drift.nrows(),
                drift.ncols()
            )));
        }
        Ok(Self { values, drift })
    }

    #[inline]
    fn eval(&self, theta: &[f64], x: usize, out: &mut [f64]) {
        let d = self.values.ncols();
        for i in 0..d {
            let mut acc = self.values[(x, i)];
            for (j, t) in theta.iter().enumerate() {
                acc -= self.drift[(i, j)] * t;
            }
            out[i] = acc;
        }
    }
}

fn validate_probabilities(p: &[f64]) -> Result<(), MarkovError> {
    let sum: f64 = p.iter().sum();
    let min = p.iter().copied().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > STOCHASTIC_TOL || min < 0.0 {
        return Err(MarkovError::NotStochastic { row: 0, sum, min });
    }
    Ok(())
}

/// θ-independent kernel whose rows all equal `probs`: i.i.d. draws.
#[derive(Debug, Clone, PartialEq)]
pub struct IidFamily {
    probs: Vec<f64>,
    observation: AffineObservation,
}

impl IidFamily {
    pub fn new(probs: Vec<f64>, observation: AffineObservation) -> Result<Self, MarkovError> {
        validate_probabilities(&probs)?;
        if observation.values.nrows() != probs.len() {
            return Err(MarkovError::ObservationShape {
                rows: observation.values.nrows(),
                states: probs.len(),
            });
        }
        Ok(Self { probs, observation })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl KernelFamily for IidFamily {
    fn state_count(&self) -> usize {
        self.probs.len()
    }

    fn dim(&self) -> usize {
        self.observation.values.ncols()
    }

    fn kernel(&self, _theta: &[f64]) -> DMatrix<f64> {
        let s = self.probs.len();
        DMatrix::from_fn(s, s, |_, j| self.probs[j])
    }

    fn observe(&self, theta: &[f64], x: usize, out: &mut [f64]) {
        self.observation.eval(theta, x, out);
    }

    fn transition_row(&self, _theta: &[f64], _x: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.probs);
    }

    fn stationary(&self, _theta: &[f64]) -> Result<DVector<f64>, MarkovError> {
        Ok(DVector::from_column_slice(&self.probs))
    }

    fn lipschitz_hint(&self) -> Option<f64> {
        Some(0.0)
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Two-state chain whose switching probabilities follow a logistic curve in
/// the first coordinate of `θ`:
///
/// `Q_θ(0, 1) = ε + (1 - 2ε) m σ(θ₀)`, `Q_θ(1, 0) = ε + (1 - 2ε) m σ(-θ₀)`.
///
/// The mixing factor `m ∈ (0, 1]` keeps the two rows distinct, so the chain
/// is genuinely Markov (second eigenvalue `1 - 2ε - (1 - 2ε) m`).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStateLogistic {
    epsilon: f64,
    mixing: f64,
    observation: AffineObservation,
}

impl TwoStateLogistic {
    pub fn new(
        epsilon: f64,
        mixing: f64,
        observation: AffineObservation,
    ) -> Result<Self, MarkovError> {
        if !(epsilon > 0.0 && epsilon < 0.5) {
            return Err(MarkovError::InvalidParameter(format!(
                "epsilon must lie in (0, 1/2), got {epsilon}"
            )));
        }
        if !(mixing > 0.0 && mixing <= 1.0) {
            return Err(MarkovError::InvalidParameter(format!(
                "mixing must lie in (0, 1], got {mixing}"
            )));
        }
        if observation.values.nrows() != 2 {
            return Err(MarkovError::ObservationShape {
                rows: observation.values.nrows(),
                states: 2,
            });
        }
        Ok(Self {
            epsilon,
            mixing,
            observation,
        })
    }

    #[inline]
    fn switch_probs(&self, theta: &[f64]) -> (f64, f64) {
        let scale = (1.0 - 2.0 * self.epsilon) * self.mixing;
        let s = sigmoid(theta[0]);
        (self.epsilon + scale * s, self.epsilon + scale * (1.0 - s))
    }
}

impl KernelFamily for TwoStateLogistic {
    fn state_count(&self) -> usize {
        2
    }

    fn dim(&self) -> usize {
        self.observation.values.ncols()
    }

    fn kernel(&self, theta: &[f64]) -> DMatrix<f64> {
        let (p, q) = self.switch_probs(theta);
        DMatrix::from_row_slice(2, 2, &[1.0 - p, p, q, 1.0 - q])
    }

    fn observe(&self, theta: &[f64], x: usize, out: &mut [f64]) {
        self.observation.eval(theta, x, out);
    }

    #[inline]
    fn transition_row(&self, theta: &[f64], x: usize, out: &mut [f64]) {
        let (p, q) = self.switch_probs(theta);
        if x == 0 {
            out[0] = 1.0 - p;
            out[1] = p;
        } else {
            out[0] = q;
            out[1] = 1.0 - q;
        }
    }

    fn stationary(&self, theta: &[f64]) -> Result<DVector<f64>, MarkovError> {
        let (p, q) = self.switch_probs(theta);
        Ok(DVector::from_column_slice(&[q / (p + q), p / (p + q)]))
    }

    fn lipschitz_hint(&self) -> Option<f64> {
        Some(0.25 * (1.0 - 2.0 * self.epsilon) * self.mixing)
    }
}

/// θ-independent kernel given explicitly, with the affine observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedKernelFamily {
    matrix: DMatrix<f64>,
    observation: AffineObservation,
}

impl FixedKernelFamily {
    pub fn new(matrix: DMatrix<f64>, observation: AffineObservation) -> Result<Self, MarkovError> {
        validate_kernel(&matrix)?;
        if observation.values.nrows() != matrix.nrows() {
            return Err(MarkovError::ObservationShape {
                rows: observation.values.nrows(),
                states: matrix.nrows(),
            });
        }
        Ok(Self {
            matrix,
            observation,
        })
    }
}

impl KernelFamily for FixedKernelFamily {
    fn state_count(&self) -> usize {
        self.matrix.nrows()
    }

    fn dim(&self) -> usize {
        self.observation.values.ncols()
    }

    fn kernel(&self, _theta: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }

    fn observe(&self, theta: &[f64], x: usize, out: &mut [f64]) {
        self.observation.eval(theta, x, out);
    }

    fn transition_row(&self, _theta: &[f64], x: usize, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(self.matrix.row(x).iter()) {
            *o = *v;
        }
    }

    fn lipschitz_hint(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// Check that `q` is square, non-negative and row-stochastic.
pub fn validate_kernel(q: &DMatrix<f64>) -> Result<(), MarkovError> {
    if q.nrows() != q.ncols() || q.nrows() == 0 {
        return Err(MarkovError::NotSquare(q.nrows(), q.ncols()));
    }
    for (row, r) in q.row_iter().enumerate() {
        let sum: f64 = r.iter().sum();
        let min = r.iter().copied().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > STOCHASTIC_TOL || min < 0.0 || !sum.is_finite() {
            return Err(MarkovError::NotStochastic { row, sum, min });
        }
    }
    Ok(())
}

/// Second-largest eigenvalue modulus (the eigenvalue nearest 1 is removed).
/// NaN when the eigenvalue iteration fails, which callers treat as non-ergodic.
pub fn second_eigenvalue_modulus(q: &DMatrix<f64>) -> f64 {
    if q.nrows() < 2 {
        return 0.0;
    }
    let Some(ev) = crate::linalg::complex_eigenvalues(q) else {
        return f64::NAN;
    };
    let unit = ev
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - 1.0).norm().total_cmp(&(b.1 - 1.0).norm()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    ev.iter()
        .enumerate()
        .filter(|(i, _)| *i != unit)
        .map(|(_, z)| z.norm())
        .fold(0.0, f64::max)
}

/// The unique invariant law `π Q = π` of an ergodic kernel.
pub fn stationary_distribution(q: &DMatrix<f64>) -> Result<DVector<f64>, MarkovError> {
    validate_kernel(q)?;
    let s = q.nrows();
    let slem = second_eigenvalue_modulus(q);
    if !(slem <= 1.0 - ERGODIC_GAP) {
        return Err(MarkovError::NonErgodic { slem });
    }
    // (Qᵀ - I) π = 0 with the last equation replaced by Σπ = 1
    let mut m = q.transpose() - DMatrix::<f64>::identity(s, s);
    for j in 0..s {
        m[(s - 1, j)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(s);
    rhs[s - 1] = 1.0;
    let pi = m.lu().solve(&rhs).ok_or(MarkovError::NonErgodic { slem })?;
    if pi.iter().any(|p| !(p.is_finite() && *p > 0.0)) {
        return Err(MarkovError::NonErgodic { slem });
    }
    Ok(pi)
}

/// `H(θ, x)` for every state, as an `S × d` table.
pub fn observation_table(family: &dyn KernelFamily, theta: &[f64]) -> DMatrix<f64> {
    let (s, d) = (family.state_count(), family.dim());
    let mut table = DMatrix::<f64>::zeros(s, d);
    let mut buf = vec![0.0; d];
    for x in 0..s {
        family.observe(theta, x, &mut buf);
        for (i, v) in buf.iter().enumerate() {
            table[(x, i)] = *v;
        }
    }
    table
}

/// `h(θ) = Σ_x π_θ(x) H(θ, x)`.
pub fn mean_field(family: &dyn KernelFamily, theta: &[f64]) -> Result<DVector<f64>, MarkovError> {
    let pi = family.stationary(theta)?;
    let table = observation_table(family, theta);
    Ok(table.transpose() * pi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoissonSolution {
    pub pi: DVector<f64>,
    /// `S × d`, row `x` is `ĝ(x)`, normalised so that `π ĝ = 0`.
    pub g_hat: DMatrix<f64>,
    /// `S × d`, row `x` is `(Q ĝ)(x)`.
    pub qg_hat: DMatrix<f64>,
    /// `π g`.
    pub mean: DVector<f64>,
}

impl PoissonSolution {
    /// `max_x |g(x) - πg - ĝ(x) + (Qĝ)(x)|`.
    pub fn identity_residual(&self, g: &DMatrix<f64>) -> f64 {
        let s = g.nrows();
        let centred = g - DMatrix::from_fn(s, g.ncols(), |_, j| self.mean[j]);
        (centred - &self.g_hat + &self.qg_hat).amax()
    }
}

/// Solve `g - πg = ĝ - Qĝ` with `ĝ = Z (g - 1·πg)`, `Z = (I - Q + 1πᵀ)⁻¹`.
pub fn poisson_solve(q: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<PoissonSolution, MarkovError> {
    let pi = stationary_distribution(q)?;
    poisson_solve_with(q, &pi, g)
}

fn poisson_solve_with(
    q: &DMatrix<f64>,
    pi: &DVector<f64>,
    g: &DMatrix<f64>,
) -> Result<PoissonSolution, MarkovError> {
    let s = q.nrows();
    if g.nrows() != s {
        return Err(MarkovError::ObservationShape {
            rows: g.nrows(),
            states: s,
        });
    }
    let mean = g.transpose() * pi;
    let centred = g - DMatrix::from_fn(s, g.ncols(), |_, j| mean[j]);
    let ones = DVector::<f64>::from_element(s, 1.0);
    let fundamental_inv = DMatrix::<f64>::identity(s, s) - q + ones * pi.transpose();
    let lu = fundamental_inv.lu();
    let diag = lu.u().diagonal();
    if diag.iter().any(|v| v.abs() < 1e-13 * diag.amax().max(1.0)) {
        return Err(MarkovError::SingularFundamental);
    }
    let g_hat = lu.solve(&centred).ok_or(MarkovError::SingularFundamental)?;
    let qg_hat = q * &g_hat;
    Ok(PoissonSolution {
        pi: pi.clone(),
        g_hat,
        qg_hat,
        mean,
    })
}

/// Poisson solution for `(Q_θ, H(θ, ·))`.
pub fn family_poisson(
    family: &dyn KernelFamily,
    theta: &[f64],
) -> Result<PoissonSolution, MarkovError> {
    let q = family.kernel(theta);
    validate_kernel(&q)?;
    let pi = family.stationary(theta)?;
    poisson_solve_with(&q, &pi, &observation_table(family, theta))
}

fn row(m: &DMatrix<f64>, x: usize) -> DVector<f64> {
    m.row(x).transpose()
}

/// `F(x) = Σ_y Q(x, y) ĝ(y) ĝ(y)ᵀ - (Qĝ)(x) (Qĝ)(x)ᵀ` for every state.
pub fn conditional_covariances(q: &DMatrix<f64>, sol: &PoissonSolution) -> Vec<DMatrix<f64>> {
    let s = q.nrows();
    let d = sol.g_hat.ncols();
    let second: Vec<DMatrix<f64>> = (0..s)
        .map(|y| {
            let v = row(&sol.g_hat, y);
            &v * v.transpose()
        })
        .collect();
    (0..s)
        .map(|x| {
            let mut f = DMatrix::<f64>::zeros(d, d);
            for (y, sy) in second.iter().enumerate() {
                f += sy * q[(x, y)];
            }
            let m = row(&sol.qg_hat, x);
            symmetrize(&(f - &m * m.transpose()))
        })
        .collect()
}

/// `F_θ(x)` for each state `x`.
pub fn f_theta(family: &dyn KernelFamily, theta: &[f64]) -> Result<Vec<DMatrix<f64>>, MarkovError> {
    let sol = family_poisson(family, theta)?;
    Ok(conditional_covariances(&family.kernel(theta), &sol))
}

/// The martingale-noise covariance at a parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    pub matrix: DMatrix<f64>,
    pub min_eigenvalue: f64,
}

impl NoiseCovariance {
    fn new(matrix: DMatrix<f64>) -> Self {
        let min_eigenvalue = min_symmetric_eigenvalue(&matrix);
        Self {
            matrix,
            min_eigenvalue,
        }
    }

    /// `false` when the CLT is degenerate along some direction.
    pub fn is_positive_definite(&self) -> bool {
        self.min_eigenvalue > 1e-12 * self.matrix.amax()
    }
}

/// `Σ_x π(x) (ĝ(x) ĝ(x)ᵀ - (Qĝ)(x) (Qĝ)(x)ᵀ)`.
pub fn poisson_noise_covariance(sol: &PoissonSolution) -> DMatrix<f64> {
    let d = sol.g_hat.ncols();
    let mut u = DMatrix::<f64>::zeros(d, d);
    for (x, p) in sol.pi.iter().enumerate() {
        let g = row(&sol.g_hat, x);
        let m = row(&sol.qg_hat, x);
        u += (&g * g.transpose() - &m * m.transpose()) * *p;
    }
    symmetrize(&u)
}

/// `U*` at `theta_star` for controlled-Markov dynamics.
pub fn u_star(
    family: &dyn KernelFamily,
    theta_star: &[f64],
) -> Result<NoiseCovariance, MarkovError> {
    let sol = family_poisson(family, theta_star)?;
    let cov = NoiseCovariance::new(poisson_noise_covariance(&sol));
    if !cov.is_positive_definite() {
        log::warn!(
            "U* is singular at {:?} (smallest eigenvalue {:e}); the limit is degenerate",
            theta_star,
            cov.min_eigenvalue
        );
    }
    Ok(cov)
}

/// `Cov_π(H(θ, ·))`, the noise covariance when `X` is drawn afresh from `π_θ`
/// at every step (Robbins-Monro and i.i.d. dynamics).
pub fn fresh_draw_covariance(
    family: &dyn KernelFamily,
    theta: &[f64],
) -> Result<NoiseCovariance, MarkovError> {
    let pi = family.stationary(theta)?;
    let s = pi.len();
    let q = DMatrix::from_fn(s, s, |_, j| pi[j]);
    let sol = poisson_solve_with(&q, &pi, &observation_table(family, theta))?;
    Ok(NoiseCovariance::new(poisson_noise_covariance(&sol)))
}

/// Central-difference Jacobian of `f` with one Richardson extrapolation step.
pub fn numerical_jacobian<F>(f: F, theta: &[f64], step: f64) -> Result<DMatrix<f64>, MarkovError>
where
    F: Fn(&[f64]) -> Result<DVector<f64>, MarkovError>,
{
    let d = theta.len();
    let f0 = f(theta)?;
    let mut jac = DMatrix::<f64>::zeros(f0.len(), d);
    let mut probe = theta.to_vec();
    let mut central = |j: usize, h: f64| -> Result<DVector<f64>, MarkovError> {
        probe[j] = theta[j] + h;
        let plus = f(&probe)?;
        probe[j] = theta[j] - h;
        let minus = f(&probe)?;
        probe[j] = theta[j];
        Ok((plus - minus) / (2.0 * h))
    };
    for j in 0..d {
        let h = step * theta[j].abs().max(1.0);
        let coarse = central(j, h)?;
        let fine = central(j, h / 2.0)?;
        let col = (fine * 4.0 - coarse) / 3.0;
        jac.set_column(j, &col);
    }
    Ok(jac)
}

/// Newton iteration on `h` from `guess`, with a numerical Jacobian.
pub fn find_root<F>(h: F, guess: &[f64], tol: f64) -> Result<DVector<f64>, MarkovError>
where
    F: Fn(&[f64]) -> Result<DVector<f64>, MarkovError>,
{
    const MAX_ITER: usize = 100;
    let mut theta = guess.to_vec();
    let mut value = h(&theta)?;
    for it in 0..MAX_ITER {
        if value.amax() <= tol {
            return Ok(DVector::from_vec(theta));
        }
        let jac = numerical_jacobian(&h, &theta, 1e-4)?;
        let delta = jac.lu().solve(&value).ok_or(MarkovError::RootNotFound {
            residual: value.amax(),
            iterations: it,
        })?;
        // damped step: halve until |h| decreases
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = theta
                .iter()
                .zip(delta.iter())
                .map(|(a, b)| a - t * b)
                .collect();
            let tv = h(&trial)?;
            if tv.amax() < value.amax() || t < 1e-6 {
                theta = trial;
                value = tv;
                break;
            }
            t *= 0.5;
        }
    }
    if value.amax() <= tol {
        return Ok(DVector::from_vec(theta));
    }
    Err(MarkovError::RootNotFound {
        residual: value.amax(),
        iterations: MAX_ITER,
    })
}

/// Named built-in families, as they appear in experiment files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Iid {
        probs: Vec<f64>,
        values: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        drift: Option<Vec<Vec<f64>>>,
    },
    TwoStateLogistic {
        epsilon: f64,
        mixing: f64,
        values: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        drift: Option<Vec<Vec<f64>>>,
    },
    Custom {
        matrix: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        drift: Option<Vec<Vec<f64>>>,
    },
}

impl FamilySpec {
    pub fn build(&self) -> Result<std::sync::Arc<dyn KernelFamily>, MarkovError> {
        use crate::linalg::from_rows;
        let matrix = |rows: &[Vec<f64>], what: &str| {
            from_rows(rows)
                .ok_or_else(|| MarkovError::InvalidParameter(format!("{what} is ragged")))
        };
        let observation = |values: &[Vec<f64>], drift: &Option<Vec<Vec<f64>>>| {
            let v = matrix(values, "values")?;
            let b = drift.as_deref().map(|d| matrix(d, "drift")).transpose()?;
            AffineObservation::new(v, b)
        };
        Ok(match self {
            FamilySpec::Iid {
                probs,
                values,
                drift,
            } => std::sync::Arc::new(IidFamily::new(probs.clone(), observation(values, drift)?)?),
            FamilySpec::TwoStateLogistic {
                epsilon,
                mixing,
                values,
                drift,
            } => std::sync::Arc::new(TwoStateLogistic::new(
                *epsilon,
                *mixing,
                observation(values, drift)?,
            )?),
            FamilySpec::Custom {
                matrix: m,
                values,
                drift,
            } => std::sync::Arc::new(FixedKernelFamily::new(
                matrix(m, "matrix")?,
                observation(values, drift)?,
            )?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn m(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    fn scalar_obs(values: &[f64]) -> AffineObservation {
        AffineObservation::new(DMatrix::from_column_slice(values.len(), 1, values), None).unwrap()
    }

    #[test]
    fn stationary_examples() {
        let pi = stationary_distribution(&m(2, &[0.5, 0.5, 0.5, 0.5])).unwrap();
        assert_relative_eq!(pi, DVector::from_column_slice(&[0.5, 0.5]), epsilon = 1e-15);
        // two-state balance: π = (q, p) / (p + q)
        let pi = stationary_distribution(&m(2, &[0.7, 0.3, 0.6, 0.4])).unwrap();
        assert_relative_eq!(pi[0], 2.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(pi[1], 1.0 / 3.0, epsilon = 1e-14);
        assert!(matches!(
            stationary_distribution(&DMatrix::identity(2, 2)),
            Err(MarkovError::NonErgodic { .. })
        ));
    }

    #[test]
    fn periodic_and_malformed_kernels_are_rejected() {
        assert!(matches!(
            stationary_distribution(&m(2, &[0.0, 1.0, 1.0, 0.0])),
            Err(MarkovError::NonErgodic { .. })
        ));
        assert!(matches!(
            stationary_distribution(&m(2, &[0.5, 0.6, 0.5, 0.5])),
            Err(MarkovError::NotStochastic { row: 0, .. })
        ));
        assert!(matches!(
            stationary_distribution(&m(2, &[1.2, -0.2, 0.5, 0.5])),
            Err(MarkovError::NotStochastic { .. })
        ));
        assert!(matches!(
            stationary_distribution(&m(1, &[0.5, 0.5])),
            Err(MarkovError::NotSquare(1, 2))
        ));
    }

    #[test]
    fn mean_field_examples() {
        let fam = IidFamily::new(vec![0.25, 0.75], scalar_obs(&[2.0, -1.0])).unwrap();
        // Σπ v - θ = 0.5 - 0.75 - θ
        let h = mean_field(&fam, &[0.4]).unwrap();
        assert_relative_eq!(h[0], 0.5 - 0.75 - 0.4, epsilon = 1e-15);

        let fam =
            FixedKernelFamily::new(m(2, &[0.7, 0.3, 0.6, 0.4]), scalar_obs(&[0.0, 1.0])).unwrap();
        let h = mean_field(&fam, &[0.2]).unwrap();
        assert_relative_eq!(h[0], 1.0 / 3.0 - 0.2, epsilon = 1e-14);
    }

    #[test]
    fn poisson_examples() {
        let q = m(2, &[0.3, 0.7, 0.3, 0.7]);
        let g = m(2, &[1.0, 2.0, -1.0, 5.0]);
        let sol = poisson_solve(&q, &g).unwrap();
        let mean = DVector::from_column_slice(&[0.3 - 0.7, 0.6 + 3.5]);
        assert_relative_eq!(sol.mean, mean, epsilon = 1e-14);
        let expect = &g - DMatrix::from_fn(2, 2, |_, j| mean[j]);
        assert_relative_eq!(sol.g_hat, expect, epsilon = 1e-14);
        assert!(sol.qg_hat.amax() < 1e-14);

        let constant = m(3, &[2.0, 2.0, 2.0]);
        let q3 = m(3, &[0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2]);
        let sol = poisson_solve(&q3, &constant).unwrap();
        assert!(sol.g_hat.amax() < 1e-14);
        assert!(sol.identity_residual(&constant) < 1e-14);
    }

    #[test]
    fn poisson_identity_and_centering_hold() {
        let q = m(3, &[0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2]);
        let g = m(3, &[1.0, -2.0, 0.5, 3.0, -1.0, 0.0]);
        let sol = poisson_solve(&q, &g).unwrap();
        assert!(sol.identity_residual(&g) < 1e-12);
        assert!((sol.g_hat.transpose() * &sol.pi).amax() < 1e-12);
    }

    #[test]
    fn f_theta_examples() {
        let fam = IidFamily::new(vec![0.2, 0.8], scalar_obs(&[1.0, 0.0])).unwrap();
        let fs = f_theta(&fam, &[0.0]).unwrap();
        // Bernoulli(0.2) variance
        for f in &fs {
            assert_relative_eq!(f[(0, 0)], 0.16, epsilon = 1e-14);
        }
        // a point-mass row has zero conditional covariance
        let q = m(3, &[0.0, 1.0, 0.0, 0.3, 0.3, 0.4, 0.5, 0.25, 0.25]);
        let fam = FixedKernelFamily::new(q, scalar_obs(&[1.0, -1.0, 2.0])).unwrap();
        let fs = f_theta(&fam, &[0.0]).unwrap();
        assert!(fs[0].amax() < 1e-14);
        assert!(fs.iter().all(|f| min_symmetric_eigenvalue(f) >= -1e-12));
    }

    #[test]
    fn u_star_examples() {
        let fam = IidFamily::new(vec![0.5, 0.5], scalar_obs(&[0.0, 1.0])).unwrap();
        let u = u_star(&fam, &[0.5]).unwrap();
        assert_relative_eq!(u.matrix[(0, 0)], 0.25, epsilon = 1e-15);
        assert!(u.is_positive_definite());
        let v = fresh_draw_covariance(&fam, &[0.5]).unwrap();
        assert_relative_eq!(v.matrix[(0, 0)], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn u_star_matches_two_state_closed_form() {
        // variance of v under π times (1 + λ)/(1 - λ), λ = 1 - p - q
        let fam = TwoStateLogistic::new(0.05, 0.5, scalar_obs(&[-1.0, 2.0])).unwrap();
        let theta = [0.3];
        let q = fam.kernel(&theta);
        let (p01, p10) = (q[(0, 1)], q[(1, 0)]);
        let lambda = 1.0 - p01 - p10;
        let pi1 = p01 / (p01 + p10);
        let var = 9.0 * pi1 * (1.0 - pi1);
        let expected = var * (1.0 + lambda) / (1.0 - lambda);
        let u = u_star(&fam, &theta).unwrap();
        assert_relative_eq!(u.matrix[(0, 0)], expected, max_relative = 1e-12);
    }

    #[test]
    fn u_star_invariant_to_poisson_constant() {
        let q = m(3, &[0.2, 0.5, 0.3, 0.1, 0.1, 0.8, 0.6, 0.2, 0.2]);
        let g = m(3, &[1.0, -2.0, 0.5, 3.0, -1.0, 0.0]);
        let mut sol = poisson_solve(&q, &g).unwrap();
        let base = poisson_noise_covariance(&sol);
        let shift = DMatrix::from_fn(3, 2, |_, j| [4.0, -7.5][j]);
        sol.g_hat += &shift;
        sol.qg_hat = &q * &sol.g_hat;
        assert!(sol.identity_residual(&g) < 1e-12);
        assert_relative_eq!(poisson_noise_covariance(&sol), base, epsilon = 1e-11);
    }

    #[test]
    fn logistic_family_is_consistent() {
        let fam = TwoStateLogistic::new(0.05, 0.5, scalar_obs(&[-1.0, 2.0])).unwrap();
        for t in [-3.0, -0.5, 0.0, 1.7] {
            let q = fam.kernel(&[t]);
            validate_kernel(&q).unwrap();
            let direct = stationary_distribution(&q).unwrap();
            assert_relative_eq!(fam.stationary(&[t]).unwrap(), direct, epsilon = 1e-13);
            let mut row = [0.0; 2];
            fam.transition_row(&[t], 1, &mut row);
            assert_eq!(row[0], q[(1, 0)]);
        }
        assert!(TwoStateLogistic::new(0.6, 0.5, scalar_obs(&[0.0, 1.0])).is_err());
        assert!(TwoStateLogistic::new(0.1, 0.0, scalar_obs(&[0.0, 1.0])).is_err());
        assert!(TwoStateLogistic::new(0.1, 0.5, scalar_obs(&[0.0, 1.0, 2.0])).is_err());
    }

    #[test]
    fn newton_root_matches_bisection() {
        let fam = TwoStateLogistic::new(0.05, 0.5, scalar_obs(&[-1.0, 2.0])).unwrap();
        let h = |t: &[f64]| mean_field(&fam, t);
        let root = find_root(h, &[0.0], 1e-13).unwrap();
        let (mut lo, mut hi) = (-5.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_field(&fam, &[mid]).unwrap()[0] > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((root[0] - 0.5 * (lo + hi)).abs() < 1e-10);
    }

    #[test]
    fn family_spec_round_trip() {
        let spec: FamilySpec = serde_json::from_str(
            r#"{"kind":"two_state_logistic","epsilon":0.05,"mixing":0.5,"values":[[-1.0],[2.0]]}"#,
        )
        .unwrap();
        let fam = spec.build().unwrap();
        assert_eq!(fam.state_count(), 2);
        let back: FamilySpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<FamilySpec>(
            r#"{"kind":"iid","probs":[1.0],"values":[[0.0]],"bogus":1}"#
        )
        .is_err());
        let bad = FamilySpec::Custom {
            matrix: vec![vec![1.0, 0.0], vec![0.5]],
            values: vec![vec![0.0], vec![1.0]],
            drift: None,
        };
        assert!(bad.build().is_err());
    }
}
