//! The stochastic-approximation recursion.
//!
//! One step draws `X_{n+1}`, forms `θ_{n+1/2} = θ_n + γ_{n+1} H(θ_n, X_{n+1})`
//! and, under an expanding-balls policy, accepts it only if it stays in
//! `K_{σ_n}`; otherwise the iterate restarts at `θ₀` and `σ` increments.
//! The running mean `θ̄_n` averages `θ₀, .., θ_n` (divisor `n + 1`).

use std::fmt::Debug;
use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{min_symmetric_eigenvalue, psd_sqrt, symmetrize};
use crate::markov::{
    find_root, fresh_draw_covariance, mean_field, numerical_jacobian, u_star, KernelFamily,
    MarkovError,
};
use crate::schedules::StepSchedule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("non-finite iterate at step {n}: {theta:?}")]
    NonFinite { n: u64, theta: Vec<f64> },
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid truncation policy: {0}")]
    InvalidPolicy(String),
    #[error("theta0 lies outside the initial ball (distance {distance}, radius {radius})")]
    InitialOutsideBall { distance: f64, radius: f64 },
    #[error("invalid checkpoint grid: {0}")]
    InvalidGrid(String),
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("invalid noise model: {0}")]
    InvalidNoise(String),
    #[error("initial chain state {state} out of range for {states} states")]
    InvalidState { state: usize, states: usize },
    #[error("step injection is only defined for Gaussian noise")]
    InjectionUnsupported,
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

/// A deterministic mean field `h`, used with additive Gaussian noise.
pub trait MeanField: Debug + Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, theta: &[f64], out: &mut [f64]);

    fn jacobian(&self, theta: &[f64]) -> DMatrix<f64>;
}

/// `h(θ) = A (θ - θ*)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    a: DMatrix<f64>,
    root: DVector<f64>,
}

impl LinearField {
    pub fn new(a: DMatrix<f64>, root: DVector<f64>) -> Result<Self, EngineError> {
        if a.nrows() != a.ncols() || a.nrows() != root.len() || root.is_empty() {
            return Err(EngineError::DimensionMismatch {
                what: "linear field matrix",
                expected: root.len(),
                got: a.nrows().max(a.ncols()),
            });
        }
        Ok(Self { a, root })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn root(&self) -> &DVector<f64> {
        &self.root
    }
}

impl MeanField for LinearField {
    fn dim(&self) -> usize {
        self.root.len()
    }

    #[inline]
    fn eval(&self, theta: &[f64], out: &mut [f64]) {
        let d = self.root.len();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            let mut acc = 0.0;
            for j in 0..d {
                acc += self.a[(i, j)] * (theta[j] - self.root[j]);
            }
            *o = acc;
        }
    }

    fn jacobian(&self, _theta: &[f64]) -> DMatrix<f64> {
        self.a.clone()
    }
}

/// Scalar `h(θ) = θ - θ³`: stable roots `±1`, unstable root `0`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DoubleWell;

impl MeanField for DoubleWell {
    fn dim(&self) -> usize {
        1
    }

    #[inline]
    fn eval(&self, theta: &[f64], out: &mut [f64]) {
        let t = theta[0];
        out[0] = t - t * t * t;
    }

    fn jacobian(&self, theta: &[f64]) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 1.0 - 3.0 * theta[0] * theta[0])
    }
}

/// A mean field together with its noise dynamics.
#[derive(Debug, Clone)]
pub enum Problem {
    /// `H(θ, ξ) = h(θ) + ξ` with `ξ ~ N(0, Σ)` i.i.d.; `Σ` may be zero.
    Gaussian {
        field: Arc<dyn MeanField>,
        noise_cov: DMatrix<f64>,
    },
    /// `X_{n+1} ~ π_{θ_n}` drawn afresh at every step. With an i.i.d. family
    /// this is plain i.i.d. sampling over states.
    RobbinsMonro { family: Arc<dyn KernelFamily> },
    /// `X_{n+1} ~ Q_{θ_n}(X_n, ·)`.
    ControlledMarkov {
        family: Arc<dyn KernelFamily>,
        initial_state: usize,
    },
}

impl Problem {
    pub fn gaussian(
        field: Arc<dyn MeanField>,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self, EngineError> {
        let d = field.dim();
        if noise_cov.nrows() != d || noise_cov.ncols() != d {
            return Err(EngineError::DimensionMismatch {
                what: "noise covariance",
                expected: d,
                got: noise_cov.nrows().max(noise_cov.ncols()),
            });
        }
        if noise_cov.iter().any(|v| !v.is_finite())
            || (&noise_cov - noise_cov.transpose()).amax() > 1e-12
        {
            return Err(EngineError::InvalidNoise(
                "covariance must be finite and symmetric".into(),
            ));
        }
        if min_symmetric_eigenvalue(&noise_cov) < -1e-12 * noise_cov.amax().max(1.0) {
            return Err(EngineError::InvalidNoise(
                "covariance must be positive semi-definite".into(),
            ));
        }
        Ok(Problem::Gaussian {
            field,
            noise_cov: symmetrize(&noise_cov),
        })
    }

    pub fn controlled_markov(
        family: Arc<dyn KernelFamily>,
        initial_state: usize,
    ) -> Result<Self, EngineError> {
        if initial_state >= family.state_count() {
            return Err(EngineError::InvalidState {
                state: initial_state,
                states: family.state_count(),
            });
        }
        Ok(Problem::ControlledMarkov {
            family,
            initial_state,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Gaussian { field, .. } => field.dim(),
            Problem::RobbinsMonro { family } | Problem::ControlledMarkov { family, .. } => {
                family.dim()
            }
        }
    }

    pub fn dynamics(&self) -> &'static str {
        match self {
            Problem::Gaussian { .. } => "gaussian",
            Problem::RobbinsMonro { .. } => "robbins_monro",
            Problem::ControlledMarkov { .. } => "controlled_markov",
        }
    }

    pub fn family(&self) -> Option<&Arc<dyn KernelFamily>> {
        match self {
            Problem::Gaussian { .. } => None,
            Problem::RobbinsMonro { family } | Problem::ControlledMarkov { family, .. } => {
                Some(family)
            }
        }
    }

    pub fn mean_field(&self, theta: &[f64]) -> Result<DVector<f64>, EngineError> {
        self.check_dim(theta, "theta")?;
        match self {
            Problem::Gaussian { field, .. } => {
                let mut out = DVector::zeros(field.dim());
                field.eval(theta, out.as_mut_slice());
                Ok(out)
            }
            Problem::RobbinsMonro { family } | Problem::ControlledMarkov { family, .. } => {
                Ok(mean_field(family.as_ref(), theta)?)
            }
        }
    }

    /// `∇h(θ)`: analytic for Gaussian fields, extrapolated central differences
    /// for kernel families.
    pub fn jacobian(&self, theta: &[f64]) -> Result<DMatrix<f64>, EngineError> {
        self.check_dim(theta, "theta")?;
        match self {
            Problem::Gaussian { field, .. } => Ok(field.jacobian(theta)),
            Problem::RobbinsMonro { family } | Problem::ControlledMarkov { family, .. } => Ok(
                numerical_jacobian(|t| mean_field(family.as_ref(), t), theta, 1e-4)?,
            ),
        }
    }

    /// Covariance of the martingale noise at `θ`.
    pub fn noise_covariance(&self, theta: &[f64]) -> Result<DMatrix<f64>, EngineError> {
        self.check_dim(theta, "theta")?;
        match self {
            Problem::Gaussian { noise_cov, .. } => Ok(noise_cov.clone()),
            Problem::RobbinsMonro { family } => {
                Ok(fresh_draw_covariance(family.as_ref(), theta)?.matrix)
            }
            Problem::ControlledMarkov { family, .. } => Ok(u_star(family.as_ref(), theta)?.matrix),
        }
    }

    /// Newton refinement of a root guess to `|h| ≤ tol`.
    pub fn refine_root(&self, guess: &[f64], tol: f64) -> Result<DVector<f64>, EngineError> {
        self.check_dim(guess, "root guess")?;
        let h = |t: &[f64]| {
            self.mean_field(t).map_err(|e| match e {
                EngineError::Markov(m) => m,
                other => MarkovError::InvalidParameter(other.to_string()),
            })
        };
        Ok(find_root(h, guess, tol)?)
    }

    fn check_dim(&self, v: &[f64], what: &'static str) -> Result<(), EngineError> {
        if v.len() != self.dim() {
            return Err(EngineError::DimensionMismatch {
                what,
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }
}

/// Truncation sets `K_σ = ball(center, r0 · growth^σ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruncationPolicy {
    None,
    ExpandingBalls {
        r0: f64,
        growth: f64,
        center: Vec<f64>,
    },
}

impl TruncationPolicy {
    pub fn radius(&self, sigma: u64) -> f64 {
        match self {
            TruncationPolicy::None => f64::INFINITY,
            TruncationPolicy::ExpandingBalls { r0, growth, .. } => r0 * growth.powf(sigma as f64),
        }
    }

    pub fn contains(&self, theta: &[f64], sigma: u64) -> bool {
        match self {
            TruncationPolicy::None => true,
            TruncationPolicy::ExpandingBalls { center, .. } => {
                let r = self.radius(sigma);
                distance_sq(theta, center) <= r * r
            }
        }
    }

    /// Check parameters, and that `theta0 ∈ K_0`.
    pub fn validate(&self, theta0: &[f64]) -> Result<(), EngineError> {
        let TruncationPolicy::ExpandingBalls { r0, growth, center } = self else {
            return Ok(());
        };
        if !(r0.is_finite() && *r0 > 0.0) {
            return Err(EngineError::InvalidPolicy(format!(
                "r0 must be positive, got {r0}"
            )));
        }
        if !(growth.is_finite() && *growth > 1.0) {
            return Err(EngineError::InvalidPolicy(format!(
                "growth must exceed 1, got {growth}"
            )));
        }
        if center.len() != theta0.len() {
            return Err(EngineError::DimensionMismatch {
                what: "truncation center",
                expected: theta0.len(),
                got: center.len(),
            });
        }
        let distance = distance_sq(theta0, center).sqrt();
        if distance > *r0 {
            return Err(EngineError::InitialOutsideBall {
                distance,
                radius: *r0,
            });
        }
        Ok(())
    }
}

#[inline]
fn distance_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Iterate, running mean, truncation count and chain state after `n` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaState {
    pub n: u64,
    pub theta: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub sigma: u64,
    pub chain_state: Option<usize>,
}

impl SaState {
    pub fn initial(theta0: &[f64], chain_state: Option<usize>) -> Self {
        Self {
            n: 0,
            theta: theta0.to_vec(),
            theta_bar: theta0.to_vec(),
            sigma: 0,
            chain_state,
        }
    }
}

/// A ChaCha8 generator on stream `stream` of key `seed`. Distinct streams of
/// one seed are independent, which makes ensembles order-independent.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Index drawn from the probability vector `p` by inversion.
    #[inline]
    pub fn categorical(&mut self, p: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, pi) in p.iter().enumerate() {
            if *pi > 0.0 {
                acc += pi;
                last = i;
                if u < acc {
                    return i;
                }
            }
        }
        last
    }
}

/// A validated run configuration.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub problem: Problem,
    pub schedule: StepSchedule,
    pub policy: TruncationPolicy,
    pub theta0: Vec<f64>,
    pub horizon: u64,
}

impl Simulation {
    pub fn new(
        problem: Problem,
        schedule: StepSchedule,
        policy: TruncationPolicy,
        theta0: Vec<f64>,
        horizon: u64,
    ) -> Result<Self, EngineError> {
        if horizon == 0 {
            return Err(EngineError::InvalidHorizon);
        }
        problem.check_dim(&theta0, "theta0")?;
        if theta0.iter().any(|t| !t.is_finite()) {
            return Err(EngineError::NonFinite {
                n: 0,
                theta: theta0,
            });
        }
        policy.validate(&theta0)?;
        Ok(Self {
            problem,
            schedule,
            policy,
            theta0,
            horizon,
        })
    }

    pub fn initial_state(&self) -> SaState {
        let chain = match &self.problem {
            Problem::ControlledMarkov { initial_state, .. } => Some(*initial_state),
            _ => None,
        };
        SaState::initial(&self.theta0, chain)
    }

    pub fn stepper(&self, seed: u64, stream: u64) -> Stepper<'_> {
        Stepper::new(self, NoiseSource::new(seed, stream))
    }

    /// Run `horizon` steps, recording the state at each index of `grid`.
    pub fn run(&self, seed: u64, stream: u64, grid: &[u64]) -> Result<Trajectory, EngineError> {
        let grid = normalize_grid(grid, self.horizon)?;
        let mut stepper = self.stepper(seed, stream);
        let mut state = self.initial_state();
        let mut checkpoints = Vec::with_capacity(grid.len());
        let mut next = grid.iter().copied().peekable();
        while state.n < self.horizon {
            stepper.step(&mut state)?;
            if next.peek() == Some(&state.n) {
                next.next();
                checkpoints.push(Checkpoint::of(&state));
            }
        }
        Ok(Trajectory {
            checkpoints,
            final_state: state,
            seed,
            stream,
        })
    }
}

/// Sorted, de-duplicated copy of `grid`, all within `[1, horizon]`.
pub fn normalize_grid(grid: &[u64], horizon: u64) -> Result<Vec<u64>, EngineError> {
    let mut g = grid.to_vec();
    g.sort_unstable();
    g.dedup();
    if let Some(bad) = g.iter().find(|n| **n == 0 || **n > horizon) {
        return Err(EngineError::InvalidGrid(format!(
            "index {bad} outside [1, {horizon}]"
        )));
    }
    Ok(g)
}

/// Allocation-free single-step driver for one trajectory.
#[derive(Debug)]
pub struct Stepper<'a> {
    sim: &'a Simulation,
    noise: NoiseSource,
    noise_factor: Option<DMatrix<f64>>,
    drift: Vec<f64>,
    xi: Vec<f64>,
    row: Vec<f64>,
    half: Vec<f64>,
    cached_sigma: u64,
    cached_radius_sq: f64,
}

impl<'a> Stepper<'a> {
    fn new(sim: &'a Simulation, noise: NoiseSource) -> Self {
        let d = sim.problem.dim();
        let noise_factor = match &sim.problem {
            Problem::Gaussian { noise_cov, .. } if noise_cov.amax() > 0.0 => {
                Some(psd_sqrt(noise_cov))
            }
            _ => None,
        };
        let states = sim.problem.family().map_or(0, |f| f.state_count());
        Self {
            sim,
            noise,
            noise_factor,
            drift: vec![0.0; d],
            xi: vec![0.0; d],
            row: vec![0.0; states],
            half: vec![0.0; d],
            cached_sigma: 0,
            cached_radius_sq: sim.policy.radius(0).powi(2),
        }
    }

    /// Advance `state` by one step.
    pub fn step(&mut self, state: &mut SaState) -> Result<(), EngineError> {
        let theta = state.theta.as_slice();
        match &self.sim.problem {
            Problem::Gaussian { field, .. } => {
                field.eval(theta, &mut self.drift);
                if let Some(f) = &self.noise_factor {
                    for x in self.xi.iter_mut() {
                        *x = self.noise.normal();
                    }
                    let d = self.xi.len();
                    for i in 0..d {
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += f[(i, j)] * self.xi[j];
                        }
                        self.drift[i] += acc;
                    }
                }
            }
            Problem::RobbinsMonro { family } => {
                let pi = family.stationary(theta)?;
                let x = self.noise.categorical(pi.as_slice());
                family.observe(theta, x, &mut self.drift);
                state.chain_state = Some(x);
            }
            Problem::ControlledMarkov { family, .. } => {
                let current = state.chain_state.unwrap_or(0);
                family.transition_row(theta, current, &mut self.row);
                let x = self.noise.categorical(&self.row);
                family.observe(theta, x, &mut self.drift);
                state.chain_state = Some(x);
            }
        }
        self.advance(state)
    }

    /// Gaussian problems only: advance with the supplied noise `ξ` in place
    /// of a random draw, `H = h(θ_n) + ξ`.
    pub fn step_injected(&mut self, state: &mut SaState, xi: &[f64]) -> Result<(), EngineError> {
        let Problem::Gaussian { field, .. } = &self.sim.problem else {
            return Err(EngineError::InjectionUnsupported);
        };
        if xi.len() != self.drift.len() {
            return Err(EngineError::DimensionMismatch {
                what: "injected noise",
                expected: self.drift.len(),
                got: xi.len(),
            });
        }
        field.eval(&state.theta, &mut self.drift);
        for (h, x) in self.drift.iter_mut().zip(xi) {
            *h += x;
        }
        self.advance(state)
    }

    #[inline]
    fn advance(&mut self, state: &mut SaState) -> Result<(), EngineError> {
        let n1 = state.n + 1;
        let gamma = self.sim.schedule.gamma(n1);
        let mut finite = true;
        for ((h, t), d) in self.half.iter_mut().zip(&state.theta).zip(&self.drift) {
            *h = t + gamma * d;
            finite &= h.is_finite();
        }
        if !finite {
            return Err(EngineError::NonFinite {
                n: n1,
                theta: self.half.clone(),
            });
        }
        let accept = match &self.sim.policy {
            TruncationPolicy::None => true,
            TruncationPolicy::ExpandingBalls { center, .. } => {
                if self.cached_sigma != state.sigma {
                    self.cached_sigma = state.sigma;
                    self.cached_radius_sq = self.sim.policy.radius(state.sigma).powi(2);
                }
                distance_sq(&self.half, center) <= self.cached_radius_sq
            }
        };
        if accept {
            state.theta.copy_from_slice(&self.half);
        } else {
            state.theta.copy_from_slice(&self.sim.theta0);
            state.sigma += 1;
        }
        state.n = n1;
        let w = 1.0 / (n1 as f64 + 1.0);
        for (b, t) in state.theta_bar.iter_mut().zip(&state.theta) {
            *b += (t - *b) * w;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub n: u64,
    pub theta: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub sigma: u64,
}

impl Checkpoint {
    fn of(state: &SaState) -> Self {
        Self {
            n: state.n,
            theta: state.theta.clone(),
            theta_bar: state.theta_bar.clone(),
            sigma: state.sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
    pub final_state: SaState,
    pub seed: u64,
    pub stream: u64,
}

impl Trajectory {
    /// Columns `n, theta[i].., theta_bar[i].., sigma`; reals with 17
    /// significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.final_state.theta.len();
        let mut header = vec!["n".to_string()];
        header.extend((0..d).map(|i| format!("theta[{i}]")));
        header.extend((0..d).map(|i| format!("theta_bar[{i}]")));
        header.push("sigma".into());
        writeln!(w, "{}", header.join(","))?;
        for c in &self.checkpoints {
            write!(w, "{}", c.n)?;
            for v in c.theta.iter().chain(&c.theta_bar) {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w, ",{}", c.sigma)?;
        }
        Ok(())
    }
}

/// Index of the root within `radius` of `theta` (the nearest, if several).
pub fn classify_limit(theta: &[f64], roots: &[Vec<f64>], radius: f64) -> Option<usize> {
    let r2 = radius * radius;
    roots
        .iter()
        .enumerate()
        .filter(|(_, r)| r.len() == theta.len())
        .map(|(i, r)| (i, distance_sq(theta, r)))
        .filter(|(_, d2)| *d2 <= r2)
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}
