//! Monte-Carlo verification of the limiting laws.
//!
//! An ensemble runs `R` independent trajectories (replicate `r` uses stream
//! `r` of the master seed), classifies each final iterate to a target, and
//! forms the scaled errors `Z = γ_n^{-1/2}(θ_n - θ*)` and
//! `W = √n (θ̄_n - θ*)`. Their empirical covariances are compared with the
//! theoretical `V` and `∇h⁻¹ U* ∇h⁻ᵀ`.

use std::fmt::Write as _;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};
use thiserror::Error;

use crate::engine::{classify_limit, EngineError, NoiseSource, Problem, Simulation};
use crate::linalg::{
    frobenius, from_rows, min_symmetric_eigenvalue, symmetric_function, to_rows, Rows,
};
use crate::markov::{family_poisson, KernelFamily, MarkovError};
use crate::schedules::{check_aver2, classify_sa_regime, RegimeTag, ScheduleError, StepSchedule};
use crate::spectral::{
    gain_optimal_covariance, hurwitz_info, optimal_covariance, optimal_gain, solve_lyapunov_fast,
    solve_lyapunov_slow, SpectralError, PD_RELATIVE_FLOOR,
};

/// Kolmogorov-Smirnov critical constant at the 1% level.
pub const KS_CRITICAL_1PCT: f64 = 1.63;
/// Smallest sample for a normality verdict.
pub const MIN_NORMALITY_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("samples have inconsistent dimensions")]
    RaggedSamples,
    #[error("no theory supplied for observed target {0}")]
    MissingTheory(usize),
    #[error("theory for target {target}: {source}")]
    Theory {
        target: usize,
        #[source]
        source: Box<HarnessError>,
    },
    #[error("ensemble needs at least one replicate")]
    EmptyEnsemble,
    #[error("classification radius must be positive and below half the root separation ({0})")]
    InvalidRadius(f64),
    #[error("failed to build worker pool: {0}")]
    WorkerPool(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Which limit theorem(s) a run is checked against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Theorem {
    /// Raw iterates, scale `γ_n^{-1/2}`.
    Raw,
    /// Averaged iterates, scale `√n`.
    Averaged,
    #[default]
    Both,
}

impl Theorem {
    pub fn raw(self) -> bool {
        matches!(self, Theorem::Raw | Theorem::Both)
    }

    pub fn averaged(self) -> bool {
        matches!(self, Theorem::Averaged | Theorem::Both)
    }
}

/// Everything known in closed form about one limiting target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTheory {
    pub root: Vec<f64>,
    /// `|h(root)|_∞` after refinement.
    pub root_residual: f64,
    pub jacobian: Rows,
    pub decay_rate: f64,
    /// `(re, im)` pairs, largest real part first.
    pub eigenvalues: Vec<[f64; 2]>,
    pub noise_covariance: Rows,
    pub regime: RegimeTag,
    pub regime_reason: String,
    /// Raw-scale covariance; absent when the schedule is invalid for this target.
    pub v_raw: Option<Rows>,
    pub v_raw_residual: Option<f64>,
    /// `∇h⁻¹ U* ∇h⁻ᵀ`.
    pub v_avg: Rows,
    /// `-γ*⁻¹ ∇h⁻¹`.
    pub optimal_gain: Rows,
    /// `γ*⁻¹ ∇h⁻¹ U* ∇h⁻ᵀ`, the raw covariance under the optimal gain.
    pub gain_optimal_covariance: Rows,
}

impl TargetTheory {
    pub fn v_raw_matrix(&self) -> Option<DMatrix<f64>> {
        self.v_raw.as_deref().and_then(from_rows)
    }

    pub fn v_avg_matrix(&self) -> DMatrix<f64> {
        from_rows(&self.v_avg).unwrap_or_else(|| DMatrix::zeros(0, 0))
    }
}

/// Root refinement tolerance on `|h|`.
pub const ROOT_TOL: f64 = 1e-12;

/// Refine `guess` to a root and evaluate every theoretical quantity there.
pub fn target_theory(
    problem: &Problem,
    schedule: &StepSchedule,
    guess: &[f64],
) -> Result<TargetTheory, HarnessError> {
    let root = problem.refine_root(guess, ROOT_TOL)?;
    let theta = root.as_slice();
    let root_residual = problem.mean_field(theta)?.amax();
    let a = problem.jacobian(theta)?;
    let info = hurwitz_info(&a)?;
    let u = problem.noise_covariance(theta)?;
    let regime = classify_sa_regime(schedule, info.decay_rate)?;
    let raw = match regime.tag {
        RegimeTag::SlowC2a => Some(solve_lyapunov_slow(&a, &u)?),
        RegimeTag::FastC2b => Some(solve_lyapunov_fast(&a, &u, schedule.gamma_star())?),
        RegimeTag::Invalid => None,
    };
    Ok(TargetTheory {
        root: theta.to_vec(),
        root_residual,
        jacobian: to_rows(&a),
        decay_rate: info.decay_rate,
        eigenvalues: info.eigenvalues.iter().map(|z| [z.re, z.im]).collect(),
        noise_covariance: to_rows(&u),
        regime: regime.tag,
        regime_reason: regime.reason,
        v_raw: raw.as_ref().map(|c| to_rows(&c.v)),
        v_raw_residual: raw.as_ref().map(|c| c.residual_norm),
        v_avg: to_rows(&optimal_covariance(&a, &u)?),
        optimal_gain: to_rows(&optimal_gain(&a, schedule.gamma_star())?),
        gain_optimal_covariance: to_rows(&gain_optimal_covariance(&a, &u, schedule.gamma_star())?),
    })
}

/// Theory for every root guess, failing with the offending index.
pub fn theory_for_roots(
    problem: &Problem,
    schedule: &StepSchedule,
    guesses: &[Vec<f64>],
) -> Result<Vec<TargetTheory>, HarnessError> {
    guesses
        .iter()
        .enumerate()
        .map(|(target, g)| {
            target_theory(problem, schedule, g).map_err(|e| HarnessError::Theory {
                target,
                source: Box::new(e),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub simulation: Simulation,
    pub replicates: usize,
    pub master_seed: u64,
    /// Targets used for classification.
    pub roots: Vec<Vec<f64>>,
    pub classify_radius: f64,
    /// Worker threads; `1` runs on the calling thread.
    pub workers: usize,
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.replicates == 0 {
            return Err(HarnessError::EmptyEnsemble);
        }
        let r = self.classify_radius;
        if !(r.is_finite() && r > 0.0) {
            return Err(HarnessError::InvalidRadius(r));
        }
        for (i, a) in self.roots.iter().enumerate() {
            for b in &self.roots[i + 1..] {
                let sep: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if sep <= 2.0 * r {
                    return Err(HarnessError::InvalidRadius(sep));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "snake_case")]
pub enum ReplicateStatus {
    Classified(usize),
    Unconverged,
    Failed(String),
}

/// Final-time summary of one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub status: ReplicateStatus,
    pub theta: Vec<f64>,
    pub theta_bar: Vec<f64>,
    /// `γ_n^{-1/2}(θ_n - θ*)`; empty unless classified.
    pub z: Vec<f64>,
    /// `√n (θ̄_n - θ*)`; empty unless classified.
    pub w: Vec<f64>,
    /// Truncation count at `n / 2`.
    pub sigma_half: u64,
    pub sigma_final: u64,
}

impl ReplicateOutcome {
    pub fn target(&self) -> Option<usize> {
        match self.status {
            ReplicateStatus::Classified(t) => Some(t),
            _ => None,
        }
    }

    /// Whether a truncation happened in `(n/2, n]`.
    pub fn truncated_late(&self) -> bool {
        self.sigma_final > self.sigma_half
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSample {
    pub master_seed: u64,
    pub horizon: u64,
    pub gamma_n: f64,
    pub roots: Vec<Vec<f64>>,
    pub outcomes: Vec<ReplicateOutcome>,
}

impl EnsembleSample {
    pub fn count(&self, target: usize) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.target() == Some(target))
            .count()
    }

    pub fn unconverged(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.status == ReplicateStatus::Unconverged)
            .count()
    }

    pub fn failed(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| matches!(o.status, ReplicateStatus::Failed(_)))
            .count()
    }

    pub fn z_samples(&self, target: usize) -> Vec<Vec<f64>> {
        self.outcomes
            .iter()
            .filter(|o| o.target() == Some(target))
            .map(|o| o.z.clone())
            .collect()
    }

    pub fn w_samples(&self, target: usize) -> Vec<Vec<f64>> {
        self.outcomes
            .iter()
            .filter(|o| o.target() == Some(target))
            .map(|o| o.w.clone())
            .collect()
    }

    /// Fraction of replicates with a truncation in `(n/2, n]`.
    pub fn late_truncation_rate(&self) -> f64 {
        let late = self.outcomes.iter().filter(|o| o.truncated_late()).count();
        late as f64 / self.outcomes.len().max(1) as f64
    }

    /// Columns `replicate, target, Z[i].., W[i]..`, classified replicates only.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.roots.first().map_or(0, Vec::len);
        let mut header = vec!["replicate".to_string(), "target".to_string()];
        header.extend((0..d).map(|i| format!("Z[{i}]")));
        header.extend((0..d).map(|i| format!("W[{i}]")));
        writeln!(w, "{}", header.join(","))?;
        for o in &self.outcomes {
            let Some(t) = o.target() else { continue };
            write!(w, "{},{}", o.replicate, t)?;
            for v in o.z.iter().chain(&o.w) {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

fn run_replicate(cfg: &EnsembleConfig, replicate: usize) -> ReplicateOutcome {
    let sim = &cfg.simulation;
    let n = sim.horizon;
    let half = (n / 2).max(1);
    let failed = |msg: String| ReplicateOutcome {
        replicate,
        status: ReplicateStatus::Failed(msg),
        theta: Vec::new(),
        theta_bar: Vec::new(),
        z: Vec::new(),
        w: Vec::new(),
        sigma_half: 0,
        sigma_final: 0,
    };
    let traj = match sim.run(cfg.master_seed, replicate as u64, &[half]) {
        Ok(t) => t,
        Err(e) => return failed(e.to_string()),
    };
    let fin = traj.final_state;
    let sigma_half = traj.checkpoints.first().map_or(0, |c| c.sigma);
    let target = classify_limit(&fin.theta, &cfg.roots, cfg.classify_radius);
    let (z, w) = match target {
        Some(t) => {
            let root = &cfg.roots[t];
            let raw_scale = sim.schedule.gamma(n).sqrt().recip();
            let avg_scale = (n as f64).sqrt();
            (
                fin.theta
                    .iter()
                    .zip(root)
                    .map(|(x, r)| raw_scale * (x - r))
                    .collect(),
                fin.theta_bar
                    .iter()
                    .zip(root)
                    .map(|(x, r)| avg_scale * (x - r))
                    .collect(),
            )
        }
        None => (Vec::new(), Vec::new()),
    };
    ReplicateOutcome {
        replicate,
        status: target.map_or(ReplicateStatus::Unconverged, ReplicateStatus::Classified),
        theta: fin.theta,
        theta_bar: fin.theta_bar,
        z,
        w,
        sigma_half,
        sigma_final: fin.sigma,
    }
}

/// Run all replicates. The result is independent of `workers`.
pub fn run_ensemble(cfg: &EnsembleConfig) -> Result<EnsembleSample, HarnessError> {
    cfg.validate()?;
    let outcomes = collect_outcomes(cfg)?;
    Ok(EnsembleSample {
        master_seed: cfg.master_seed,
        horizon: cfg.simulation.horizon,
        gamma_n: cfg.simulation.schedule.gamma(cfg.simulation.horizon),
        roots: cfg.roots.clone(),
        outcomes,
    })
}

#[cfg(feature = "parallel")]
fn collect_outcomes(cfg: &EnsembleConfig) -> Result<Vec<ReplicateOutcome>, HarnessError> {
    use rayon::prelude::*;
    if cfg.workers <= 1 {
        return Ok((0..cfg.replicates).map(|r| run_replicate(cfg, r)).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| HarnessError::WorkerPool(e.to_string()))?;
    // indexed collect keeps replicate order
    Ok(pool.install(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| run_replicate(cfg, r))
            .collect()
    }))
}

#[cfg(not(feature = "parallel"))]
fn collect_outcomes(cfg: &EnsembleConfig) -> Result<Vec<ReplicateOutcome>, HarnessError> {
    Ok((0..cfg.replicates).map(|r| run_replicate(cfg, r)).collect())
}

fn to_matrix(samples: &[Vec<f64>]) -> Result<DMatrix<f64>, HarnessError> {
    let d = samples.first().map_or(0, Vec::len);
    if samples.iter().any(|s| s.len() != d) {
        return Err(HarnessError::RaggedSamples);
    }
    Ok(DMatrix::from_fn(samples.len(), d, |i, j| samples[i][j]))
}

/// Mean-centred covariance with `1/(N-1)` normalisation.
pub fn empirical_covariance(samples: &[Vec<f64>]) -> Result<DMatrix<f64>, HarnessError> {
    if samples.len() < 2 {
        return Err(HarnessError::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let x = to_matrix(samples)?;
    let n = x.nrows() as f64;
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - mean[j]);
    Ok((centred.transpose() * &centred) / (n - 1.0))
}

/// Entry-wise standard errors of [`empirical_covariance`]:
/// `sd((x_i - m_i)(x_j - m_j)) / √N`.
pub fn covariance_standard_errors(samples: &[Vec<f64>]) -> Result<DMatrix<f64>, HarnessError> {
    let cov = empirical_covariance(samples)?;
    let x = to_matrix(samples)?;
    let (n, d) = (x.nrows(), x.ncols());
    let mean = x.row_mean();
    let mut se = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut ss = 0.0;
            for k in 0..n {
                let p = (x[(k, i)] - mean[i]) * (x[(k, j)] - mean[j]) - cov[(i, j)];
                ss += p * p;
            }
            se[(i, j)] = (ss / (n as f64 - 1.0) / n as f64).sqrt();
        }
    }
    Ok(se)
}

/// `sup_x |F_N(x) - F(x)|` for a sample and a continuous CDF.
pub fn ks_distance(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = cdf(*x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityDiagnostics {
    pub samples: usize,
    /// KS distance of `|V^{-1/2} x|²` against `χ²_d`.
    pub mahalanobis_ks: f64,
    /// KS distance of each whitened coordinate against `N(0, 1)`.
    pub per_coordinate_ks: Vec<f64>,
    /// `1.63 / √N`.
    pub critical_value: f64,
    pub pass: bool,
}

/// Whiten by `V^{-1/2}` and run the KS tests at the 1% level.
pub fn normality_diagnostics(
    samples: &[Vec<f64>],
    v: &DMatrix<f64>,
) -> Result<NormalityDiagnostics, HarnessError> {
    if samples.len() < MIN_NORMALITY_SAMPLES {
        return Err(HarnessError::TooFewSamples {
            needed: MIN_NORMALITY_SAMPLES,
            got: samples.len(),
        });
    }
    let x = to_matrix(samples)?;
    let d = x.ncols();
    if v.nrows() != d || v.ncols() != d {
        return Err(SpectralError::DimensionMismatch {
            expected: d,
            rows: v.nrows(),
            cols: v.ncols(),
        }
        .into());
    }
    let lmin = min_symmetric_eigenvalue(v);
    let vnorm = v.amax();
    if !(lmin > PD_RELATIVE_FLOOR * vnorm) {
        return Err(SpectralError::NotPositiveDefinite(lmin).into());
    }
    let inv_sqrt = symmetric_function(v, |l| l.sqrt().recip());
    let white = &x * inv_sqrt;
    let sq_norms: Vec<f64> = white.row_iter().map(|r| r.norm_squared()).collect();
    let chi2 = ChiSquared::new(d as f64).expect("positive degrees of freedom");
    let normal = Normal::standard();
    let mahalanobis_ks = ks_distance(&sq_norms, |t| chi2.cdf(t));
    let per_coordinate_ks: Vec<f64> = (0..d)
        .map(|j| {
            let col: Vec<f64> = white.column(j).iter().copied().collect();
            ks_distance(&col, |t| normal.cdf(t))
        })
        .collect();
    let critical_value = KS_CRITICAL_1PCT / (samples.len() as f64).sqrt();
    let pass =
        mahalanobis_ks < critical_value && per_coordinate_ks.iter().all(|k| *k < critical_value);
    Ok(NormalityDiagnostics {
        samples: samples.len(),
        mahalanobis_ks,
        per_coordinate_ks,
        critical_value,
        pass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Relative Frobenius tolerance on the raw scale.
    pub raw: f64,
    /// Relative Frobenius tolerance on the averaged scale.
    pub averaged: f64,
    #[serde(default = "default_min_samples")]
    pub min_samples: usize,
    /// Whether the KS tests count towards the verdict.
    #[serde(default = "default_true")]
    pub normality: bool,
    #[serde(default = "default_failure_rate")]
    pub max_failure_rate: f64,
}

fn default_min_samples() -> usize {
    MIN_NORMALITY_SAMPLES
}

fn default_true() -> bool {
    true
}

fn default_failure_rate() -> f64 {
    0.01
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            raw: 0.10,
            averaged: 0.10,
            min_samples: default_min_samples(),
            normality: true,
            max_failure_rate: default_failure_rate(),
        }
    }
}

/// Empirical against theoretical covariance on one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub theory: Option<Rows>,
    pub empirical: Rows,
    /// Sample mean of the scaled errors; the limit is centred.
    pub mean: Vec<f64>,
    /// `‖Ĉ - V‖_F / ‖V‖_F`.
    pub relative_error: Option<f64>,
    pub tolerance: f64,
    pub normality: Option<NormalityDiagnostics>,
    pub pass: bool,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: usize,
    pub root: Vec<f64>,
    pub count: usize,
    pub raw: Option<ScaleReport>,
    pub averaged: Option<ScaleReport>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub master_seed: u64,
    pub replicates: usize,
    pub horizon: u64,
    pub gamma_n: f64,
    pub theorem: Theorem,
    pub tolerances: Tolerances,
    pub unconverged: usize,
    pub failed: usize,
    pub failure_rate: f64,
    pub late_truncation_rate: f64,
    pub targets: Vec<TargetReport>,
    pub pass: bool,
}

pub fn relative_frobenius_error(empirical: &DMatrix<f64>, theory: &DMatrix<f64>) -> f64 {
    frobenius(&(empirical - theory)) / frobenius(theory)
}

fn sample_mean(samples: &[Vec<f64>], d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for s in samples {
        for (a, x) in m.iter_mut().zip(s) {
            *a += x;
        }
    }
    let n = samples.len().max(1) as f64;
    m.iter().map(|a| a / n).collect()
}

fn scale_report(
    samples: &[Vec<f64>],
    theory: Option<DMatrix<f64>>,
    tol: &Tolerances,
    tolerance: f64,
) -> Result<ScaleReport, HarnessError> {
    let empirical = if samples.len() >= 2 {
        empirical_covariance(samples)?
    } else {
        let d = theory.as_ref().map_or(0, |t| t.nrows());
        DMatrix::zeros(d, d)
    };
    let mean = sample_mean(samples, empirical.nrows());
    let Some(v) = theory else {
        return Ok(ScaleReport {
            theory: None,
            empirical: to_rows(&empirical),
            mean,
            relative_error: None,
            tolerance,
            normality: None,
            pass: false,
            note: Some("no limiting covariance: step-size condition fails at this target".into()),
        });
    };
    let rel = relative_frobenius_error(&empirical, &v);
    let enough = samples.len() >= tol.min_samples.max(2);
    let normality = if samples.len() >= MIN_NORMALITY_SAMPLES {
        Some(normality_diagnostics(samples, &v)?)
    } else {
        None
    };
    let normal_ok = !tol.normality || normality.as_ref().is_some_and(|n| n.pass);
    let note = (!enough).then(|| {
        format!(
            "{} samples, at least {} required",
            samples.len(),
            tol.min_samples
        )
    });
    Ok(ScaleReport {
        theory: Some(to_rows(&v)),
        empirical: to_rows(&empirical),
        mean,
        relative_error: Some(rel),
        tolerance,
        normality,
        pass: enough && rel <= tolerance && normal_ok,
        note,
    })
}

/// Compare an ensemble with per-target theory.
pub fn clt_report(
    sample: &EnsembleSample,
    theory: &[TargetTheory],
    theorem: Theorem,
    tol: &Tolerances,
) -> Result<CltReport, HarnessError> {
    for o in &sample.outcomes {
        if let Some(t) = o.target() {
            if t >= theory.len() {
                return Err(HarnessError::MissingTheory(t));
            }
        }
    }
    let mut targets = Vec::with_capacity(sample.roots.len());
    for (t, root) in sample.roots.iter().enumerate() {
        let th = theory.get(t).ok_or(HarnessError::MissingTheory(t))?;
        let raw = theorem
            .raw()
            .then(|| scale_report(&sample.z_samples(t), th.v_raw_matrix(), tol, tol.raw))
            .transpose()?;
        let averaged = theorem
            .averaged()
            .then(|| {
                scale_report(
                    &sample.w_samples(t),
                    Some(th.v_avg_matrix()),
                    tol,
                    tol.averaged,
                )
            })
            .transpose()?;
        let pass = raw.as_ref().is_none_or(|r| r.pass) && averaged.as_ref().is_none_or(|r| r.pass);
        targets.push(TargetReport {
            target: t,
            root: root.clone(),
            count: sample.count(t),
            raw,
            averaged,
            pass,
        });
    }
    let failed = sample.failed();
    let replicates = sample.outcomes.len();
    let failure_rate = failed as f64 / replicates.max(1) as f64;
    let pass = failure_rate <= tol.max_failure_rate && targets.iter().all(|t| t.pass);
    Ok(CltReport {
        master_seed: sample.master_seed,
        replicates,
        horizon: sample.horizon,
        gamma_n: sample.gamma_n,
        theorem,
        tolerances: *tol,
        unconverged: sample.unconverged(),
        failed,
        failure_rate,
        late_truncation_rate: sample.late_truncation_rate(),
        targets,
        pass,
    })
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn fmt_matrix(m: &Rows) -> String {
    let rows: Vec<String> = m
        .iter()
        .map(|r| {
            r.iter()
                .map(|v| format!("{v:.5}"))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect();
    format!("[{}]", rows.join("; "))
}

impl CltReport {
    /// Aligned-column summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "master_seed {}  replicates {}  horizon {}  gamma_n {:.6e}",
            self.master_seed, self.replicates, self.horizon, self.gamma_n
        );
        let _ = writeln!(
            s,
            "unconverged {}  failed {} ({:.2}%)  late truncations {:.2}%",
            self.unconverged,
            self.failed,
            100.0 * self.failure_rate,
            100.0 * self.late_truncation_rate
        );
        let _ = writeln!(
            s,
            "{:<7} {:<9} {:>6} {:<9} {:<24} {:<24} {:>9} {:>7} {:>9} {:>9} verdict",
            "target",
            "root",
            "count",
            "scale",
            "theory",
            "empirical",
            "rel_err",
            "tol",
            "ks_chi2",
            "ks_crit",
        );
        for t in &self.targets {
            let root = t
                .root
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(",");
            for (name, r) in [("raw", &t.raw), ("averaged", &t.averaged)] {
                let Some(r) = r else { continue };
                let theory = r.theory.as_ref().map_or("-".into(), fmt_matrix);
                let rel = r.relative_error.map_or("-".into(), |e| format!("{e:.4}"));
                let (ks, crit) = r.normality.as_ref().map_or(("-".into(), "-".into()), |n| {
                    (
                        format!("{:.4}", n.mahalanobis_ks),
                        format!("{:.4}", n.critical_value),
                    )
                });
                let _ = writeln!(
                    s,
                    "{:<7} {:<9} {:>6} {:<9} {:<24} {:<24} {:>9} {:>7.3} {:>9} {:>9} {}",
                    t.target,
                    root,
                    t.count,
                    name,
                    theory,
                    fmt_matrix(&r.empirical),
                    rel,
                    r.tolerance,
                    ks,
                    crit,
                    verdict(r.pass)
                );
            }
        }
        let _ = writeln!(s, "overall {}", verdict(self.pass));
        s
    }
}

/// Sample covariance of the increments `e_{n+1} = Ĥ(X_{n+1}) - QĤ(X_n)` of the
/// chain frozen at `theta`, over `steps` transitions.
pub fn frozen_chain_increment_covariance(
    family: &dyn KernelFamily,
    theta: &[f64],
    initial_state: usize,
    steps: usize,
    seed: u64,
) -> Result<DMatrix<f64>, HarnessError> {
    let sol = family_poisson(family, theta)?;
    let q = family.kernel(theta);
    let s = q.nrows();
    if initial_state >= s {
        return Err(MarkovError::StateOutOfRange(initial_state).into());
    }
    let d = sol.g_hat.ncols();
    let rows: Vec<Vec<f64>> = (0..s).map(|x| q.row(x).iter().copied().collect()).collect();
    let mut noise = NoiseSource::new(seed, 0);
    let mut x = initial_state;
    let mut sum = DVector::<f64>::zeros(d);
    let mut sum_sq = DMatrix::<f64>::zeros(d, d);
    let mut e = DVector::<f64>::zeros(d);
    for _ in 0..steps {
        let next = noise.categorical(&rows[x]);
        for i in 0..d {
            e[i] = sol.g_hat[(next, i)] - sol.qg_hat[(x, i)];
        }
        sum += &e;
        sum_sq.ger(1.0, &e, &e, 1.0);
        x = next;
    }
    let n = steps as f64;
    let mean = &sum / n;
    Ok((sum_sq - (&mean * mean.transpose()) * n) / (n - 1.0))
}

/// Aggregate the step-size conditions relevant to `theorem`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub theorem: Theorem,
    pub aver2: bool,
    pub targets: Vec<TargetCondition>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetCondition {
    pub target: usize,
    pub root: Option<Vec<f64>>,
    pub decay_rate: Option<f64>,
    pub eigenvalues: Vec<[f64; 2]>,
    pub regime: Option<RegimeTag>,
    pub reason: String,
    /// `2 L γ*`, which must exceed 1 for `γ_n = γ*/n`.
    pub two_l_gamma: Option<f64>,
    pub noise_positive_definite: Option<bool>,
    pub pass: bool,
}

/// Check the hypotheses of the requested theorem(s) at each root.
pub fn check_conditions(
    problem: &Problem,
    schedule: &StepSchedule,
    guesses: &[Vec<f64>],
    theorem: Theorem,
    horizon: u64,
) -> Result<ConditionSummary, HarnessError> {
    let aver2 = check_aver2(schedule, horizon.max(10))?.analytic_verdict;
    let mut targets = Vec::new();
    for (target, g) in guesses.iter().enumerate() {
        let mut tc = TargetCondition {
            target,
            root: None,
            decay_rate: None,
            eigenvalues: Vec::new(),
            regime: None,
            reason: String::new(),
            two_l_gamma: None,
            noise_positive_definite: None,
            pass: false,
        };
        let root = match problem.refine_root(g, ROOT_TOL) {
            Ok(r) => r,
            Err(e) => {
                tc.reason = e.to_string();
                targets.push(tc);
                continue;
            }
        };
        tc.root = Some(root.as_slice().to_vec());
        let a = problem.jacobian(root.as_slice())?;
        match hurwitz_info(&a) {
            Ok(info) => {
                tc.eigenvalues = info.eigenvalues.iter().map(|z| [z.re, z.im]).collect();
                tc.decay_rate = Some(info.decay_rate);
                tc.two_l_gamma = Some(2.0 * info.decay_rate * schedule.gamma_star());
                let regime = classify_sa_regime(schedule, info.decay_rate)?;
                let u = problem.noise_covariance(root.as_slice())?;
                let lmin = min_symmetric_eigenvalue(&u);
                let pd = lmin > PD_RELATIVE_FLOOR * u.amax();
                tc.noise_positive_definite = Some(pd);
                let regime_ok = regime.tag != RegimeTag::Invalid;
                tc.pass = regime_ok && pd && (!theorem.averaged() || aver2);
                tc.reason = if !regime_ok {
                    regime.reason.clone()
                } else if !pd {
                    format!("noise covariance is singular (smallest eigenvalue {lmin:e})")
                } else if theorem.averaged() && !aver2 {
                    "averaging requires a < 1".into()
                } else {
                    regime.reason.clone()
                };
                tc.regime = Some(regime.tag);
            }
            Err(e) => {
                tc.eigenvalues = crate::spectral::eigenvalues(&a)
                    .unwrap_or_default()
                    .iter()
                    .map(|z| [z.re, z.im])
                    .collect();
                tc.reason = e.to_string();
            }
        }
        targets.push(tc);
    }
    let pass = !targets.is_empty() && targets.iter().all(|t| t.pass);
    Ok(ConditionSummary {
        theorem,
        aver2,
        targets,
        pass,
    })
}

impl ConditionSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "theorem {:?}  aver2 {}", self.theorem, self.aver2);
        let _ = writeln!(
            s,
            "{:<7} {:<12} {:>9} {:>9} {:<9} {:<5} reason",
            "target", "root", "L", "2Lg*", "regime", "ok"
        );
        for t in &self.targets {
            let root = t.root.as_ref().map_or("-".into(), |r| {
                r.iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(",")
            });
            let l = t.decay_rate.map_or("-".into(), |v| format!("{v:.5}"));
            let g = t.two_l_gamma.map_or("-".into(), |v| format!("{v:.5}"));
            let regime = t.regime.map_or("-".into(), |r| r.to_string());
            let _ = writeln!(
                s,
                "{:<7} {:<12} {:>9} {:>9} {:<9} {:<5} {}",
                t.target, root, l, g, regime, t.pass, t.reason
            );
            let ev: Vec<String> = t
                .eigenvalues
                .iter()
                .map(|[re, im]| format!("{re:.5}{im:+.5}i"))
                .collect();
            if !ev.is_empty() {
                let _ = writeln!(s, "        eigenvalues {}", ev.join(" "));
            }
        }
        let _ = writeln!(s, "overall {}", verdict(self.pass));
        s
    }
}
