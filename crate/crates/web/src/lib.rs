//! Browser bindings for a scalar linear problem `h(θ) = -λ(θ - θ*)` with
//! Gaussian noise of variance `u`.
//!
//! Every export takes plain numbers and returns a JSON string, so the page
//! needs no generated TypeScript types.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use saclt::engine::{LinearField, Simulation};
use saclt::harness::{run_ensemble, target_theory, EnsembleConfig, TargetTheory};
use saclt::schedules::log_checkpoints;
use saclt::{Problem, StepSchedule, TruncationPolicy};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Hard caps so a stray slider value cannot freeze the tab.
pub const MAX_HORIZON: u64 = 1_000_000;
pub const MAX_REPLICATES: usize = 5_000;
pub const MAX_STEP_BUDGET: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarSetup {
    pub lambda: f64,
    pub root: f64,
    pub noise: f64,
    pub gamma_star: f64,
    pub exponent: f64,
}

impl ScalarSetup {
    fn problem(&self) -> Result<Problem, String> {
        if !(self.lambda > 0.0) {
            return Err("lambda must be positive".into());
        }
        if !(self.noise >= 0.0) {
            return Err("noise variance must be non-negative".into());
        }
        let field = LinearField::new(
            DMatrix::from_element(1, 1, -self.lambda),
            DVector::from_element(1, self.root),
        )
        .map_err(|e| e.to_string())?;
        Problem::gaussian(Arc::new(field), DMatrix::from_element(1, 1, self.noise))
            .map_err(|e| e.to_string())
    }

    fn schedule(&self) -> Result<StepSchedule, String> {
        StepSchedule::new(self.gamma_star, self.exponent, 0).map_err(|e| e.to_string())
    }

    fn simulation(&self, theta0: f64, horizon: u64) -> Result<Simulation, String> {
        if horizon == 0 || horizon > MAX_HORIZON {
            return Err(format!("horizon must be in 1..={MAX_HORIZON}"));
        }
        Simulation::new(
            self.problem()?,
            self.schedule()?,
            TruncationPolicy::None,
            vec![theta0],
            horizon,
        )
        .map_err(|e| e.to_string())
    }

    pub fn theory(&self) -> Result<TargetTheory, String> {
        target_theory(&self.problem()?, &self.schedule()?, &[self.root]).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Serialize)]
pub struct PathOutput {
    pub n: Vec<u64>,
    pub theta: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub gamma: Vec<f64>,
}

pub fn path(
    setup: &ScalarSetup,
    theta0: f64,
    horizon: u64,
    seed: u64,
) -> Result<PathOutput, String> {
    let sim = setup.simulation(theta0, horizon)?;
    let grid = log_checkpoints(1, horizon, 40);
    let t = sim.run(seed, 0, &grid).map_err(|e| e.to_string())?;
    Ok(PathOutput {
        n: t.checkpoints.iter().map(|c| c.n).collect(),
        theta: t.checkpoints.iter().map(|c| c.theta[0]).collect(),
        theta_bar: t.checkpoints.iter().map(|c| c.theta_bar[0]).collect(),
        gamma: t
            .checkpoints
            .iter()
            .map(|c| sim.schedule.gamma(c.n))
            .collect(),
    })
}

#[derive(Debug, Serialize)]
pub struct HistogramOutput {
    pub scale: String,
    pub samples: usize,
    pub edges: Vec<f64>,
    /// Normalised so the bars integrate to one.
    pub density: Vec<f64>,
    pub empirical_mean: f64,
    pub empirical_variance: f64,
    /// `None` when the schedule has no raw-scale limit.
    pub theory_variance: Option<f64>,
}

/// Monte-Carlo histogram of `γ_n^{-1/2}(θ_n - θ*)` (`averaged = false`) or
/// `√n(θ̄_n - θ*)` (`averaged = true`).
pub fn histogram(
    setup: &ScalarSetup,
    horizon: u64,
    replicates: usize,
    seed: u64,
    bins: usize,
    averaged: bool,
) -> Result<HistogramOutput, String> {
    if !(2..=MAX_REPLICATES).contains(&replicates) {
        return Err(format!("replicates must be in 2..={MAX_REPLICATES}"));
    }
    if horizon.saturating_mul(replicates as u64) > MAX_STEP_BUDGET {
        return Err(format!(
            "horizon × replicates must stay below {MAX_STEP_BUDGET}"
        ));
    }
    if !(1..=200).contains(&bins) {
        return Err("bins must be in 1..=200".into());
    }
    let theory = setup.theory()?;
    let cfg = EnsembleConfig {
        simulation: setup.simulation(setup.root, horizon)?,
        replicates,
        master_seed: seed,
        roots: vec![vec![setup.root]],
        // single stable root: every finite limit belongs to it
        classify_radius: f64::MAX,
        workers: 1,
    };
    let sample = run_ensemble(&cfg).map_err(|e| e.to_string())?;
    let values: Vec<f64> = if averaged {
        sample.w_samples(0)
    } else {
        sample.z_samples(0)
    }
    .into_iter()
    .map(|v| v[0])
    .collect();
    let theory_variance = if averaged {
        Some(theory.v_avg[0][0])
    } else {
        theory.v_raw.as_ref().map(|v| v[0][0])
    };
    if values.len() < 2 {
        return Err(format!("only {} replicates converged", values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let spread = 4.0 * theory_variance.unwrap_or(var).max(var).sqrt().max(1e-12);
    let (lo, hi) = (-spread, spread);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &values {
        let k = ((v - lo) / width).floor();
        if k >= 0.0 && (k as usize) < bins {
            counts[k as usize] += 1;
        }
    }
    Ok(HistogramOutput {
        scale: if averaged { "averaged" } else { "raw" }.into(),
        samples: values.len(),
        edges: (0..=bins).map(|i| lo + i as f64 * width).collect(),
        density: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
        empirical_mean: mean,
        empirical_variance: var,
        theory_variance,
    })
}

fn setup(lambda: f64, noise: f64, gamma_star: f64, exponent: f64) -> ScalarSetup {
    ScalarSetup {
        lambda,
        root: 1.0,
        noise,
        gamma_star,
        exponent,
    }
}

fn to_json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

/// Closed-form limits for the current parameters.
#[wasm_bindgen]
pub fn theory_json(
    lambda: f64,
    noise: f64,
    gamma_star: f64,
    exponent: f64,
) -> Result<String, JsError> {
    to_json(setup(lambda, noise, gamma_star, exponent).theory())
}

/// One trajectory on a log-spaced grid, started at `theta0` (root is 1).
#[wasm_bindgen]
pub fn simulate_path(
    lambda: f64,
    noise: f64,
    gamma_star: f64,
    exponent: f64,
    theta0: f64,
    horizon: u32,
    seed: u32,
) -> Result<String, JsError> {
    to_json(path(
        &setup(lambda, noise, gamma_star, exponent),
        theta0,
        horizon.into(),
        seed.into(),
    ))
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn scaled_error_histogram(
    lambda: f64,
    noise: f64,
    gamma_star: f64,
    exponent: f64,
    horizon: u32,
    replicates: u32,
    seed: u32,
    bins: u32,
    averaged: bool,
) -> Result<String, JsError> {
    to_json(histogram(
        &setup(lambda, noise, gamma_star, exponent),
        horizon.into(),
        replicates as usize,
        seed.into(),
        bins as usize,
        averaged,
    ))
}
