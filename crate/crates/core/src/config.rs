//! JSON experiment files.
//!
//! Every key is checked: unknown keys are rejected and all module
//! preconditions are validated by [`ExperimentConfig::build`] before any
//! simulation starts.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{DoubleWell, EngineError, LinearField, Problem, Simulation, TruncationPolicy};
use crate::harness::{EnsembleConfig, Theorem, Tolerances};
use crate::linalg::{from_rows, Rows};
use crate::markov::{FamilySpec, MarkovError};
use crate::schedules::StepSchedule;

/// Built-in experiment files, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("scalar_slow", include_str!("../presets/scalar_slow.json")),
    ("scalar_fast", include_str!("../presets/scalar_fast.json")),
    ("double_well", include_str!("../presets/double_well.json")),
    (
        "two_state_markov",
        include_str!("../presets/two_state_markov.json"),
    ),
    (
        "truncated_markov",
        include_str!("../presets/truncated_markov.json"),
    ),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid experiment file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dynamics {
    RobbinsMonro,
    ControlledMarkov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// `h(θ) = A (θ - root)` with Gaussian noise.
    Linear {
        a: Rows,
        root: Vec<f64>,
        noise_covariance: Rows,
    },
    /// `h(θ) = θ - θ³` with Gaussian noise; targets `±1`.
    DoubleWell { noise_variance: f64 },
    /// Finite-state kernel family; `roots` are guesses refined by Newton.
    Kernel {
        family: FamilySpec,
        dynamics: Dynamics,
        #[serde(default)]
        initial_state: usize,
        roots: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TruncationSpec {
    None,
    /// `center` defaults to `theta0`.
    ExpandingBalls {
        r0: f64,
        growth: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub replicates: usize,
    pub horizon: u64,
    pub master_seed: u64,
    pub classify_radius: f64,
    /// Checkpoints recorded by `simulate`; log-spaced by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<u64>>,
    /// Seeds for `simulate`; defaults to `[master_seed]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub dump_samples: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub problem: ProblemSpec,
    pub theta0: Vec<f64>,
    pub schedule: StepSchedule,
    pub truncation: TruncationSpec,
    pub ensemble: EnsembleSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub theorem: Theorem,
    #[serde(default)]
    pub output: OutputSpec,
}

/// A validated experiment, ready to run.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub simulation: Simulation,
    /// Root guesses (exact roots for the closed-form problems).
    pub root_guesses: Vec<Vec<f64>>,
}

fn matrix(rows: &Rows, what: &str) -> Result<DMatrix<f64>, ConfigError> {
    from_rows(rows)
        .ok_or_else(|| ConfigError::Invalid(format!("{what} must be a rectangular array of rows")))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
        Self::from_json(text)
    }

    /// A file path, or a preset name when no such file exists.
    pub fn resolve(path: &Path) -> Result<Self, ConfigError> {
        if !path.exists() {
            if let Some(name) = path
                .to_str()
                .filter(|n| PRESETS.iter().any(|(p, _)| p == n))
            {
                return Self::preset(name);
            }
        }
        Self::load(path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn problem(&self) -> Result<(Problem, Vec<Vec<f64>>), ConfigError> {
        Ok(match &self.problem {
            ProblemSpec::Linear {
                a,
                root,
                noise_covariance,
            } => {
                let field = LinearField::new(matrix(a, "a")?, DVector::from_column_slice(root))?;
                let problem = Problem::gaussian(
                    Arc::new(field),
                    matrix(noise_covariance, "noise_covariance")?,
                )?;
                (problem, vec![root.clone()])
            }
            ProblemSpec::DoubleWell { noise_variance } => {
                if !(noise_variance.is_finite() && *noise_variance >= 0.0) {
                    return Err(ConfigError::Invalid(format!(
                        "noise_variance must be non-negative, got {noise_variance}"
                    )));
                }
                let problem = Problem::gaussian(
                    Arc::new(DoubleWell),
                    DMatrix::from_element(1, 1, *noise_variance),
                )?;
                (problem, vec![vec![-1.0], vec![1.0]])
            }
            ProblemSpec::Kernel {
                family,
                dynamics,
                initial_state,
                roots,
            } => {
                let family = family.build()?;
                if roots.is_empty() {
                    return Err(ConfigError::Invalid(
                        "kernel problems need at least one root guess".into(),
                    ));
                }
                let problem = match dynamics {
                    Dynamics::RobbinsMonro => Problem::RobbinsMonro { family },
                    Dynamics::ControlledMarkov => {
                        Problem::controlled_markov(family, *initial_state)?
                    }
                };
                (problem, roots.clone())
            }
        })
    }

    pub fn truncation_policy(&self) -> TruncationPolicy {
        match &self.truncation {
            TruncationSpec::None => TruncationPolicy::None,
            TruncationSpec::ExpandingBalls { r0, growth, center } => {
                TruncationPolicy::ExpandingBalls {
                    r0: *r0,
                    growth: *growth,
                    center: center.clone().unwrap_or_else(|| self.theta0.clone()),
                }
            }
        }
    }

    /// Validate every precondition and assemble the run objects.
    pub fn build(&self) -> Result<Experiment, ConfigError> {
        let (problem, root_guesses) = self.problem()?;
        for (i, r) in root_guesses.iter().enumerate() {
            if r.len() != problem.dim() {
                return Err(ConfigError::Invalid(format!(
                    "root {i} has dimension {}, problem has {}",
                    r.len(),
                    problem.dim()
                )));
            }
        }
        let e = &self.ensemble;
        if e.replicates == 0 {
            return Err(ConfigError::Invalid(
                "ensemble.replicates must be positive".into(),
            ));
        }
        if !(e.classify_radius.is_finite() && e.classify_radius > 0.0) {
            return Err(ConfigError::Invalid(
                "ensemble.classify_radius must be positive".into(),
            ));
        }
        let t = &self.tolerances;
        if !(t.raw > 0.0 && t.averaged > 0.0 && t.max_failure_rate >= 0.0) {
            return Err(ConfigError::Invalid("tolerances must be positive".into()));
        }
        let simulation = Simulation::new(
            problem,
            self.schedule,
            self.truncation_policy(),
            self.theta0.clone(),
            e.horizon,
        )?;
        if let Some(grid) = &e.checkpoints {
            crate::engine::normalize_grid(grid, e.horizon)?;
        }
        Ok(Experiment {
            config: self.clone(),
            simulation,
            root_guesses,
        })
    }
}

impl Experiment {
    /// Ensemble over the given (refined) targets.
    pub fn ensemble(&self, roots: Vec<Vec<f64>>, workers: usize) -> EnsembleConfig {
        EnsembleConfig {
            simulation: self.simulation.clone(),
            replicates: self.config.ensemble.replicates,
            master_seed: self.config.ensemble.master_seed,
            roots,
            classify_radius: self.config.ensemble.classify_radius,
            workers,
        }
    }

    pub fn checkpoint_grid(&self) -> Vec<u64> {
        let h = self.config.ensemble.horizon;
        match &self.config.ensemble.checkpoints {
            Some(g) => g.clone(),
            None => {
                let mut g = crate::schedules::log_checkpoints(1, h, 10);
                g.retain(|n| *n >= 1 && *n <= h);
                g
            }
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.config
            .ensemble
            .seeds
            .clone()
            .unwrap_or_else(|| vec![self.config.ensemble.master_seed])
    }
}
