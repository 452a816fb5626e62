//! Command-line front end.
//!
//! Exit codes: `0` when every checked condition or verdict passes, `1` when
//! one fails, `2` on configuration or runtime errors.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, Experiment, ExperimentConfig};
use crate::harness::{
    self, clt_report, run_ensemble, theory_for_roots, HarnessError, TargetTheory,
};
use crate::linalg::{to_rows, Rows};
use crate::markov::{
    conditional_covariances, family_poisson, observation_table, u_star, MarkovError,
};
use crate::schedules::StepSchedule;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Markov(#[from] MarkovError),
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("invalid theory file: {0}")]
    TheoryFile(serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(
    name = "saclt",
    version,
    about = "Stochastic approximation with CLT verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment file (JSON) or the name of a built-in preset.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for ensembles (default: available cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Override the master seed (and the `simulate` seed list).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Classify the schedule and check the hypotheses at every root.
    Conditions(CommonArgs),
    /// Solve for the theoretical covariances at every root.
    Lyapunov(CommonArgs),
    /// Run single trajectories and write checkpoint CSVs.
    Simulate(CommonArgs),
    /// Run the ensemble and compare with theory.
    CltCheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Theory file from `lyapunov`; computed inline when absent.
        #[arg(long)]
        theory: Option<PathBuf>,
    },
    /// Dump stationary law, mean field, Poisson solution and U* at θ.
    Poisson {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated parameter; defaults to the first refined root.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        theta: Option<Vec<f64>>,
    },
}

/// Output of `lyapunov`, input of `clt-check --theory`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryFile {
    pub name: String,
    pub master_seed: u64,
    pub schedule: StepSchedule,
    pub targets: Vec<TargetTheory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoissonReport {
    pub theta: Vec<f64>,
    pub kernel: Rows,
    pub pi: Vec<f64>,
    pub h: Vec<f64>,
    pub observations: Rows,
    pub g_hat: Rows,
    pub qg_hat: Rows,
    pub f_theta: Vec<Rows>,
    pub u_star: Rows,
    pub u_star_min_eigenvalue: f64,
    /// `max_x |g(x) - πg - ĝ(x) + Qĝ(x)|`.
    pub identity_residual: f64,
    /// `|π ĝ|_∞`.
    pub centering_residual: f64,
}

fn load(common: &CommonArgs) -> Result<Experiment, CliError> {
    let mut cfg = ExperimentConfig::resolve(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.ensemble.master_seed = seed;
        cfg.ensemble.seeds = Some(vec![seed]);
    }
    Ok(cfg.build()?)
}

fn out_dir(common: &CommonArgs, exp: &Experiment) -> Option<PathBuf> {
    common.out.clone().or_else(|| exp.config.output.dir.clone())
}

fn workers(common: &CommonArgs) -> usize {
    common
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(format!("writing {}", path.display())))?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serialises");
    s.push('\n');
    s
}

/// Run a parsed command. `Ok(true)` maps to exit 0, `Ok(false)` to exit 1.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<bool, CliError> {
    let out = |stdout: &mut dyn Write, text: &str| {
        stdout.write_all(text.as_bytes()).map_err(io_err("stdout"))
    };
    match &cli.command {
        Command::Conditions(common) => {
            let exp = load(common)?;
            let cfg = &exp.config;
            let summary = harness::check_conditions(
                &exp.simulation.problem,
                &cfg.schedule,
                &exp.root_guesses,
                cfg.theorem,
                cfg.ensemble.horizon,
            )?;
            out(stdout, &summary.to_text())?;
            if let Some(dir) = out_dir(common, &exp) {
                write_file(&dir, "conditions.json", to_json(&summary).as_bytes())?;
            }
            Ok(summary.pass)
        }
        Command::Lyapunov(common) => {
            let exp = load(common)?;
            let theory = theory_file(&exp)?;
            let json = to_json(&theory);
            out(stdout, &json)?;
            if let Some(dir) = out_dir(common, &exp) {
                write_file(&dir, "theory.json", json.as_bytes())?;
            }
            Ok(true)
        }
        Command::Simulate(common) => {
            let exp = load(common)?;
            let dir = out_dir(common, &exp)
                .ok_or_else(|| CliError::Usage("simulate needs --out or output.dir".into()))?;
            let grid = exp.checkpoint_grid();
            for seed in exp.seeds() {
                let traj = exp.simulation.run(seed, 0, &grid)?;
                let mut buf = Vec::new();
                traj.write_csv(&mut buf).map_err(io_err("formatting CSV"))?;
                let path = write_file(&dir, &format!("trajectory_seed{seed}.csv"), &buf)?;
                out(stdout, &format!("{}\n", path.display()))?;
            }
            Ok(true)
        }
        Command::CltCheck { common, theory } => {
            let exp = load(common)?;
            let targets = match theory {
                Some(path) => {
                    let text = fs::read_to_string(path)
                        .map_err(io_err(format!("reading {}", path.display())))?;
                    serde_json::from_str::<TheoryFile>(&text)
                        .map_err(CliError::TheoryFile)?
                        .targets
                }
                None => theory_file(&exp)?.targets,
            };
            let roots = targets.iter().map(|t| t.root.clone()).collect();
            let sample = run_ensemble(&exp.ensemble(roots, workers(common)))?;
            let cfg = &exp.config;
            let report = clt_report(&sample, &targets, cfg.theorem, &cfg.tolerances)?;
            let text = report.to_text();
            out(stdout, &text)?;
            if let Some(dir) = out_dir(common, &exp) {
                write_file(&dir, "report.json", to_json(&report).as_bytes())?;
                write_file(&dir, "report.txt", text.as_bytes())?;
                if cfg.output.dump_samples {
                    let mut buf = Vec::new();
                    sample
                        .write_csv(&mut buf)
                        .map_err(io_err("formatting CSV"))?;
                    write_file(&dir, "samples.csv", &buf)?;
                }
            }
            Ok(report.pass)
        }
        Command::Poisson { common, theta } => {
            let exp = load(common)?;
            let problem = &exp.simulation.problem;
            let family = problem
                .family()
                .ok_or_else(|| CliError::Usage("poisson needs a kernel problem".into()))?;
            let theta = match theta {
                Some(t) => t.clone(),
                None => {
                    let guess = &exp.root_guesses[0];
                    problem
                        .refine_root(guess, harness::ROOT_TOL)?
                        .as_slice()
                        .to_vec()
                }
            };
            if theta.len() != family.dim() {
                return Err(CliError::Usage(format!(
                    "theta has {} components, the family has dimension {}",
                    theta.len(),
                    family.dim()
                )));
            }
            let report = poisson_report(family.as_ref(), &theta)?;
            let json = to_json(&report);
            out(stdout, &json)?;
            if let Some(dir) = out_dir(common, &exp) {
                write_file(&dir, "poisson.json", json.as_bytes())?;
            }
            Ok(true)
        }
    }
}

fn theory_file(exp: &Experiment) -> Result<TheoryFile, CliError> {
    let cfg = &exp.config;
    Ok(TheoryFile {
        name: cfg.name.clone(),
        master_seed: cfg.ensemble.master_seed,
        schedule: cfg.schedule,
        targets: theory_for_roots(&exp.simulation.problem, &cfg.schedule, &exp.root_guesses)?,
    })
}

pub fn poisson_report(
    family: &dyn crate::markov::KernelFamily,
    theta: &[f64],
) -> Result<PoissonReport, CliError> {
    let q = family.kernel(theta);
    let sol = family_poisson(family, theta)?;
    let g = observation_table(family, theta);
    let u = u_star(family, theta)?;
    Ok(PoissonReport {
        theta: theta.to_vec(),
        kernel: to_rows(&q),
        pi: sol.pi.iter().copied().collect(),
        h: sol.mean.iter().copied().collect(),
        observations: to_rows(&g),
        g_hat: to_rows(&sol.g_hat),
        qg_hat: to_rows(&sol.qg_hat),
        f_theta: conditional_covariances(&q, &sol)
            .iter()
            .map(to_rows)
            .collect(),
        u_star: to_rows(&u.matrix),
        u_star_min_eigenvalue: u.min_eigenvalue,
        identity_residual: sol.identity_residual(&g),
        centering_residual: (sol.g_hat.transpose() * &sol.pi).amax(),
    })
}
