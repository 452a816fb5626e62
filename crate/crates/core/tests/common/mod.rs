#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use saclt::config::ExperimentConfig;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// Random matrix shifted so its rightmost eigenvalue has real part in
/// `[-1, -0.1]`.
pub fn random_hurwitz(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let m = gaussian_matrix(rng, d, d);
    let top = saclt::linalg::complex_eigenvalues(&m)
        .unwrap()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let margin = rng.random_range(0.1..1.0);
    m - DMatrix::identity(d, d) * (top + margin)
}

/// `B Bᵀ + 0.1 I`.
pub fn random_pd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let b = gaussian_matrix(rng, d, d);
    &b * b.transpose() + DMatrix::identity(d, d) * 0.1
}

/// Strictly positive row-stochastic matrix.
pub fn random_ergodic(rng: &mut ChaCha8Rng, s: usize) -> DMatrix<f64> {
    let mut q = DMatrix::from_fn(s, s, |_, _| rng.random_range(0.01..1.0));
    for mut row in q.row_iter_mut() {
        let sum: f64 = row.iter().sum();
        row /= sum;
    }
    q
}

pub fn preset_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("presets")
        .join(format!("{name}.json"))
}

pub fn preset(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&preset_path(name)).expect("preset parses")
}
