//! Polynomial step-size sequences `γ_n = γ* / (n + n₀)^a` and their
//! classification against the step-size hypotheses of the CLTs.
//!
//! Two regimes are recognised:
//!
//! - slow decay, `a ∈ (1/2, 1)`: the raw CLT holds with the plain Lyapunov
//!   equation and averaging reaches the optimal covariance;
//! - fast decay, `a = 1`: the raw CLT needs `γ* > 1/(2L)` where `-L` is the
//!   largest real part of the Jacobian spectrum at the target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("gamma_star must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("exponent_a must lie in (1/2, 1], got {0}")]
    InvalidExponent(f64),
    #[error("decay rate L must be positive and finite, got {0}")]
    InvalidDecayRate(f64),
    #[error("AVER2 diagnostics need a horizon of at least 10, got {0}")]
    HorizonTooShort(u64),
}

/// Deterministic step sizes `γ_n = gamma_star / (n + offset)^exponent_a`, `n ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule", into = "RawSchedule")]
pub struct StepSchedule {
    gamma_star: f64,
    exponent_a: f64,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    gamma_star: f64,
    exponent_a: f64,
    #[serde(default)]
    offset: u64,
}

impl TryFrom<RawSchedule> for StepSchedule {
    type Error = ScheduleError;

    fn try_from(raw: RawSchedule) -> Result<Self, Self::Error> {
        StepSchedule::new(raw.gamma_star, raw.exponent_a, raw.offset)
    }
}

impl From<StepSchedule> for RawSchedule {
    fn from(s: StepSchedule) -> Self {
        RawSchedule {
            gamma_star: s.gamma_star,
            exponent_a: s.exponent_a,
            offset: s.offset,
        }
    }
}

impl StepSchedule {
    pub fn new(gamma_star: f64, exponent_a: f64, offset: u64) -> Result<Self, ScheduleError> {
        if !(gamma_star.is_finite() && gamma_star > 0.0) {
            return Err(ScheduleError::InvalidScale(gamma_star));
        }
        if !(exponent_a > 0.5 && exponent_a <= 1.0) {
            return Err(ScheduleError::InvalidExponent(exponent_a));
        }
        Ok(Self {
            gamma_star,
            exponent_a,
            offset,
        })
    }

    pub fn gamma_star(&self) -> f64 {
        self.gamma_star
    }

    pub fn exponent_a(&self) -> f64 {
        self.exponent_a
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    /// `γ_n` for `n ≥ 1`.
    #[inline]
    pub fn gamma(&self, n: u64) -> f64 {
        debug_assert!(n >= 1, "step sizes are indexed from 1");
        let m = (n + self.offset) as f64;
        if self.exponent_a == 1.0 {
            self.gamma_star / m
        } else {
            self.gamma_star / m.powf(self.exponent_a)
        }
    }

    pub fn is_slow(&self) -> bool {
        self.exponent_a < 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeTag {
    SlowC2a,
    FastC2b,
    Invalid,
}

impl std::fmt::Display for RegimeTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegimeTag::SlowC2a => "slow (C2a)",
            RegimeTag::FastC2b => "fast (C2b)",
            RegimeTag::Invalid => "invalid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRegime {
    pub tag: RegimeTag,
    pub reason: String,
    /// `1/(2L)`, the bound `γ*` must strictly exceed when `a = 1`.
    pub required_gamma_star_lower_bound: Option<f64>,
}

/// Classify `schedule` for a target whose Jacobian has decay rate `decay_rate`.
///
/// The fast-rate condition is strict: `γ* = 1/(2L)` is `Invalid`.
pub fn classify_sa_regime(
    schedule: &StepSchedule,
    decay_rate: f64,
) -> Result<ScheduleRegime, ScheduleError> {
    if !(decay_rate.is_finite() && decay_rate > 0.0) {
        return Err(ScheduleError::InvalidDecayRate(decay_rate));
    }
    if schedule.is_slow() {
        return Ok(ScheduleRegime {
            tag: RegimeTag::SlowC2a,
            reason: format!(
                "a = {} in (1/2, 1): log(γ_(n-1)/γ_n) = o(γ_n)",
                schedule.exponent_a
            ),
            required_gamma_star_lower_bound: None,
        });
    }
    let bound = 1.0 / (2.0 * decay_rate);
    if schedule.gamma_star > bound {
        Ok(ScheduleRegime {
            tag: RegimeTag::FastC2b,
            reason: format!("a = 1 and γ* = {} > 1/(2L) = {bound}", schedule.gamma_star),
            required_gamma_star_lower_bound: Some(bound),
        })
    } else {
        Ok(ScheduleRegime {
            tag: RegimeTag::Invalid,
            reason: format!(
                "a = 1 requires γ* > 1/(2L) = {bound}, got γ* = {}",
                schedule.gamma_star
            ),
            required_gamma_star_lower_bound: Some(bound),
        })
    }
}

/// One log-spaced checkpoint of the AVER2 partial sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aver2Point {
    pub n: u64,
    /// `n^{-1/2} Σ_{k≤n} γ_k^{-1/2} |1 - γ_k/γ_{k+1}|`
    pub increment_sum: f64,
    /// `n^{-1/2} Σ_{k≤n} γ_k`
    pub step_sum: f64,
    /// `n γ_n`, which must diverge.
    pub n_gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aver2Diagnostic {
    /// Closed-form verdict for the polynomial family: AVER2 holds iff `a < 1`.
    pub analytic_verdict: bool,
    pub partial_sums: Vec<Aver2Point>,
}

/// Log-spaced indices in `[10, horizon]`, ten per decade, always ending at `horizon`.
pub fn log_checkpoints(start: u64, horizon: u64, per_decade: u32) -> Vec<u64> {
    let mut out = Vec::new();
    if horizon < start {
        return out;
    }
    let lo = (start as f64).log10();
    let hi = (horizon as f64).log10();
    let steps = ((hi - lo) * per_decade as f64).ceil() as u32;
    for i in 0..=steps {
        let v = 10f64.powf(lo + i as f64 / per_decade as f64).round() as u64;
        let v = v.clamp(start, horizon);
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    if out.last() != Some(&horizon) {
        out.push(horizon);
    }
    out
}

pub fn check_aver2(
    schedule: &StepSchedule,
    horizon: u64,
) -> Result<Aver2Diagnostic, ScheduleError> {
    if horizon < 10 {
        return Err(ScheduleError::HorizonTooShort(horizon));
    }
    let marks = log_checkpoints(10, horizon, 10);
    let mut next = marks.iter().copied().peekable();
    let mut points = Vec::with_capacity(marks.len());
    let (mut inc, mut steps) = (0.0_f64, 0.0_f64);
    let mut g = schedule.gamma(1);
    for k in 1..=horizon {
        let g_next = schedule.gamma(k + 1);
        inc += (1.0 - g / g_next).abs() / g.sqrt();
        steps += g;
        if next.peek() == Some(&k) {
            next.next();
            let root = (k as f64).sqrt();
            points.push(Aver2Point {
                n: k,
                increment_sum: inc / root,
                step_sum: steps / root,
                n_gamma: k as f64 * g,
            });
        }
        g = g_next;
    }
    Ok(Aver2Diagnostic {
        analytic_verdict: schedule.is_slow(),
        partial_sums: points,
    })
}
