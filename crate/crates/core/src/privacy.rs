//! Client-level Gaussian mechanism and the per-cohort moments accountant.
//!
//! Each communication round releases the noisy sum of clipped client deltas
//! from a cohort whose clients were subsampled with probability `q`. The
//! privacy loss of one such release is tracked through its log moments
//! `alpha(lambda)` for integer orders `lambda = 1..=32`; rounds compose by
//! adding log moments, and the tail bound
//! `delta = min_lambda exp(alpha(lambda) - lambda * epsilon)` converts the
//! running total into the delta spent at the cohort's epsilon.

use crate::nn::ParamVector;
use crate::quadrature::{self, QuadratureError};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest moment order tracked by the accountant.
pub const MAX_LAMBDA: u32 = 32;

/// Absolute tolerance used when integrating a log moment.
pub const MOMENT_TOLERANCE: f64 = 1e-12;

/// Default cap on `rounds_to_exhaustion` searches.
pub const DEFAULT_ROUND_CAP: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PrivacyError {
    #[error("invalid privacy parameter: {0}")]
    InvalidParameter(String),
    #[error("log moment for q={q}, sigma={sigma}, lambda={lambda} failed to converge: {source}")]
    NonConvergence {
        q: f64,
        sigma: f64,
        lambda: u32,
        #[source]
        source: QuadratureError,
    },
    #[error("cohort budget already exhausted after {rounds} rounds")]
    Exhausted { rounds: u64 },
    #[error("budget not exhausted within {cap} rounds")]
    RoundCapExceeded { cap: u64 },
}

pub type Result<T> = std::result::Result<T, PrivacyError>;

/// Clip bound `S` and noise multiplier `sigma` of the Gaussian mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sensitivity: f64,
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(sensitivity: f64, sigma: f64) -> Result<Self> {
        if !(sensitivity > 0.0 && sensitivity.is_finite()) {
            return Err(PrivacyError::InvalidParameter(format!(
                "sensitivity must be positive, got {sensitivity}"
            )));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(PrivacyError::InvalidParameter(format!(
                "sigma must be non-negative, got {sigma}"
            )));
        }
        Ok(Self { sensitivity, sigma })
    }

    /// Per-coordinate standard deviation `S * sigma`.
    pub fn std_dev(&self) -> f64 {
        self.sensitivity * self.sigma
    }
}

/// Scales `delta` by `1 / max(1, ||delta|| / S)`.
pub fn clip_update(delta: &ParamVector, sensitivity: f64) -> ParamVector {
    let mut out = delta.clone();
    clip_in_place(&mut out, sensitivity);
    out
}

pub(crate) fn clip_in_place(delta: &mut ParamVector, sensitivity: f64) {
    let norm = delta.l2_norm();
    let divisor = (norm / sensitivity).max(1.0);
    if divisor > 1.0 {
        delta.scale_in_place(1.0 / divisor);
    }
}

/// `dim` i.i.d. draws from `N(0, (S * sigma)^2)`.
pub fn gaussian_noise<R: Rng + ?Sized>(dim: usize, spec: &NoiseSpec, rng: &mut R) -> Vec<f64> {
    let std = spec.std_dev();
    if std == 0.0 {
        return vec![0.0; dim];
    }
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// Reference bound for a single Gaussian-mechanism release:
/// `(4/5) exp(-(sigma * epsilon)^2 / 2)`. Not used for budget decisions.
pub fn single_release_delta_bound(sigma: f64, epsilon: f64) -> f64 {
    0.8 * (-(sigma * epsilon).powi(2) / 2.0).exp()
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// One of the two directions of the privacy-loss random variable.
#[derive(Clone, Copy)]
enum Ordering {
    // E_{z ~ mixture} [(mixture / base)^lambda]
    MixtureOverBase,
    // E_{z ~ base} [(base / mixture)^lambda]
    BaseOverMixture,
}

struct MomentIntegrand {
    q: f64,
    sigma: f64,
    lambda: f64,
    ordering: Ordering,
}

impl MomentIntegrand {
    // log(mixture(z) / base(z)) = log(1 - q + q exp((2z - 1) / (2 sigma^2)))
    fn log_ratio(&self, z: f64) -> f64 {
        let shift = (2.0 * z - 1.0) / (2.0 * self.sigma * self.sigma) + self.q.ln();
        if self.q >= 1.0 {
            shift
        } else {
            log_add_exp((-self.q).ln_1p(), shift)
        }
    }

    fn log_base_density(&self, z: f64) -> f64 {
        let s2 = self.sigma * self.sigma;
        -z * z / (2.0 * s2) - 0.5 * (2.0 * std::f64::consts::PI * s2).ln()
    }

    /// Log of the integrand, written against the base density so that both
    /// orderings share one measure.
    fn log_value(&self, z: f64) -> f64 {
        let r = self.log_ratio(z);
        let base = self.log_base_density(z);
        match self.ordering {
            Ordering::MixtureOverBase => base + (self.lambda + 1.0) * r,
            Ordering::BaseOverMixture => base - self.lambda * r,
        }
    }

    /// The integrand's mass lies within a few standard deviations of
    /// `[lo, hi]`: every stationary point satisfies `z = (lambda + 1) s` or
    /// `z = -lambda s` for some `s` in `[0, 1]`.
    fn support(&self) -> (f64, f64) {
        let pad = 40.0 * self.sigma + 2.0;
        match self.ordering {
            Ordering::MixtureOverBase => (-pad, self.lambda + 1.0 + pad),
            Ordering::BaseOverMixture => (-self.lambda - pad, pad),
        }
    }

    fn log_expectation(&self) -> std::result::Result<f64, QuadratureError> {
        let (lo, hi) = self.support();
        let panels = ((hi - lo) / self.sigma).ceil().max(1.0) as usize;
        let step = (hi - lo) / (8 * panels) as f64;
        let peak = (0..=8 * panels)
            .map(|k| self.log_value(lo + step * k as f64))
            .fold(f64::NEG_INFINITY, f64::max);
        let mass = quadrature::integrate_panels(
            |z| (self.log_value(z) - peak).exp(),
            lo,
            hi,
            panels,
            MOMENT_TOLERANCE,
        )?;
        Ok(peak + mass.ln())
    }
}

fn validate_moment_args(q: f64, sigma: f64, lambda: u32) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(PrivacyError::InvalidParameter(format!("q must lie in (0, 1], got {q}")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(PrivacyError::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if lambda == 0 {
        return Err(PrivacyError::InvalidParameter("lambda must be positive".into()));
    }
    Ok(())
}

/// Log moment `alpha(lambda)` of one subsampled Gaussian release with
/// sampling probability `q` and noise multiplier `sigma`.
///
/// Both orderings of the privacy-loss variable are integrated numerically and
/// the larger is returned; the result is clamped at zero.
pub fn log_moment(q: f64, sigma: f64, lambda: u32) -> Result<f64> {
    validate_moment_args(q, sigma, lambda)?;
    let mut best = 0.0f64;
    for ordering in [Ordering::MixtureOverBase, Ordering::BaseOverMixture] {
        let integrand = MomentIntegrand {
            q,
            sigma,
            lambda: f64::from(lambda),
            ordering,
        };
        let value = integrand
            .log_expectation()
            .map_err(|source| PrivacyError::NonConvergence {
                q,
                sigma,
                lambda,
                source,
            })?;
        best = best.max(value);
    }
    Ok(best)
}

/// Log moments for every order in `grid`.
pub fn log_moments(q: f64, sigma: f64, grid: &[u32]) -> Result<Vec<f64>> {
    grid.iter().map(|&l| log_moment(q, sigma, l)).collect()
}

/// `min_lambda exp(alpha(lambda) - lambda * epsilon)`, capped at 1.
pub fn delta_from_moments(grid: &[u32], moments: &[f64], epsilon: f64) -> f64 {
    let exponent = grid
        .iter()
        .zip(moments)
        .map(|(&l, &a)| a - f64::from(l) * epsilon)
        .fold(f64::INFINITY, f64::min);
    exponent.min(0.0).exp()
}

pub fn default_lambda_grid() -> Vec<u32> {
    (1..=MAX_LAMBDA).collect()
}

/// Privacy state of one cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortLedger {
    pub epsilon_target: f64,
    pub delta_threshold: f64,
    pub q: f64,
    pub sigma: f64,
    pub lambda_grid: Vec<u32>,
    /// `alpha(lambda)` of a single round, cached at construction.
    pub round_log_moments: Vec<f64>,
    pub cumulative_log_moments: Vec<f64>,
    pub rounds_composed: u64,
    pub exhausted: bool,
    /// Extra participations granted by relaxation; `None` outside relaxation.
    #[serde(default)]
    pub relaxed_allowance: Option<u64>,
}

impl CohortLedger {
    pub fn new(epsilon_target: f64, delta_threshold: f64, q: f64, sigma: f64) -> Result<Self> {
        if !(epsilon_target > 0.0 && epsilon_target.is_finite()) {
            return Err(PrivacyError::InvalidParameter(format!(
                "epsilon must be positive, got {epsilon_target}"
            )));
        }
        if !(delta_threshold > 0.0 && delta_threshold < 1.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "delta threshold must lie in (0, 1), got {delta_threshold}"
            )));
        }
        let lambda_grid = default_lambda_grid();
        let round_log_moments = log_moments(q, sigma, &lambda_grid)?;
        Ok(Self {
            epsilon_target,
            delta_threshold,
            q,
            sigma,
            cumulative_log_moments: vec![0.0; lambda_grid.len()],
            lambda_grid,
            round_log_moments,
            rounds_composed: 0,
            exhausted: false,
            relaxed_allowance: None,
        })
    }

    /// Composes one more round: cumulative moments grow by the per-round
    /// moments.
    pub fn accumulate_round(&mut self) -> Result<()> {
        if self.exhausted {
            return Err(PrivacyError::Exhausted {
                rounds: self.rounds_composed,
            });
        }
        for (c, r) in self.cumulative_log_moments.iter_mut().zip(&self.round_log_moments) {
            *c += r;
        }
        self.rounds_composed += 1;
        if let Some(left) = self.relaxed_allowance.as_mut() {
            *left = left.saturating_sub(1);
        }
        Ok(())
    }

    pub fn delta_for_epsilon(&self, epsilon: f64) -> f64 {
        delta_from_moments(&self.lambda_grid, &self.cumulative_log_moments, epsilon)
    }

    /// Delta spent so far at the cohort's own epsilon.
    pub fn delta_spent(&self) -> f64 {
        self.delta_for_epsilon(self.epsilon_target)
    }

    /// Delta that would be spent after composing one more round.
    pub fn delta_after_next_round(&self) -> f64 {
        let next: Vec<f64> = self
            .cumulative_log_moments
            .iter()
            .zip(&self.round_log_moments)
            .map(|(c, r)| c + r)
            .collect();
        delta_from_moments(&self.lambda_grid, &next, self.epsilon_target)
    }

    /// Decides whether the cohort may take part in the next round. Marks the
    /// ledger exhausted when the next round would push delta past the
    /// threshold (or when a relaxation allowance is used up).
    pub fn admit_round(&mut self) -> bool {
        if self.exhausted {
            return false;
        }
        let admitted = match self.relaxed_allowance {
            Some(left) => left > 0,
            None => self.delta_after_next_round() <= self.delta_threshold,
        };
        if !admitted {
            self.exhausted = true;
            self.relaxed_allowance = None;
        }
        admitted
    }

    /// Marks the budget spent without consulting the accountant.
    pub fn mark_exhausted(&mut self) {
        self.exhausted = true;
        self.relaxed_allowance = None;
    }

    /// Reopens an exhausted ledger for `extra_rounds` further participations.
    pub fn relax(&mut self, extra_rounds: u64) -> Result<()> {
        if !self.exhausted {
            return Err(PrivacyError::InvalidParameter(
                "only an exhausted ledger can be relaxed".into(),
            ));
        }
        self.exhausted = false;
        self.relaxed_allowance = Some(extra_rounds);
        Ok(())
    }
}

/// Smallest `T` such that composing `T` rounds gives `delta > Q`. A cohort
/// therefore trains for `T - 1` rounds.
pub fn rounds_to_exhaustion(q: f64, sigma: f64, epsilon: f64, delta_threshold: f64, cap: u64) -> Result<u64> {
    let ledger = CohortLedger::new(epsilon, delta_threshold, q, sigma)?;
    rounds_for_ledger(ledger, cap)
}

fn rounds_for_ledger(mut ledger: CohortLedger, cap: u64) -> Result<u64> {
    for t in 1..=cap {
        ledger.accumulate_round()?;
        if ledger.delta_spent() > ledger.delta_threshold {
            return Ok(t);
        }
    }
    Err(PrivacyError::RoundCapExceeded { cap })
}

/// `(round, delta)` after each composed round up to and including the first
/// round whose delta exceeds the threshold.
pub fn delta_trajectory(
    q: f64,
    sigma: f64,
    epsilon: f64,
    delta_threshold: f64,
    cap: u64,
) -> Result<Vec<(u64, f64)>> {
    let mut ledger = CohortLedger::new(epsilon, delta_threshold, q, sigma)?;
    let mut rows = Vec::new();
    for t in 1..=cap {
        ledger.accumulate_round()?;
        let delta = ledger.delta_spent();
        rows.push((t, delta));
        if delta > delta_threshold {
            return Ok(rows);
        }
    }
    Err(PrivacyError::RoundCapExceeded { cap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerShapes;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn vector(values: Vec<f64>) -> ParamVector {
        let shapes = LayerShapes::new(vec![1, values.len() - 1]).unwrap();
        // n-1 outputs with one input: (n-1) weights + (n-1) biases.
        let padded_len = shapes.param_count();
        let mut v = values;
        v.resize(padded_len, 0.0);
        ParamVector::from_values(&shapes, v).unwrap()
    }

    #[test]
    fn clipping_examples() {
        let small = vector(vec![0.3, 0.4]);
        assert_eq!(clip_update(&small, 1.0), small);
        let big = vector(vec![1.2, 1.6]);
        let clipped = clip_update(&big, 1.0);
        assert!((clipped.l2_norm() - 1.0).abs() < 1e-15);
        assert!((clipped.values()[0] - 0.6).abs() < 1e-15);
        let zero = vector(vec![0.0, 0.0]);
        assert!(clip_update(&zero, 1.0).is_zero());
    }

    #[test]
    fn noise_is_deterministic_and_vanishes_without_sigma() {
        let spec = NoiseSpec::new(1.0, 1.0).unwrap();
        let a = gaussian_noise(16, &spec, &mut ChaCha20Rng::seed_from_u64(5));
        let b = gaussian_noise(16, &spec, &mut ChaCha20Rng::seed_from_u64(5));
        assert_eq!(a, b);
        let silent = NoiseSpec::new(1.0, 0.0).unwrap();
        assert!(gaussian_noise(8, &silent, &mut ChaCha20Rng::seed_from_u64(5))
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn pure_gaussian_moment_matches_closed_form() {
        let a = log_moment(1.0, 1.0, 2).unwrap();
        assert!((a - 3.0).abs() < 1e-12, "{a}");
    }

    #[test]
    fn vanishing_sampling_leaks_nothing() {
        for lambda in [1, 8, 32] {
            assert!(log_moment(1e-9, 1.0, lambda).unwrap() < 1e-6);
        }
    }

    #[test]
    fn moments_nondecreasing_in_order() {
        let m = log_moments(0.05, 1.0, &default_lambda_grid()).unwrap();
        assert!(m.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(log_moment(0.0, 1.0, 1).is_err());
        assert!(log_moment(0.5, 0.0, 1).is_err());
        assert!(log_moment(0.5, 1.0, 0).is_err());
        assert!(NoiseSpec::new(0.0, 1.0).is_err());
        assert!(CohortLedger::new(6.0, 1.5, 0.05, 1.0).is_err());
    }

    #[test]
    fn fresh_ledger_delta() {
        let ledger = CohortLedger::new(6.0, 1e-5, 0.05, 1.0).unwrap();
        let d = ledger.delta_for_epsilon(6.0);
        assert!((d / (-192f64).exp() - 1.0).abs() < 1e-12);
        assert!((d - 4.13e-84).abs() < 0.01e-84);
    }

    #[test]
    fn composition_is_additive() {
        let mut ledger = CohortLedger::new(6.0, 1e-5, 0.05, 1.0).unwrap();
        let single = ledger.round_log_moments.clone();
        for _ in 0..25 {
            ledger.accumulate_round().unwrap();
        }
        for (c, s) in ledger.cumulative_log_moments.iter().zip(&single) {
            assert!((c - 25.0 * s).abs() < 1e-9);
        }
        assert_eq!(ledger.rounds_composed, 25);
    }

    #[test]
    fn exhausted_ledger_refuses_more_rounds() {
        let mut ledger = CohortLedger::new(6.0, 1e-5, 0.5, 1.0).unwrap();
        while ledger.admit_round() {
            ledger.accumulate_round().unwrap();
        }
        assert!(ledger.exhausted);
        assert!(ledger.delta_spent() <= ledger.delta_threshold);
        assert!(matches!(ledger.accumulate_round(), Err(PrivacyError::Exhausted { .. })));
        assert!(!ledger.admit_round());
    }

    #[test]
    fn relaxation_grants_exactly_the_extra_rounds() {
        let mut ledger = CohortLedger::new(6.0, 1e-5, 0.5, 1.0).unwrap();
        assert!(ledger.relax(3).is_err());
        while ledger.admit_round() {
            ledger.accumulate_round().unwrap();
        }
        let before = ledger.rounds_composed;
        ledger.relax(3).unwrap();
        let mut extra = 0;
        while ledger.admit_round() {
            ledger.accumulate_round().unwrap();
            extra += 1;
        }
        assert_eq!(extra, 3);
        assert_eq!(ledger.rounds_composed, before + 3);
        assert!(ledger.exhausted);
    }

    #[test]
    fn admitted_rounds_match_rounds_to_exhaustion() {
        let t = rounds_to_exhaustion(0.2, 1.0, 6.0, 1e-5, 10_000).unwrap();
        let mut ledger = CohortLedger::new(6.0, 1e-5, 0.2, 1.0).unwrap();
        let mut admitted = 0;
        while ledger.admit_round() {
            ledger.accumulate_round().unwrap();
            admitted += 1;
        }
        assert_eq!(admitted, t - 1);
    }

    #[test]
    fn round_cap_is_reported() {
        assert_eq!(
            rounds_to_exhaustion(0.05, 1.0, 6.0, 1e-5, 3),
            Err(PrivacyError::RoundCapExceeded { cap: 3 })
        );
    }

    #[test]
    fn reference_bound() {
        assert!((single_release_delta_bound(1.0, 0.0) - 0.8).abs() < 1e-15);
        assert!(single_release_delta_bound(2.0, 3.0) < 1e-7);
    }
}
