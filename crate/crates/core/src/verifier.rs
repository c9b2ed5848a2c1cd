//! Security parameters and session verdicts.
//!
//! A blind guesser answers each balanced challenge correctly with probability
//! 1/2, so with `n` challenges and `e` tolerated errors it is accepted with
//! probability `sum_{i<=e} C(n, i) / 2^n`. All threshold comparisons are done
//! on that exact fraction.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Largest supported challenge count; keeps every binomial sum inside `u128`.
pub const MAX_CHALLENGES: u32 = 64;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum VerifierError {
    #[error("allowed errors {errors} exceed challenge count {challenges}")]
    Domain { challenges: u32, errors: u32 },
    #[error("challenge count must be in 1..={MAX_CHALLENGES}, got {0}")]
    ChallengeCount(u32),
    #[error("threshold {0} must lie strictly between 0 and 1")]
    Threshold(f64),
    #[error("no challenge count up to {MAX_CHALLENGES} reaches threshold {threshold} with {errors} allowed errors")]
    Unreachable { threshold: f64, errors: u32 },
    #[error("expected {expected} answers, got {expected_len} expected and {answered_len} answered")]
    LengthMismatch { expected: usize, expected_len: usize, answered_len: usize },
}

/// An exact probability `numerator / 2^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DyadicFraction {
    pub numerator: u128,
    pub exponent: u32,
}

impl DyadicFraction {
    /// Removes common factors of two.
    pub fn reduced(self) -> Self {
        let shift = self.numerator.trailing_zeros().min(self.exponent);
        Self { numerator: self.numerator >> shift, exponent: self.exponent - shift }
    }

    pub fn denominator(self) -> u128 {
        1u128 << self.exponent
    }

    pub fn to_f64(self) -> f64 {
        // Both parts are exact in f64 up to 2^53; past that the quotient
        // still rounds once.
        self.numerator as f64 / self.denominator() as f64
    }

    /// Exact comparison against a floating-point threshold.
    pub fn cmp_f64(self, threshold: f64) -> Ordering {
        // threshold * 2^exponent is an exact power-of-two scaling.
        let scaled = threshold * self.denominator() as f64;
        if scaled >= u128::MAX as f64 {
            return Ordering::Less;
        }
        let floor = scaled.floor();
        let whole = floor as u128;
        match self.numerator.cmp(&whole) {
            Ordering::Equal if scaled > floor => Ordering::Less,
            other => other,
        }
    }

    pub fn le_f64(self, threshold: f64) -> bool {
        self.cmp_f64(threshold) != Ordering::Greater
    }
}

impl fmt::Display for DyadicFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator())
    }
}

fn binomial(n: u32, k: u32) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * u128::from(n - i) / u128::from(i + 1))
}

/// Acceptance probability of a uniform random responder facing `challenges`
/// balanced challenges with `errors` mistakes tolerated.
pub fn guess_probability(challenges: u32, errors: u32) -> Result<DyadicFraction, VerifierError> {
    if challenges == 0 || challenges > MAX_CHALLENGES {
        return Err(VerifierError::ChallengeCount(challenges));
    }
    if errors > challenges {
        return Err(VerifierError::Domain { challenges, errors });
    }
    let numerator = (0..=errors).map(|i| binomial(challenges, i)).sum();
    Ok(DyadicFraction { numerator, exponent: challenges })
}

/// Smallest challenge count whose guess probability is at most `threshold`.
pub fn min_challenges(threshold: f64, errors: u32) -> Result<u32, VerifierError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(VerifierError::Threshold(threshold));
    }
    (errors.saturating_add(1)..=MAX_CHALLENGES)
        .find(|&n| guess_probability(n, errors).map(|p| p.le_f64(threshold)).unwrap_or(false))
        .ok_or(VerifierError::Unreachable { threshold, errors })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecurityPolicy {
    pub guessing_threshold: f64,
    pub allowed_errors: u32,
    pub challenge_count: u32,
    pub tolerance: f64,
}

impl SecurityPolicy {
    /// Derives the challenge count from a guessing threshold.
    pub fn derive(guessing_threshold: f64, allowed_errors: u32, tolerance: f64) -> Result<Self, VerifierError> {
        let challenge_count = min_challenges(guessing_threshold, allowed_errors)?;
        Ok(Self { guessing_threshold, allowed_errors, challenge_count, tolerance })
    }

    /// The policy whose threshold is exactly the guess probability of
    /// `(challenges, errors)`, so the derived challenge count is `challenges`.
    pub fn from_counts(challenges: u32, allowed_errors: u32, tolerance: f64) -> Result<Self, VerifierError> {
        let p = guess_probability(challenges, allowed_errors)?;
        let mut threshold = p.to_f64();
        if !p.le_f64(threshold) {
            threshold = threshold.next_up();
        }
        if threshold >= 1.0 {
            // Every answer pattern is accepted; no threshold below one describes it.
            return Ok(Self { guessing_threshold: 1.0, allowed_errors, challenge_count: challenges, tolerance });
        }
        let policy = Self::derive(threshold, allowed_errors, tolerance)?;
        debug_assert_eq!(policy.challenge_count, challenges);
        Ok(policy)
    }

    pub fn guess_probability(&self) -> DyadicFraction {
        guess_probability(self.challenge_count, self.allowed_errors).expect("policy invariants hold")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub accepted: bool,
    pub errors_observed: u32,
    pub challenges_answered: u32,
}

pub fn decide(policy: &SecurityPolicy, expected: &[bool], answered: &[bool]) -> Result<Verdict, VerifierError> {
    let n = policy.challenge_count as usize;
    if expected.len() != n || answered.len() != n {
        return Err(VerifierError::LengthMismatch {
            expected: n,
            expected_len: expected.len(),
            answered_len: answered.len(),
        });
    }
    let errors_observed = expected.iter().zip(answered).filter(|(e, a)| e != a).count() as u32;
    Ok(Verdict {
        accepted: errors_observed <= policy.allowed_errors,
        errors_observed,
        challenges_answered: policy.challenge_count,
    })
}
