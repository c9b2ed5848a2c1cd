//! Small statistics helpers for Monte Carlo estimates.

use serde::Serialize;

/// z for a two-sided 95% interval.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let low = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if successes == trials { 1.0 } else { (center + half).min(1.0) };
    (low, high)
}

/// A Monte Carlo proportion with its 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub successes: u64,
    pub trials: u64,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Estimate {
    pub fn from_counts(successes: u64, trials: u64) -> Self {
        let (ci_low, ci_high) = wilson_interval(successes, trials, Z_95);
        let estimate = if trials == 0 { 0.0 } else { successes as f64 / trials as f64 };
        Self { successes, trials, estimate, ci_low, ci_high }
    }

    pub fn contains(&self, p: f64) -> bool {
        self.ci_low <= p && p <= self.ci_high
    }

    /// Standard deviations between the estimate and `p`, using the binomial
    /// standard error at `p`.
    pub fn z_score(&self, p: f64) -> f64 {
        let sigma = (p * (1.0 - p) / self.trials as f64).sqrt();
        if sigma == 0.0 {
            return if self.estimate == p { 0.0 } else { f64::INFINITY };
        }
        (self.estimate - p) / sigma
    }
}
