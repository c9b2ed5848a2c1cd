//! End-to-end authentication simulation against the service core.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::derive_seed;
use crate::kb::KnowledgeBase;
use crate::secret::{evaluate, SecretFormula};
use crate::service::{AnswerOutcome, AuthService, ChallengeView, EnrollRequest, ServiceError};
use crate::stats::Estimate;
use crate::verifier::{guess_probability, SecurityPolicy, VerifierError};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Policy(#[from] VerifierError),
    #[error("label `{0}` is shared by several attributes; simulated users answer by label")]
    AmbiguousLabel(String),
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("error rate {0} outside [0, 1]")]
    ErrorRate(f64),
}

/// How a simulated user answers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Responder {
    /// Knows the secret and flips each answer with probability `error_rate`.
    Honest { error_rate: f64 },
    /// Flips a fair coin per challenge.
    Random,
}

impl Responder {
    pub fn label(&self) -> String {
        match self {
            Self::Honest { error_rate } => format!("honest(p={error_rate})"),
            Self::Random => "random".into(),
        }
    }

    /// Analytic acceptance probability under `policy`.
    pub fn expected_accept_rate(&self, policy: &SecurityPolicy) -> f64 {
        match *self {
            Self::Random => policy.guess_probability().to_f64(),
            Self::Honest { error_rate } => binomial_cdf(policy.challenge_count, policy.allowed_errors, error_rate),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        match *self {
            Self::Honest { error_rate } if !(0.0..=1.0).contains(&error_rate) => Err(SimError::ErrorRate(error_rate)),
            _ => Ok(()),
        }
    }
}

/// P[X <= k] for X ~ Binomial(n, p).
fn binomial_cdf(n: u32, k: u32, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    let mut coefficient = 1.0;
    (0..=k)
        .map(|i| {
            if i > 0 {
                coefficient *= f64::from(n - i + 1) / f64::from(i);
            }
            coefficient * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32)
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortConfig {
    pub responder: Responder,
    pub users: usize,
    pub sessions_per_user: usize,
    pub policy: SecurityPolicy,
    pub seed: u64,
    /// Prefix for generated user ids; must not collide across cohorts run
    /// against the same service.
    pub user_prefix: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CohortReport {
    pub cohort: String,
    pub challenge_count: u32,
    pub allowed_errors: u32,
    pub accepted: Estimate,
    pub expected_rate: f64,
}

impl CohortReport {
    /// Deviation from the analytic rate in binomial standard deviations.
    pub fn z_score(&self) -> f64 {
        self.accepted.z_score(self.expected_rate)
    }
}

/// Maps displayed labels back to attribute ids, the way a user reading the
/// challenge would.
pub struct LabelIndex(HashMap<String, String>);

impl LabelIndex {
    pub fn new(kb: &KnowledgeBase) -> Result<Self, SimError> {
        let mut map = HashMap::with_capacity(kb.attribute_count());
        for a in kb.attributes() {
            if map.insert(a.label.clone(), a.id.clone()).is_some() {
                return Err(SimError::AmbiguousLabel(a.label.clone()));
            }
        }
        Ok(Self(map))
    }

    pub fn attribute(&self, label: &str) -> Result<&str, SimError> {
        self.0.get(label).map(String::as_str).ok_or_else(|| SimError::UnknownLabel(label.to_owned()))
    }
}

/// A simulated user's answering strategy for one session.
pub struct SimulatedUser<'a> {
    kb: &'a KnowledgeBase,
    labels: &'a LabelIndex,
    secret: SecretFormula,
    responder: Responder,
}

impl<'a> SimulatedUser<'a> {
    pub fn new(kb: &'a KnowledgeBase, labels: &'a LabelIndex, secret: SecretFormula, responder: Responder) -> Self {
        Self { kb, labels, secret, responder }
    }

    pub fn respond(&self, challenge: &ChallengeView, rng: &mut impl Rng) -> Result<bool, SimError> {
        Ok(match self.responder {
            Responder::Random => rng.gen_bool(0.5),
            Responder::Honest { error_rate } => {
                let attribute = self.labels.attribute(&challenge.label)?;
                let truth = evaluate(self.kb, &self.secret, attribute)
                    .map_err(|e| SimError::UnknownLabel(format!("{}: {e}", challenge.label)))?;
                truth ^ rng.gen_bool(error_rate)
            }
        })
    }
}

/// Enrolls `users` fresh users and runs `sessions_per_user` full sessions
/// for each, in process.
pub fn run_cohort(service: &AuthService, config: &CohortConfig) -> Result<CohortReport, SimError> {
    config.responder.validate()?;
    let labels = LabelIndex::new(service.kb())?;
    let mut accepted = 0u64;
    let mut total = 0u64;
    for u in 0..config.users {
        let user_seed = derive_seed(config.seed, u as u64);
        let enrollment = service.enroll(&EnrollRequest {
            user_id: format!("{}{u}", config.user_prefix),
            threshold: config.policy.guessing_threshold,
            allowed_errors: config.policy.allowed_errors,
            tolerance: config.policy.tolerance,
            seed: Some(user_seed),
        })?;
        let secret: SecretFormula = enrollment.secret_text.parse().map_err(ServiceError::from)?;
        let user = SimulatedUser::new(service.kb(), &labels, secret, config.responder);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(user_seed, 0xA11CE));
        for _ in 0..config.sessions_per_user {
            let start = service.start_session(&enrollment.user_id)?;
            let mut challenge = start.challenge;
            let verdict = loop {
                let response = user.respond(&challenge, &mut rng)?;
                match service.answer(&start.session_id, challenge.index, response)? {
                    AnswerOutcome::Challenge(next) => challenge = next,
                    AnswerOutcome::Verdict(v) => break v,
                }
            };
            total += 1;
            accepted += u64::from(verdict.accepted);
        }
        service.prune_closed_sessions()?;
    }
    Ok(CohortReport {
        cohort: config.responder.label(),
        challenge_count: config.policy.challenge_count,
        allowed_errors: config.policy.allowed_errors,
        accepted: Estimate::from_counts(accepted, total),
        expected_rate: config.responder.expected_accept_rate(&config.policy),
    })
}

/// Policy for an explicit `(challenges, errors)` pair.
pub fn policy_for(challenges: u32, errors: u32, tolerance: f64) -> Result<SecurityPolicy, SimError> {
    guess_probability(challenges, errors)?;
    Ok(SecurityPolicy::from_counts(challenges, errors, tolerance)?)
}
