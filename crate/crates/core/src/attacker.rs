//! Passive observation attack.
//!
//! The observer sees challenges and responses in the clear, enumerates every
//! secret formula within some grammar limits, and keeps the ones consistent
//! with what it has seen. To impersonate, it answers a fresh session using a
//! surviving hypothesis picked at random.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::challenge::{ChallengeError, ChallengePlan};
use crate::derive_seed;
use crate::kb::KnowledgeBase;
use crate::secret::{enumerate_formulas, truth_table, GenerationLimits, SecretError, SecretFormula, TabledFormula, TruthTable};
use crate::stats::Estimate;
use crate::verifier::SecurityPolicy;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Secret(#[from] SecretError),
    #[error(transparent)]
    Plan(#[from] ChallengeError),
    #[error("no hypotheses to attack with")]
    EmptyHypothesisSet,
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("error rate {0} outside [0, 1]")]
    ErrorRate(f64),
    #[error("session of {challenges} challenges exceeds the {attributes} attributes of the knowledge base")]
    SessionTooLong { challenges: usize, attributes: usize },
}

/// What an observer records from one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Transcript {
    pub user_id: String,
    pub entries: Vec<(String, bool)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    pub candidates: Vec<TabledFormula>,
    pub limits: GenerationLimits,
}

impl HypothesisSet {
    /// Every semantically distinct formula within `limits`.
    pub fn enumerate(kb: &KnowledgeBase, limits: GenerationLimits, cap: u128) -> Result<Self, AttackError> {
        Ok(Self { candidates: enumerate_formulas(kb, &limits, cap)?, limits })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// Whether some candidate has the same truth table as `table`.
    pub fn contains_table(&self, table: &TruthTable) -> bool {
        self.candidates.iter().any(|c| &c.table == table)
    }
}

/// Keeps the hypotheses that disagree with each transcript in at most
/// `slack` entries.
pub fn filter_consistent(
    kb: &KnowledgeBase,
    hypotheses: &HypothesisSet,
    transcripts: &[Transcript],
    slack: usize,
) -> Result<HypothesisSet, AttackError> {
    let observed: Vec<Vec<(usize, bool)>> = transcripts
        .iter()
        .map(|t| {
            t.entries
                .iter()
                .map(|(a, r)| {
                    kb.attribute_index(a).map(|i| (i, *r)).map_err(|_| SecretError::UnknownAttribute(a.clone()))
                })
                .collect::<Result<_, _>>()
        })
        .collect::<Result<_, _>>()?;

    let candidates = hypotheses
        .candidates
        .iter()
        .filter(|h| {
            observed
                .iter()
                .all(|entries| entries.iter().filter(|(i, r)| h.table.contains(*i) != *r).count() <= slack)
        })
        .cloned()
        .collect();
    Ok(HypothesisSet { candidates, limits: hypotheses.limits })
}

/// Monte Carlo estimate of how often an attacker answering with a random
/// surviving hypothesis passes a fresh session against `true_secret`.
///
/// Each trial draws its own stream from `(seed, trial)`, so results do not
/// depend on evaluation order.
pub fn impersonation_success(
    kb: &KnowledgeBase,
    surviving: &HypothesisSet,
    true_secret: &SecretFormula,
    policy: &SecurityPolicy,
    trials: u64,
    seed: u64,
) -> Result<Estimate, AttackError> {
    if surviving.is_empty() {
        return Err(AttackError::EmptyHypothesisSet);
    }
    if trials == 0 {
        return Err(AttackError::NoTrials);
    }
    let n = policy.challenge_count as usize;
    if n > kb.attribute_count() {
        return Err(AttackError::SessionTooLong { challenges: n, attributes: kb.attribute_count() });
    }
    let truth = truth_table(kb, true_secret)?;
    let successes = (0..trials)
        .filter(|&trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, trial));
            let guess = &surviving.candidates[rng.gen_range(0..surviving.len())].table;
            let errors = index::sample(&mut rng, kb.attribute_count(), n)
                .into_iter()
                .filter(|&i| guess.contains(i) != truth.contains(i))
                .count();
            errors <= policy.allowed_errors as usize
        })
        .count() as u64;
    Ok(Estimate::from_counts(successes, trials))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveConfig {
    pub limits: GenerationLimits,
    pub enumeration_cap: u128,
    pub max_observations: usize,
    pub slack: usize,
    /// Per-challenge probability that the observed honest user answers wrong.
    pub user_error_rate: f64,
    pub trials: u64,
    pub seed: u64,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            limits: GenerationLimits::default(),
            enumeration_cap: crate::secret::DEFAULT_ENUMERATION_CAP,
            max_observations: 10,
            slack: 0,
            user_error_rate: 0.0,
            trials: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub observations: usize,
    pub surviving: usize,
    /// Whether a hypothesis equivalent to the true secret is still present.
    pub truth_survives: bool,
    pub estimate: Estimate,
}

/// Honest-session transcripts for `true_secret`, drawn from a challenge plan
/// exactly as the service would issue them.
pub fn honest_transcripts(
    kb: &KnowledgeBase,
    true_secret: &SecretFormula,
    policy: &SecurityPolicy,
    count: usize,
    user_error_rate: f64,
    seed: u64,
) -> Result<Vec<Transcript>, AttackError> {
    if !(0.0..=1.0).contains(&user_error_rate) {
        return Err(AttackError::ErrorRate(user_error_rate));
    }
    let mut plan = ChallengePlan::build(kb, true_secret, derive_seed(seed, 1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 2));
    (0..count)
        .map(|_| {
            let draw = plan.draw(kb, policy.challenge_count as usize)?;
            let entries = draw
                .challenges
                .into_iter()
                .zip(draw.expected)
                .map(|(c, e)| (c.attribute, e ^ rng.gen_bool(user_error_rate)))
                .collect();
            Ok(Transcript { user_id: "observed".into(), entries })
        })
        .collect()
}

/// Surviving hypothesis count and impersonation estimate after
/// 0, 1, ..., `max_observations` observed honest sessions.
pub fn observation_curve(
    kb: &KnowledgeBase,
    true_secret: &SecretFormula,
    policy: &SecurityPolicy,
    config: &CurveConfig,
) -> Result<Vec<CurveRow>, AttackError> {
    let space = HypothesisSet::enumerate(kb, config.limits, config.enumeration_cap)?;
    let truth = truth_table(kb, true_secret)?;
    let transcripts = honest_transcripts(
        kb,
        true_secret,
        policy,
        config.max_observations,
        config.user_error_rate,
        config.seed,
    )?;

    let mut surviving = space;
    let mut rows = Vec::with_capacity(config.max_observations + 1);
    for k in 0..=config.max_observations {
        if k > 0 {
            surviving = filter_consistent(kb, &surviving, &transcripts[k - 1..k], config.slack)?;
        }
        let trial_seed = derive_seed(config.seed, 1_000 + k as u64);
        let estimate = match impersonation_success(kb, &surviving, true_secret, policy, config.trials, trial_seed) {
            Ok(e) => e,
            Err(AttackError::EmptyHypothesisSet) => Estimate::from_counts(0, config.trials),
            Err(e) => return Err(e),
        };
        rows.push(CurveRow {
            observations: k,
            surviving: surviving.len(),
            truth_survives: surviving.contains_table(&truth),
            estimate,
        });
    }
    Ok(rows)
}

/// CSV with columns `observations,surviving,estimate,ci_low,ci_high`.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("observations,surviving,estimate,ci_low,ci_high\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.observations, r.surviving, r.estimate.estimate, r.estimate.ci_low, r.estimate.ci_high
        ));
    }
    out
}
