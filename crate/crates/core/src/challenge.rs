//! Per-user challenge plans.
//!
//! At enrolment every attribute of the knowledge base is paired with the
//! answer the secret gives for it, and the list is shuffled. Sessions consume
//! the plan front to back. When a draw runs past the end the whole list is
//! reshuffled under a seed derived from the plan seed and the recycle count,
//! and a [`RecycleEvent`] is recorded.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::kb::KnowledgeBase;
use crate::secret::{truth_table, SecretError, SecretFormula};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ChallengeError {
    #[error(transparent)]
    Secret(#[from] SecretError),
    #[error("a session of {requested} challenges needs at least that many attributes, plan has {available}")]
    PlanTooSmall { requested: usize, available: usize },
    #[error("a session needs at least one challenge")]
    EmptyDraw,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub attribute: String,
    pub expected: bool,
}

/// Audit record of a plan being reshuffled and reused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecycleEvent {
    /// Recycle count after this event (1 for the first reshuffle).
    pub generation: u32,
    pub seed: u64,
    /// Entries of the old order consumed by the draw that triggered it.
    pub carried_over: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengePlan {
    entries: Vec<PlanEntry>,
    cursor: usize,
    rng_seed: u64,
    generation: u32,
    recycles: Vec<RecycleEvent>,
}

/// One challenge as presented to the user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Challenge {
    pub index: usize,
    pub attribute: String,
    pub label: String,
}

/// The challenges for one session together with the server-side answers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionDraw {
    pub challenges: Vec<Challenge>,
    pub expected: Vec<bool>,
    pub recycle: Option<RecycleEvent>,
}

impl ChallengePlan {
    /// Pairs every attribute with its expected answer and shuffles by `seed`.
    pub fn build(kb: &KnowledgeBase, secret: &SecretFormula, seed: u64) -> Result<Self, ChallengeError> {
        let table = truth_table(kb, secret)?;
        let mut entries: Vec<PlanEntry> = kb
            .attributes()
            .iter()
            .enumerate()
            .map(|(i, a)| PlanEntry { attribute: a.id.clone(), expected: table.contains(i) })
            .collect();
        entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { entries, cursor: 0, rng_seed: seed, generation: 0, recycles: Vec::new() })
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn recycles(&self) -> &[RecycleEvent] {
        &self.recycles
    }

    /// Takes the next `n` entries; no attribute repeats within the draw.
    pub fn draw(&mut self, kb: &KnowledgeBase, n: usize) -> Result<SessionDraw, ChallengeError> {
        if n == 0 {
            return Err(ChallengeError::EmptyDraw);
        }
        if n > self.entries.len() {
            return Err(ChallengeError::PlanTooSmall { requested: n, available: self.entries.len() });
        }
        let head = n.min(self.entries.len() - self.cursor);
        let mut picked: Vec<PlanEntry> = self.entries[self.cursor..self.cursor + head].to_vec();
        self.cursor += head;

        let mut recycle = None;
        if picked.len() < n {
            recycle = Some(self.recycle(&picked));
            let rest = n - picked.len();
            picked.extend_from_slice(&self.entries[..rest]);
            self.cursor = rest;
        }

        let challenges = picked
            .iter()
            .enumerate()
            .map(|(index, e)| {
                let label = kb
                    .attribute_index(&e.attribute)
                    .map(|i| kb.attribute(i).label.clone())
                    .unwrap_or_else(|_| e.attribute.clone());
                Challenge { index, attribute: e.attribute.clone(), label }
            })
            .collect();
        let expected = picked.iter().map(|e| e.expected).collect();
        Ok(SessionDraw { challenges, expected, recycle })
    }

    /// Reshuffles all entries and moves the ones already drawn in the current
    /// session to the back so the session cannot repeat them.
    fn recycle(&mut self, in_session: &[PlanEntry]) -> RecycleEvent {
        self.generation += 1;
        let seed = crate::derive_seed(self.rng_seed, u64::from(self.generation));
        self.entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (fresh, used): (Vec<PlanEntry>, Vec<PlanEntry>) =
            self.entries.drain(..).partition(|e| !in_session.iter().any(|p| p.attribute == e.attribute));
        self.entries = fresh;
        self.entries.extend(used);
        self.cursor = 0;
        let event = RecycleEvent { generation: self.generation, seed, carried_over: in_session.len() };
        self.recycles.push(event.clone());
        event
    }
}
