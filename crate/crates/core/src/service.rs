//! The authentication service core: enrolment, session lifecycle and the
//! persistent user store.
//!
//! Expected answers and the verdict logic never leave this module except
//! through [`UserRecord`] and [`Session`] persistence. Wire-facing results
//! ([`Enrollment`], [`SessionStart`], [`AnswerOutcome`], [`SessionStatus`])
//! carry only challenge labels, indices and accept/reject.
//!
//! All mutable state sits behind one mutex and every mutation is persisted
//! before the lock is released, so plan cursor advances are linearizable and
//! the store never lags a response.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::challenge::{Challenge, ChallengeError, ChallengePlan};
use crate::kb::KnowledgeBase;
use crate::secret::{generate_secret, GenerationLimits, SecretError, SecretFormula, SecretRequest, DEFAULT_SEARCH_BUDGET};
use crate::verifier::{decide, SecurityPolicy, Verdict, VerifierError};

pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(10 * 60);
const STORE_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("user `{0}` is already enrolled")]
    DuplicateUser(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("answer index {got} out of order, expected {expected}")]
    OutOfOrder { expected: usize, got: usize },
    #[error("session `{0}` is closed")]
    SessionClosed(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Policy(#[from] VerifierError),
    #[error(transparent)]
    Secret(#[from] SecretError),
    #[error(transparent)]
    Plan(#[from] ChallengeError),
    #[error("storage error: {0}")]
    Storage(#[from] StoreError),
}

impl ServiceError {
    /// Stable machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            Self::DuplicateUser(_) => "DuplicateUser",
            Self::UnknownUser(_) => "UnknownUser",
            Self::UnknownSession(_) => "UnknownSession",
            Self::OutOfOrder { .. } => "OutOfOrder",
            Self::SessionClosed(_) => "SessionClosed",
            Self::Validation(_) | Self::Policy(_) => "ValidationError",
            Self::Secret(SecretError::NoBalancedSecret { .. }) => "NoBalancedSecret",
            Self::Secret(_) => "ValidationError",
            Self::Plan(ChallengeError::PlanTooSmall { .. }) => "PlanTooSmall",
            Self::Plan(_) => "ValidationError",
            Self::Storage(_) => "StorageError",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: serde_json::Error },
    #[error("{path}: unsupported store version {version}")]
    Version { path: PathBuf, version: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub secret: SecretFormula,
    pub plan: ChallengePlan,
    pub policy: SecurityPolicy,
    pub enrolled_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum SessionState {
    Created,
    InProgress,
    Completed { verdict: Verdict },
    Expired,
}

impl SessionState {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Created => "created",
            Self::InProgress => "in_progress",
            Self::Completed { .. } => "completed",
            Self::Expired => "expired",
        }
    }

    fn is_open(&self) -> bool {
        matches!(self, Self::Created | Self::InProgress)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub user_id: String,
    pub challenges: Vec<Challenge>,
    pub expected: Vec<bool>,
    pub answers: Vec<bool>,
    #[serde(flatten)]
    pub state: SessionState,
    pub created_at_ms: u64,
}

impl Session {
    pub fn total(&self) -> usize {
        self.challenges.len()
    }

    fn view(&self, index: usize) -> ChallengeView {
        ChallengeView { index, label: self.challenges[index].label.clone() }
    }
}

/// Everything the store persists.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreData {
    pub version: u32,
    pub users: BTreeMap<String, UserRecord>,
    pub sessions: BTreeMap<String, Session>,
}

pub trait Store: Send + Sync {
    fn load(&self) -> Result<Option<StoreData>, StoreError>;
    fn save(&self, data: &StoreData) -> Result<(), StoreError>;
}

/// Keeps nothing; used for in-process simulation.
#[derive(Debug, Default)]
pub struct MemoryStore;

impl Store for MemoryStore {
    fn load(&self) -> Result<Option<StoreData>, StoreError> {
        Ok(None)
    }

    fn save(&self, _: &StoreData) -> Result<(), StoreError> {
        Ok(())
    }
}

/// A single JSON file, replaced atomically on every write.
#[derive(Debug, Clone)]
pub struct FileStore {
    path: PathBuf,
}

impl FileStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn io(&self, source: std::io::Error) -> StoreError {
        StoreError::Io { path: self.path.clone(), source }
    }
}

impl Store for FileStore {
    fn load(&self) -> Result<Option<StoreData>, StoreError> {
        let bytes = match std::fs::read(&self.path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(self.io(e)),
        };
        let data: StoreData = serde_json::from_slice(&bytes)
            .map_err(|source| StoreError::Format { path: self.path.clone(), source })?;
        if data.version != STORE_VERSION {
            return Err(StoreError::Version { path: self.path.clone(), version: data.version });
        }
        Ok(Some(data))
    }

    fn save(&self, data: &StoreData) -> Result<(), StoreError> {
        use std::io::Write;
        let dir = match self.path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&dir).map_err(|e| self.io(e))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| self.io(e))?;
        serde_json::to_writer_pretty(&mut tmp, data)
            .map_err(|source| StoreError::Format { path: self.path.clone(), source })?;
        tmp.write_all(b"\n").map_err(|e| self.io(e))?;
        tmp.as_file().sync_all().map_err(|e| self.io(e))?;
        tmp.persist(&self.path).map_err(|e| self.io(e.error))?;
        Ok(())
    }
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
    }
}

/// A clock that only moves when told to.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, by: Duration) {
        self.0.fetch_add(by.as_millis() as u64, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<T: Clock + ?Sized> Clock for std::sync::Arc<T> {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub session_ttl: Duration,
    pub limits: GenerationLimits,
    pub search_budget: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { session_ttl: DEFAULT_SESSION_TTL, limits: GenerationLimits::default(), search_budget: DEFAULT_SEARCH_BUDGET }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrollRequest {
    pub user_id: String,
    pub threshold: f64,
    pub allowed_errors: u32,
    pub tolerance: f64,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// The one response that discloses the secret.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Enrollment {
    pub user_id: String,
    pub challenge_count: u32,
    pub secret_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChallengeView {
    pub index: usize,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictView {
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStart {
    pub session_id: String,
    pub total: usize,
    pub challenge: ChallengeView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerOutcome {
    Challenge(ChallengeView),
    Verdict(VerdictView),
}

/// What a client may learn about a session, for resuming after a reload.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    pub state: String,
    pub total: usize,
    pub answered: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub challenge: Option<ChallengeView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<VerdictView>,
}

/// Session outcome tallies; expired sessions count as abandoned.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SessionCounts {
    pub open: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub abandoned: usize,
}

pub struct AuthService {
    kb: KnowledgeBase,
    config: ServiceConfig,
    store: Box<dyn Store>,
    clock: Box<dyn Clock>,
    state: Mutex<StoreData>,
}

impl std::fmt::Debug for AuthService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthService").field("config", &self.config).finish_non_exhaustive()
    }
}

impl AuthService {
    /// Opens the service, restoring state from `store` if it holds any.
    pub fn open(
        kb: KnowledgeBase,
        config: ServiceConfig,
        store: Box<dyn Store>,
        clock: Box<dyn Clock>,
    ) -> Result<Self, ServiceError> {
        let data = store.load()?.unwrap_or(StoreData { version: STORE_VERSION, ..StoreData::default() });
        Ok(Self { kb, config, store, clock, state: Mutex::new(data) })
    }

    /// In-memory service with the system clock.
    pub fn in_memory(kb: KnowledgeBase, config: ServiceConfig) -> Self {
        Self::open(kb, config, Box::new(MemoryStore), Box::new(SystemClock)).expect("memory store cannot fail")
    }

    pub fn kb(&self) -> &KnowledgeBase {
        &self.kb
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    fn lock(&self) -> MutexGuard<'_, StoreData> {
        self.state.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    /// Persists `data`; on failure runs `undo` so memory matches the store.
    fn persist(&self, data: &mut StoreData, undo: impl FnOnce(&mut StoreData)) -> Result<(), ServiceError> {
        if let Err(e) = self.store.save(data) {
            undo(data);
            return Err(e.into());
        }
        Ok(())
    }

    pub fn enroll(&self, request: &EnrollRequest) -> Result<Enrollment, ServiceError> {
        if request.user_id.is_empty() {
            return Err(ServiceError::Validation("user_id must not be empty".into()));
        }
        if !(0.0..=0.5).contains(&request.tolerance) {
            return Err(ServiceError::Validation(format!("tolerance {} outside [0, 0.5]", request.tolerance)));
        }
        let policy = SecurityPolicy::derive(request.threshold, request.allowed_errors, request.tolerance)?;
        if self.lock().users.contains_key(&request.user_id) {
            return Err(ServiceError::DuplicateUser(request.user_id.clone()));
        }

        let seed = request.seed.unwrap_or_else(|| rand::thread_rng().gen());
        let secret_request = SecretRequest {
            limits: self.config.limits,
            tolerance: request.tolerance,
            min_each: policy.challenge_count as usize,
            search_budget: self.config.search_budget,
        };
        let secret = generate_secret(&self.kb, &secret_request, crate::derive_seed(seed, 0))?;
        let plan = ChallengePlan::build(&self.kb, &secret, crate::derive_seed(seed, 1))?;
        let record = UserRecord {
            user_id: request.user_id.clone(),
            secret: secret.clone(),
            plan,
            policy,
            enrolled_at_ms: self.clock.now_ms(),
        };

        let mut data = self.lock();
        if data.users.contains_key(&record.user_id) {
            return Err(ServiceError::DuplicateUser(record.user_id.clone()));
        }
        let user_id = record.user_id.clone();
        data.users.insert(user_id.clone(), record);
        self.persist(&mut data, |d| {
            d.users.remove(&user_id);
        })?;
        drop(data);
        Ok(Enrollment {
            user_id: request.user_id.clone(),
            challenge_count: policy.challenge_count,
            secret_text: secret.canonical(),
        })
    }

    pub fn start_session(&self, user_id: &str) -> Result<SessionStart, ServiceError> {
        let session_id = format!("{:032x}", rand::thread_rng().gen::<u128>());
        let now = self.clock.now_ms();
        let mut data = self.lock();
        let user = data.users.get_mut(user_id).ok_or_else(|| ServiceError::UnknownUser(user_id.to_owned()))?;
        let previous_plan = user.plan.clone();
        let draw = user.plan.draw(&self.kb, user.policy.challenge_count as usize)?;
        let session = Session {
            session_id: session_id.clone(),
            user_id: user_id.to_owned(),
            challenges: draw.challenges,
            expected: draw.expected,
            answers: Vec::new(),
            state: SessionState::InProgress,
            created_at_ms: now,
        };
        let start = SessionStart { session_id: session_id.clone(), total: session.total(), challenge: session.view(0) };
        data.sessions.insert(session_id.clone(), session);
        self.persist(&mut data, |d| {
            d.sessions.remove(&session_id);
            if let Some(u) = d.users.get_mut(user_id) {
                u.plan = previous_plan;
            }
        })?;
        Ok(start)
    }

    fn is_stale(&self, session: &Session, now: u64) -> bool {
        now.saturating_sub(session.created_at_ms) >= self.config.session_ttl.as_millis() as u64
    }

    pub fn answer(&self, session_id: &str, index: usize, response: bool) -> Result<AnswerOutcome, ServiceError> {
        let now = self.clock.now_ms();
        let mut data = self.lock();
        let policy = {
            let session =
                data.sessions.get(session_id).ok_or_else(|| ServiceError::UnknownSession(session_id.to_owned()))?;
            data.users.get(&session.user_id).map(|u| u.policy)
        };
        let session = data.sessions.get_mut(session_id).expect("checked above");
        if !session.state.is_open() {
            return Err(ServiceError::SessionClosed(session_id.to_owned()));
        }
        let backup = session.clone();
        if self.is_stale(session, now) {
            session.state = SessionState::Expired;
            self.persist(&mut data, |d| {
                d.sessions.insert(backup.session_id.clone(), backup);
            })?;
            return Err(ServiceError::SessionClosed(session_id.to_owned()));
        }
        if index != session.answers.len() {
            return Err(ServiceError::OutOfOrder { expected: session.answers.len(), got: index });
        }
        let outcome = if session.answers.len() + 1 < session.total() {
            session.answers.push(response);
            AnswerOutcome::Challenge(session.view(session.answers.len()))
        } else {
            let policy = policy.ok_or_else(|| ServiceError::UnknownUser(session.user_id.clone()))?;
            let mut answers = session.answers.clone();
            answers.push(response);
            let verdict = decide(&policy, &session.expected, &answers)?;
            session.answers = answers;
            session.state = SessionState::Completed { verdict };
            AnswerOutcome::Verdict(VerdictView { accepted: verdict.accepted })
        };
        self.persist(&mut data, |d| {
            d.sessions.insert(backup.session_id.clone(), backup);
        })?;
        Ok(outcome)
    }

    pub fn session_status(&self, session_id: &str) -> Result<SessionStatus, ServiceError> {
        let now = self.clock.now_ms();
        let guard = self.lock();
        let session =
            guard.sessions.get(session_id).ok_or_else(|| ServiceError::UnknownSession(session_id.to_owned()))?;
        let mut state = session.state.clone();
        if state.is_open() && self.is_stale(session, now) {
            state = SessionState::Expired;
        }
        let answered = session.answers.len();
        Ok(SessionStatus {
            session_id: session.session_id.clone(),
            state: state.name().to_owned(),
            total: session.total(),
            answered,
            challenge: (state.is_open() && answered < session.total()).then(|| session.view(answered)),
            verdict: match state {
                SessionState::Completed { verdict } => Some(VerdictView { accepted: verdict.accepted }),
                _ => None,
            },
        })
    }

    /// Expires every open session older than the TTL at `now_ms`.
    pub fn expire_sessions(&self, now_ms: u64) -> Result<usize, ServiceError> {
        let mut data = self.lock();
        let mut expired = Vec::new();
        for session in data.sessions.values_mut() {
            if session.state.is_open() && self.is_stale(session, now_ms) {
                expired.push((session.session_id.clone(), session.state.clone()));
                session.state = SessionState::Expired;
            }
        }
        if expired.is_empty() {
            return Ok(0);
        }
        let count = expired.len();
        self.persist(&mut data, |d| {
            for (id, state) in expired {
                if let Some(s) = d.sessions.get_mut(&id) {
                    s.state = state;
                }
            }
        })?;
        Ok(count)
    }

    pub fn expire_now(&self) -> Result<usize, ServiceError> {
        self.expire_sessions(self.clock.now_ms())
    }

    pub fn session_counts(&self) -> SessionCounts {
        let guard = self.lock();
        guard.sessions.values().fold(SessionCounts::default(), |mut c, s| {
            match &s.state {
                SessionState::Created | SessionState::InProgress => c.open += 1,
                SessionState::Completed { verdict } if verdict.accepted => c.accepted += 1,
                SessionState::Completed { .. } => c.rejected += 1,
                SessionState::Expired => c.abandoned += 1,
            }
            c
        })
    }

    /// Drops completed and expired sessions from memory and the store.
    pub fn prune_closed_sessions(&self) -> Result<usize, ServiceError> {
        let mut data = self.lock();
        let closed: Vec<Session> = data.sessions.values().filter(|s| !s.state.is_open()).cloned().collect();
        data.sessions.retain(|_, s| s.state.is_open());
        let count = closed.len();
        self.persist(&mut data, |d| {
            d.sessions.extend(closed.into_iter().map(|s| (s.session_id.clone(), s)));
        })?;
        Ok(count)
    }

    /// Writes the current state to the store.
    pub fn flush(&self) -> Result<(), ServiceError> {
        let guard = self.lock();
        self.store.save(&guard)?;
        Ok(())
    }

    /// A copy of the persisted state, for inspection and tests.
    pub fn snapshot(&self) -> StoreData {
        self.lock().clone()
    }

    pub fn user(&self, user_id: &str) -> Option<UserRecord> {
        self.lock().users.get(user_id).cloned()
    }

    pub fn session(&self, session_id: &str) -> Option<Session> {
        self.lock().sessions.get(session_id).cloned()
    }
}
