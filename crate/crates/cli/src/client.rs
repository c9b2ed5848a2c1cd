//! Blocking JSON client for the service's HTTP API.

use anyhow::{anyhow, Context};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use zeta_core::service::{AnswerOutcome, EnrollRequest, Enrollment, SessionStart};

pub struct Client {
    agent: ureq::Agent,
    base: String,
}

impl Client {
    pub fn new(base: impl Into<String>) -> Self {
        Self { agent: ureq::Agent::new(), base: base.into().trim_end_matches('/').to_owned() }
    }

    fn post<T: DeserializeOwned>(&self, path: &str, body: Value) -> anyhow::Result<T> {
        let url = format!("{}{path}", self.base);
        match self.agent.post(&url).send_json(body) {
            Ok(resp) => resp.into_json().with_context(|| format!("decoding response from {url}")),
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                Err(anyhow!("{url} returned {code}: {body}"))
            }
            Err(e) => Err(anyhow!(e).context(format!("POST {url}"))),
        }
    }

    pub fn enroll(&self, request: &EnrollRequest) -> anyhow::Result<Enrollment> {
        self.post("/api/v1/enroll", serde_json::to_value(request)?)
    }

    pub fn start_session(&self, user_id: &str) -> anyhow::Result<SessionStart> {
        self.post("/api/v1/sessions", json!({ "user_id": user_id }))
    }

    pub fn answer(&self, session_id: &str, index: usize, response: bool) -> anyhow::Result<AnswerOutcome> {
        self.post(&format!("/api/v1/sessions/{session_id}/answers"), json!({ "index": index, "response": response }))
    }
}
