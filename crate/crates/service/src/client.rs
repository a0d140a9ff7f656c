use std::path::Path;
use std::thread;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use serde::de::DeserializeOwned;

use percept_core::engine::{Answer, AnswerAck, CampaignStatus, PartitionSummary, SessionView};
use percept_core::export::{read_ratings_csv, RatingRow};
use percept_core::ids::{ExternalIds, SessionId, StudyTarget};
use percept_core::pool::IngestSummary;
use percept_core::protocol::PlateKey;
use percept_core::stats::LeaderboardEntry;
use percept_sim::{PlatformError, Step, StudyPlatform};

use crate::api::{AnswerResponse, ErrorBody, ItemDescriptor, PartitionRequest, IDEMPOTENCY_HEADER};

/// Retries for transport failures and 503s. Requests are replayed with the
/// same idempotency key, so a retry never records an answer twice.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 5,
            delay: Duration::from_millis(100),
        }
    }
}

/// A study platform reached over the HTTP API.
#[derive(Debug, Clone)]
pub struct HttpPlatform {
    base: String,
    admin_token: Option<String>,
    client: Client,
    retry: RetryPolicy,
}

fn transport(e: reqwest::Error) -> PlatformError {
    PlatformError::new("transport", e.to_string())
}

impl HttpPlatform {
    pub fn new(base_url: impl Into<String>, admin_token: Option<String>) -> Self {
        Self {
            base: base_url.into().trim_end_matches('/').to_string(),
            admin_token,
            client: Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("HTTP client without TLS builds"),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn url(&self, path: &str) -> String {
        format!("{}/api/v1{path}", self.base)
    }

    fn admin(&self, rb: RequestBuilder) -> RequestBuilder {
        match &self.admin_token {
            Some(t) => rb.bearer_auth(t),
            None => rb,
        }
    }

    /// Sends, retrying transport errors and 503s; other statuses are returned.
    fn send(&self, build: impl Fn() -> RequestBuilder) -> Result<Response, PlatformError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let last = attempt >= self.retry.attempts.max(1);
            match build().send() {
                Ok(r) if r.status() == StatusCode::SERVICE_UNAVAILABLE && !last => {}
                Ok(r) => return Ok(r),
                Err(e) if last => return Err(transport(e)),
                Err(_) => {}
            }
            thread::sleep(self.retry.delay * attempt);
        }
    }

    fn error_of(response: Response) -> PlatformError {
        let status = response.status();
        let bytes = response.bytes().unwrap_or_default();
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(body) => PlatformError::new(body.error_kind, body.detail),
            Err(_) => PlatformError::new("http", format!("{status}: {}", String::from_utf8_lossy(&bytes))),
        }
    }

    fn json<T: DeserializeOwned>(response: Response) -> Result<T, PlatformError> {
        if !response.status().is_success() {
            return Err(Self::error_of(response));
        }
        let bytes = response.bytes().map_err(transport)?;
        serde_json::from_slice(&bytes).map_err(|e| PlatformError::new("decode", e.to_string()))
    }

    fn bytes(response: Response) -> Result<Vec<u8>, PlatformError> {
        if !response.status().is_success() {
            return Err(Self::error_of(response));
        }
        Ok(response.bytes().map_err(transport)?.to_vec())
    }

    pub fn ingest_manifest(&self, manifest: Vec<u8>, root: Option<&Path>) -> Result<IngestSummary, PlatformError> {
        let url = self.url("/admin/manifest");
        let root = root.map(|r| r.to_string_lossy().into_owned());
        let response = self.send(|| {
            let mut rb = self.admin(self.client.post(&url)).body(manifest.clone());
            if let Some(r) = &root {
                rb = rb.query(&[("root", r)]);
            }
            rb
        })?;
        Self::json(response)
    }

    pub fn partition(&self, target: &StudyTarget, seed: u64) -> Result<PartitionSummary, PlatformError> {
        let url = self.url("/admin/partition");
        let req = PartitionRequest {
            target: target.clone(),
            seed,
        };
        let response = self.send(|| self.admin(self.client.post(&url)).json(&req))?;
        Self::json(response)
    }

    pub fn ratings_csv(&self) -> Result<Vec<u8>, PlatformError> {
        let url = self.url("/admin/export/ratings");
        Self::bytes(self.send(|| self.admin(self.client.get(&url)))?)
    }

    pub fn payouts_csv(&self) -> Result<Vec<u8>, PlatformError> {
        let url = self.url("/admin/export/payouts");
        Self::bytes(self.send(|| self.admin(self.client.get(&url)))?)
    }

    pub fn leaderboard(&self, model: Option<&str>) -> Result<Vec<LeaderboardEntry>, PlatformError> {
        let url = self.url("/leaderboard");
        let response = self.send(|| {
            let rb = self.client.get(&url);
            match model {
                Some(m) => rb.query(&[("model", m)]),
                None => rb,
            }
        })?;
        Self::json(response)
    }

    pub fn session_view(&self, session: &SessionId) -> Result<SessionView, PlatformError> {
        let url = self.url(&format!("/sessions/{session}"));
        Self::json(self.send(|| self.client.get(&url))?)
    }

    /// The answer with the server's full response, completion code included.
    pub fn answer_full(&self, session: &SessionId, answer: &Answer, key: &str) -> Result<AnswerResponse, PlatformError> {
        let url = self.url(&format!("/sessions/{session}/answers"));
        let response = self.send(|| self.client.post(&url).header(IDEMPOTENCY_HEADER, key).json(answer))?;
        Self::json(response)
    }
}

impl StudyPlatform for HttpPlatform {
    fn create_session(&self, ids: &ExternalIds) -> Result<SessionView, PlatformError> {
        let url = self.url("/sessions");
        let key = format!("entry/{}/{}", ids.participant_id, ids.submission_id);
        let response = self.send(|| {
            self.client
                .post(&url)
                .header(IDEMPOTENCY_HEADER, &key)
                .query(&[
                    ("pid", ids.participant_id.as_str()),
                    ("study", ids.study_id.as_str()),
                    ("submission", ids.submission_id.as_str()),
                ])
        })?;
        Self::json(response)
    }

    fn next_item(&self, session: &SessionId) -> Result<Step, PlatformError> {
        let url = self.url(&format!("/sessions/{session}/next"));
        let response = self.send(|| self.client.get(&url))?;
        if response.status() == StatusCode::GONE {
            let bytes = response.bytes().map_err(transport)?;
            let body: ErrorBody = serde_json::from_slice(&bytes).map_err(|e| PlatformError::new("decode", e.to_string()))?;
            return body
                .state
                .map(Step::Ended)
                .ok_or_else(|| PlatformError::new(body.error_kind, body.detail));
        }
        let item: ItemDescriptor = Self::json(response)?;
        Ok(Step::Item(item.item))
    }

    fn answer(&self, session: &SessionId, answer: &Answer, key: &str) -> Result<AnswerAck, PlatformError> {
        Ok(self.answer_full(session, answer, key)?.ack)
    }

    fn abandon(&self, session: &SessionId, key: &str) -> Result<(), PlatformError> {
        let url = self.url(&format!("/sessions/{session}/abandon"));
        let response = self.send(|| self.client.post(&url).header(IDEMPOTENCY_HEADER, key))?;
        Self::bytes(response).map(|_| ())
    }

    fn plate_key(&self, session: &SessionId, index: usize) -> Result<PlateKey, PlatformError> {
        let url = self.url(&format!("/admin/sessions/{session}/plates/{index}/key"));
        Self::json(self.send(|| self.admin(self.client.get(&url)))?)
    }

    fn plate_png(&self, session: &SessionId, index: usize) -> Result<Vec<u8>, PlatformError> {
        let url = self.url(&format!("/sessions/{session}/plates/{index}"));
        Self::bytes(self.send(|| self.client.get(&url))?)
    }

    fn campaign_status(&self) -> Result<CampaignStatus, PlatformError> {
        let url = self.url("/admin/campaign-status");
        Self::json(self.send(|| self.admin(self.client.get(&url)))?)
    }

    fn rating_rows(&self) -> Result<Vec<RatingRow>, PlatformError> {
        let csv = self.ratings_csv()?;
        read_ratings_csv(&csv[..]).map_err(|e| PlatformError::new("decode", e.to_string()))
    }
}
