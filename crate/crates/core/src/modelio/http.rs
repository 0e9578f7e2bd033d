use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::backend::{BackendError, Capabilities, GenerationBackend, GenerationRequest, Score};
use super::packing::PackedInput;
use super::spec::Strategy;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub endpoint: String,
    /// Separate endpoint for likelihood scoring; scoring is unsupported
    /// when absent.
    pub score_endpoint: Option<String>,
    /// Environment variable holding a bearer token.
    pub auth_env: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_cap_ms: u64,
    pub fusion_in_decoder: bool,
    pub single_flight: bool,
    pub max_context_tokens: Option<usize>,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/generate".into(),
            score_endpoint: None,
            auth_env: Some("SEEKER_BACKEND_TOKEN".into()),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: 200,
            backoff_cap_ms: 5_000,
            fusion_in_decoder: false,
            single_flight: false,
            max_context_tokens: None,
        }
    }
}

#[derive(Serialize)]
struct WireSpec {
    strategy: Strategy,
    beam_size: usize,
    min_length: usize,
    block_n: usize,
}

#[derive(Serialize)]
struct GenerateBody<'a> {
    request_id: &'a str,
    #[serde(flatten)]
    input: &'a PackedInput,
    spec: WireSpec,
    banned_ngrams: Vec<&'a Vec<String>>,
}

#[derive(Serialize)]
struct ScoreBody<'a> {
    request_id: &'a str,
    #[serde(flatten)]
    input: &'a PackedInput,
    continuation: &'a str,
}

#[derive(Debug, Default, Deserialize)]
struct WireResponse {
    text: Option<String>,
    candidates: Option<Vec<String>>,
    error: Option<String>,
    nll: Option<f64>,
    token_count: Option<usize>,
}

/// JSON-over-HTTP generation backend with capped exponential backoff on
/// transport failures, 429 and 5xx responses.
pub struct HttpBackend {
    config: HttpBackendConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// Reads the bearer token from `config.auth_env` if set.
    pub fn new(config: HttpBackendConfig) -> Self {
        let token = config
            .auth_env
            .as_deref()
            .and_then(|var| std::env::var(var).ok())
            .filter(|t| !t.is_empty());
        Self::with_token(config, token)
    }

    pub fn with_token(config: HttpBackendConfig, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            token,
            agent,
        }
    }

    pub fn config(&self) -> &HttpBackendConfig {
        &self.config
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.config.backoff_cap_ms);
        Duration::from_millis(ms)
    }

    fn post<B: Serialize>(&self, url: &str, body: &B, request_id: &str) -> Result<WireResponse, BackendError> {
        let mut attempt = 0;
        loop {
            match self.post_once(url, body, request_id) {
                Err(e) if attempt < self.config.max_retries && retryable(&e) => {
                    warn!(%request_id, attempt, error = %e, "retrying backend request");
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn post_once<B: Serialize>(&self, url: &str, body: &B, request_id: &str) -> Result<WireResponse, BackendError> {
        let transport = |e: ureq::Error| BackendError::Transport {
            request_id: request_id.to_string(),
            message: e.to_string(),
        };
        let mut request = self.agent.post(url).header("x-request-id", request_id);
        if let Some(token) = &self.token {
            request = request.header("authorization", &format!("Bearer {token}"));
        }
        let mut response = request.send_json(body).map_err(transport)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(transport)?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Status {
                request_id: request_id.to_string(),
                status,
                body: text,
            });
        }
        let parsed: WireResponse = serde_json::from_str(&text).map_err(|e| BackendError::Protocol {
            request_id: request_id.to_string(),
            message: e.to_string(),
        })?;
        if let Some(message) = parsed.error {
            return Err(BackendError::Remote {
                request_id: request_id.to_string(),
                message,
            });
        }
        Ok(parsed)
    }
}

fn retryable(e: &BackendError) -> bool {
    match e {
        BackendError::Transport { .. } => true,
        BackendError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl GenerationBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.endpoint
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            fusion_in_decoder: self.config.fusion_in_decoder,
            single_flight: self.config.single_flight,
            scoring: self.config.score_endpoint.is_some(),
            max_context_tokens: self.config.max_context_tokens,
        }
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        let request_id = uuid::Uuid::new_v4().to_string();
        let body = GenerateBody {
            request_id: &request_id,
            input: &request.input,
            spec: WireSpec {
                strategy: request.spec.strategy,
                beam_size: request.spec.beam_size,
                min_length: request.spec.min_length,
                block_n: request.spec.block_n,
            },
            banned_ngrams: request.banned.iter().collect(),
        };
        let response = self.post(&self.config.endpoint, &body, &request_id)?;
        match (response.candidates, response.text) {
            (Some(c), _) if !c.is_empty() => Ok(c),
            (_, Some(t)) => Ok(vec![t]),
            _ => Err(BackendError::Protocol {
                request_id,
                message: "response has neither `text` nor `candidates`".into(),
            }),
        }
    }

    fn score(&self, input: &PackedInput, continuation: &str) -> Result<Score, BackendError> {
        let url = self
            .config
            .score_endpoint
            .as_deref()
            .ok_or(BackendError::Unsupported("scoring"))?;
        let request_id = uuid::Uuid::new_v4().to_string();
        let body = ScoreBody {
            request_id: &request_id,
            input,
            continuation,
        };
        let response = self.post(url, &body, &request_id)?;
        match (response.nll, response.token_count) {
            (Some(nll), Some(token_count)) => Ok(Score { nll, token_count }),
            _ => Err(BackendError::Protocol {
                request_id,
                message: "response lacks `nll`/`token_count`".into(),
            }),
        }
    }
}
