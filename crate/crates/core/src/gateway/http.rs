//! OpenAI-compatible chat-completions client with bounded exponential
//! backoff. Image parts are inlined as base64 data URLs resolved from the
//! blob store.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    validate_request, ChatBackend, ChatMessage, CompletionParams, ContentPart, GatewayError, Role,
};

/// Counting semaphore bounding in-flight requests.
pub(crate) struct InFlightGate {
    limit: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

impl InFlightGate {
    pub(crate) fn new(limit: usize) -> Self {
        InFlightGate {
            limit,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> InFlightPermit<'_> {
        if self.limit > 0 {
            let mut count = self.in_flight.lock().expect("gate");
            while *count >= self.limit {
                count = self.freed.wait(count).expect("gate");
            }
            *count += 1;
        }
        InFlightPermit { gate: self }
    }
}

pub(crate) struct InFlightPermit<'a> {
    gate: &'a InFlightGate,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        if self.gate.limit > 0 {
            let mut count = self.gate.in_flight.lock().expect("gate");
            *count -= 1;
            self.gate.freed.notify_one();
        }
    }
}

/// Resolves image digests to bytes; the datastore implements this.
pub trait BlobSource: Send + Sync {
    fn blob(&self, digest: &str) -> Result<Vec<u8>, GatewayError>;
}

/// Bounded exponential backoff. Delays are monotone non-decreasing and the
/// attempt count is capped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            base_delay_ms: 200,
            max_delay_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.min(20);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Endpoint base, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the API key; unset means no auth header.
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    /// Largest image blob inlined into a request.
    pub max_image_bytes: usize,
    /// Concurrent in-flight requests allowed against the provider; zero
    /// means unlimited.
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key_env: None,
            timeout_ms: 120_000,
            retry: RetryPolicy::default(),
            max_image_bytes: 8 * 1024 * 1024,
            max_in_flight: 8,
        }
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
    blobs: Option<Arc<dyn BlobSource>>,
    gate: InFlightGate,
}

impl HttpBackend {
    pub fn new(config: HttpConfig, blobs: Option<Arc<dyn BlobSource>>) -> Self {
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build();
        let gate = InFlightGate::new(config.max_in_flight);
        HttpBackend {
            config,
            agent: ureq::Agent::new_with_config(agent_config),
            blobs,
            gate,
        }
    }

    fn render_content(&self, message: &ChatMessage) -> Result<Value, GatewayError> {
        // Plain string for text-only messages; the parts array otherwise.
        if let [ContentPart::Text { text }] = message.content.as_slice() {
            return Ok(Value::String(text.clone()));
        }
        let mut parts = Vec::new();
        for part in &message.content {
            match part {
                ContentPart::Text { text } => parts.push(json!({"type": "text", "text": text})),
                ContentPart::ImageRef { digest } => {
                    let source = self.blobs.as_ref().ok_or_else(|| {
                        GatewayError::Backend("no blob source configured for image parts".into())
                    })?;
                    let bytes = source.blob(digest)?;
                    if bytes.len() > self.config.max_image_bytes {
                        return Err(GatewayError::Backend(format!(
                            "image {digest} is {} bytes, over the {}-byte request cap",
                            bytes.len(),
                            self.config.max_image_bytes
                        )));
                    }
                    let mime = if bytes.starts_with(b"\x89PNG") {
                        "image/png"
                    } else {
                        "image/svg+xml"
                    };
                    let encoded = base64::engine::general_purpose::STANDARD.encode(&bytes);
                    parts.push(json!({
                        "type": "image_url",
                        "image_url": {"url": format!("data:{mime};base64,{encoded}")}
                    }));
                }
            }
        }
        Ok(Value::Array(parts))
    }

    fn build_request(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Value, GatewayError> {
        let rendered: Result<Vec<Value>, GatewayError> = messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                Ok(json!({"role": role, "content": self.render_content(m)?}))
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": rendered?,
            "n": params.n_samples,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        Ok(body)
    }

    fn attempt(&self, body: &Value) -> Result<Vec<ChatMessage>, AttemptError> {
        let url = format!(
            "{}/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let mut request = self
            .agent
            .post(&url)
            .header("content-type", "application/json");
        if let Some(env_name) = &self.config.api_key_env {
            if let Ok(key) = std::env::var(env_name) {
                request = request.header("authorization", format!("Bearer {key}"));
            }
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| AttemptError::Transient(format!("transport: {e}")))?;
        let status = response.status().as_u16();
        if status == 408 || status == 429 || status >= 500 {
            return Err(AttemptError::Transient(format!("http status {status}")));
        }
        if !(200..300).contains(&status) {
            let text = response.body_mut().read_to_string().unwrap_or_default();
            return Err(AttemptError::Fatal(format!("http status {status}: {text}")));
        }
        let parsed: CompletionResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| AttemptError::Fatal(format!("bad response body: {e}")))?;
        Ok(parsed
            .choices
            .into_iter()
            .map(|c| ChatMessage::assistant(c.message.content.unwrap_or_default()))
            .collect())
    }
}

enum AttemptError {
    Transient(String),
    Fatal(String),
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

impl ChatBackend for HttpBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Vec<ChatMessage>, GatewayError> {
        validate_request(messages, params)?;
        let body = self.build_request(messages, params)?;
        let _permit = self.gate.acquire();
        let mut last_error = String::new();
        for attempt in 0..self.config.retry.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.config.retry.delay(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(responses) => {
                    if responses.len() != params.n_samples as usize {
                        return Err(GatewayError::Backend(format!(
                            "backend returned {} completions, requested {}",
                            responses.len(),
                            params.n_samples
                        )));
                    }
                    return Ok(responses);
                }
                Err(AttemptError::Transient(e)) => last_error = e,
                Err(AttemptError::Fatal(e)) => return Err(GatewayError::Backend(e)),
            }
        }
        Err(GatewayError::Backend(format!(
            "retry budget exhausted after {} attempts: {last_error}",
            self.config.retry.max_attempts
        )))
    }
}
