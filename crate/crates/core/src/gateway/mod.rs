//! Uniform chat-completion interface for the solver and code-editor roles.
//!
//! Three interchangeable backends: an OpenAI-compatible HTTP client with
//! retry, a scripted replayer for offline tests, and a recorder that wraps
//! any backend and writes a replayable transcript.

mod http;
mod recording;
mod scripted;

pub use http::{BlobSource, HttpBackend, HttpConfig, RetryPolicy};
pub use recording::RecordingBackend;
pub use scripted::{ScriptedBackend, TranscriptEntry};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend error: {0}")]
    Backend(String),
    #[error("transcript mismatch: {0}")]
    TranscriptMismatch(String),
    #[error("invalid message: {0}")]
    InvalidMessage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// One message part: text, or a reference to a stored image blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageRef { digest: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn system(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn user_with_image(text: impl Into<String>, digest: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: vec![
                ContentPart::Text { text: text.into() },
                ContentPart::ImageRef {
                    digest: digest.into(),
                },
            ],
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    /// Concatenated text parts.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for part in &self.content {
            if let ContentPart::Text { text } = part {
                out.push_str(text);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.content.is_empty() {
            return Err(GatewayError::InvalidMessage("empty content".into()));
        }
        Ok(())
    }
}

/// Sampling parameters for one completion call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub n_samples: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for CompletionParams {
    fn default() -> Self {
        CompletionParams {
            temperature: 0.0,
            max_tokens: 2048,
            n_samples: 1,
            seed: None,
        }
    }
}

impl CompletionParams {
    pub fn sampling(temperature: f64, n_samples: u32) -> Self {
        CompletionParams {
            temperature,
            n_samples,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.temperature < 0.0 {
            return Err(GatewayError::InvalidMessage(
                "temperature must be >= 0".into(),
            ));
        }
        if self.max_tokens == 0 || self.n_samples == 0 {
            return Err(GatewayError::InvalidMessage(
                "max_tokens and n_samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A chat backend. Implementations are safe for concurrent calls and never
/// mutate caller-provided messages.
pub trait ChatBackend: Send + Sync {
    /// Returns exactly `params.n_samples` assistant messages.
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Vec<ChatMessage>, GatewayError>;
}

/// Digest of a message list, used by transcripts for strict replay checks.
pub fn prompt_digest(messages: &[ChatMessage]) -> String {
    let canonical = serde_json::to_vec(messages).expect("messages serialize");
    hex::encode(Sha256::digest(&canonical))
}

fn validate_request(
    messages: &[ChatMessage],
    params: &CompletionParams,
) -> Result<(), GatewayError> {
    if messages.is_empty() {
        return Err(GatewayError::InvalidMessage("no messages".into()));
    }
    for m in messages {
        m.validate()?;
    }
    params.validate()
}
