//! Deterministic replay backend: serves completions from a recorded
//! transcript, matched by turn index within a role tag.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    prompt_digest, validate_request, ChatBackend, ChatMessage, CompletionParams, GatewayError,
};

/// One transcript line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub turn: u64,
    pub role_tag: String,
    pub responses: Vec<String>,
    pub prompt_digest: String,
}

/// Replays transcript entries in order. Matching is by turn index, not by
/// prompt content, so fixtures stay stable when prompts embed volatile data;
/// strict mode additionally verifies the recorded prompt digest.
pub struct ScriptedBackend {
    role_tag: String,
    strict: bool,
    state: Mutex<State>,
}

struct State {
    entries: Vec<TranscriptEntry>,
    cursor: usize,
}

impl ScriptedBackend {
    pub fn new(role_tag: impl Into<String>, entries: Vec<TranscriptEntry>) -> Self {
        let role_tag = role_tag.into();
        let entries = entries
            .into_iter()
            .filter(|e| e.role_tag == role_tag)
            .collect();
        ScriptedBackend {
            role_tag,
            strict: false,
            state: Mutex::new(State { entries, cursor: 0 }),
        }
    }

    pub fn from_path(path: &Path, role_tag: impl Into<String>) -> Result<Self, GatewayError> {
        let content = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(line)
                .map_err(|e| GatewayError::TranscriptMismatch(format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(ScriptedBackend::new(role_tag, entries))
    }

    /// Also verify prompt digests against the transcript.
    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    /// Convenience for fixtures: one single-response entry per string.
    pub fn from_responses(
        role_tag: impl Into<String>,
        responses: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        let role_tag = role_tag.into();
        let entries = responses
            .into_iter()
            .enumerate()
            .map(|(i, r)| TranscriptEntry {
                turn: i as u64,
                role_tag: role_tag.clone(),
                responses: vec![r.into()],
                prompt_digest: String::new(),
            })
            .collect();
        ScriptedBackend::new(role_tag, entries)
    }

    pub fn remaining(&self) -> usize {
        let state = self.state.lock().expect("scripted state");
        state.entries.len() - state.cursor
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Vec<ChatMessage>, GatewayError> {
        validate_request(messages, params)?;
        let mut state = self.state.lock().expect("scripted state");
        let index = state.cursor;
        let entry = state.entries.get(index).ok_or_else(|| {
            GatewayError::TranscriptMismatch(format!(
                "transcript for role '{}' exhausted at turn {index}",
                self.role_tag
            ))
        })?;
        if self.strict && !entry.prompt_digest.is_empty() {
            let digest = prompt_digest(messages);
            if digest != entry.prompt_digest {
                return Err(GatewayError::TranscriptMismatch(format!(
                    "turn {index}: prompt digest {digest} does not match recorded {}",
                    entry.prompt_digest
                )));
            }
        }
        let wanted = params.n_samples as usize;
        if entry.responses.len() < wanted {
            return Err(GatewayError::TranscriptMismatch(format!(
                "turn {index} holds {} responses, caller asked for {wanted}",
                entry.responses.len()
            )));
        }
        let out = entry.responses[..wanted]
            .iter()
            .map(ChatMessage::assistant)
            .collect();
        state.cursor += 1;
        Ok(out)
    }
}
