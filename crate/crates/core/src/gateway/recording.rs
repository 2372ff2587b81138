//! Recording wrapper: forwards to an inner backend and appends every
//! (request, responses) pair to a transcript replayable by the scripted
//! backend.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use super::scripted::TranscriptEntry;
use super::{prompt_digest, ChatBackend, ChatMessage, CompletionParams, GatewayError};

pub struct RecordingBackend<B> {
    inner: B,
    role_tag: String,
    sink: Mutex<Sink>,
}

struct Sink {
    file: File,
    turn: u64,
}

impl<B: ChatBackend> RecordingBackend<B> {
    /// Creates (truncating) the transcript at `path`. Zero recorded calls
    /// leave an empty but valid transcript.
    pub fn create(
        inner: B,
        role_tag: impl Into<String>,
        path: &Path,
    ) -> Result<Self, GatewayError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)?;
        Ok(RecordingBackend {
            inner,
            role_tag: role_tag.into(),
            sink: Mutex::new(Sink { file, turn: 0 }),
        })
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Vec<ChatMessage>, GatewayError> {
        let responses = self.inner.complete(messages, params)?;
        let mut sink = self.sink.lock().expect("recording sink");
        let entry = TranscriptEntry {
            turn: sink.turn,
            role_tag: self.role_tag.clone(),
            responses: responses.iter().map(|m| m.text()).collect(),
            prompt_digest: prompt_digest(messages),
        };
        let line = serde_json::to_string(&entry).expect("transcript entry serializes");
        sink.file.write_all(line.as_bytes())?;
        sink.file.write_all(b"\n")?;
        sink.file.flush()?;
        sink.turn += 1;
        Ok(responses)
    }
}
