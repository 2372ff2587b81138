//! Agentic curation pipeline for code-rendered visual question answering.
//!
//! A solver model reasons over images rendered from code; when it needs a
//! clearer view it asks a code-editor model to rewrite the rendering
//! program, the sandboxed renderer produces the new image, and the full
//! interleaved trajectory is persisted in a content-addressed store. On top
//! of that sit the dataset quality gates (consensus validation, re-render
//! acceptance, rejection sampling, pass@k), trainset standardization with
//! supervision masks, and dataset statistics.

pub mod agentic;
pub mod config;
pub mod datastore;
pub mod filtering;
pub mod gateway;
pub mod renderer;
pub mod stats;
pub mod templates;
pub mod trainset;
pub mod types;

use std::sync::Arc;

use gateway::{BlobSource, ChatBackend, ChatMessage, CompletionParams, GatewayError};

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Vec<ChatMessage>, GatewayError> {
        (**self).complete(messages, params)
    }
}

impl BlobSource for datastore::Store {
    fn blob(&self, digest: &str) -> Result<Vec<u8>, GatewayError> {
        self.get_blob(digest)
            .map_err(|e| GatewayError::Backend(e.to_string()))
    }
}
