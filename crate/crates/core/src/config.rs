//! Pipeline configuration: one TOML (or JSON) file; environment variables
//! only for secrets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{CorruptPolicy, Store};
use crate::filtering::UndecidedPolicy;
use crate::gateway::{
    BlobSource, ChatBackend, CompletionParams, GatewayError, HttpBackend, HttpConfig,
    RecordingBackend, RetryPolicy, ScriptedBackend,
};
use crate::renderer::SandboxPolicy;
use crate::templates::TemplateSet;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("backend '{0}' is not defined")]
    UnknownBackend(String),
    #[error("backend '{0}': {1}")]
    Backend(String, String),
    #[error("recording backend '{0}' wraps itself")]
    RecursiveRecording(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Replays a recorded transcript; offline and deterministic.
    Scripted {
        transcript: PathBuf,
        role_tag: String,
        #[serde(default)]
        strict: bool,
    },
    /// OpenAI-compatible chat-completions endpoint.
    Http {
        base_url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
        #[serde(default = "default_http_timeout_ms")]
        timeout_ms: u64,
        #[serde(default = "default_max_attempts")]
        max_attempts: u32,
        #[serde(default = "default_base_delay_ms")]
        base_delay_ms: u64,
        #[serde(default = "default_max_delay_ms")]
        max_delay_ms: u64,
        #[serde(default = "default_max_in_flight")]
        max_in_flight: usize,
    },
    /// Wraps another backend and records a replayable transcript.
    Recording {
        inner: String,
        sink: PathBuf,
        role_tag: String,
    },
}

fn default_http_timeout_ms() -> u64 {
    120_000
}
fn default_max_attempts() -> u32 {
    4
}
fn default_base_delay_ms() -> u64 {
    200
}
fn default_max_delay_ms() -> u64 {
    5_000
}
fn default_max_in_flight() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub store: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            store: PathBuf::from("store"),
            output: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSection {
    pub solver_backend: String,
    pub editor_backend: String,
    pub t_max: u32,
    pub r_max: u32,
    pub revisions_cap: u32,
    pub challenge_enabled: bool,
    pub max_reprompts: u32,
    pub solver_params: CompletionParams,
    pub editor_params: CompletionParams,
    pub templates: TemplateSet,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection {
            solver_backend: "solver".into(),
            editor_backend: "editor".into(),
            t_max: 6,
            r_max: 3,
            revisions_cap: 2,
            challenge_enabled: false,
            max_reprompts: 2,
            solver_params: CompletionParams::default(),
            editor_params: CompletionParams::default(),
            templates: TemplateSet::default(),
        }
    }
}

impl EpisodeSection {
    pub fn to_episode_config(&self) -> crate::agentic::EpisodeConfig {
        crate::agentic::EpisodeConfig {
            t_max: self.t_max,
            r_max: self.r_max,
            revisions_cap: self.revisions_cap,
            challenge_enabled: self.challenge_enabled,
            max_reprompts: self.max_reprompts,
            templates: self.templates.clone(),
            solver_params: self.solver_params.clone(),
            editor_params: self.editor_params.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterSection {
    /// Expert backends for the consensus filter.
    pub experts: Vec<String>,
    pub samples_per_expert: u32,
    /// Solver backends for img2code acceptance.
    pub solvers: Vec<String>,
    /// Base model for rejection sampling.
    pub base_model: String,
    pub judge_method: crate::filtering::JudgeMethod,
    pub tolerance: f64,
    pub ignored_units: Vec<String>,
    pub early_exit: bool,
    pub undecided: UndecidedPolicy,
    pub sample_params: CompletionParams,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            experts: Vec::new(),
            samples_per_expert: 2,
            solvers: Vec::new(),
            base_model: "base".into(),
            judge_method: crate::filtering::JudgeMethod::ExactNormalized,
            tolerance: 1e-6,
            ignored_units: Vec::new(),
            early_exit: true,
            undecided: UndecidedPolicy::TreatAsDiscard,
            sample_params: CompletionParams::sampling(0.7, 1),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportSection {
    pub token_counter: crate::trainset::TokenCounter,
    pub image_tokens: usize,
    pub phase: crate::trainset::Phase,
}

impl Default for ExportSection {
    fn default() -> Self {
        ExportSection {
            token_counter: crate::trainset::TokenCounter::Words,
            image_tokens: 64,
            phase: crate::trainset::Phase::Phase1,
        }
    }
}

impl ExportSection {
    pub fn to_options(&self) -> crate::trainset::StandardizeOptions {
        crate::trainset::StandardizeOptions {
            counter: self.token_counter,
            image_tokens: self.image_tokens,
            phase: self.phase,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub parallelism: Option<usize>,
    pub corrupt_policy: CorruptPolicy,
    pub backends: BTreeMap<String, BackendSpec>,
    pub renderer: SandboxPolicy,
    pub episode: EpisodeSection,
    pub filter: FilterSection,
    pub export: ExportSection,
}

impl PipelineConfig {
    /// Loads TOML (default) or JSON (by `.json` extension).
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let config: PipelineConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&raw).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
        } else {
            toml::from_str(&raw).map_err(|e| ConfigError::Parse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?
        };
        Ok(config)
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism.unwrap_or(1).max(1)
    }

    /// Instantiates a backend by name. `blobs` feeds image parts to HTTP
    /// backends; scripted backends ignore it.
    pub fn build_backend(
        &self,
        name: &str,
        blobs: Option<Arc<dyn BlobSource>>,
    ) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        self.build_backend_inner(name, blobs, 0)
    }

    fn build_backend_inner(
        &self,
        name: &str,
        blobs: Option<Arc<dyn BlobSource>>,
        depth: usize,
    ) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        if depth > 4 {
            return Err(ConfigError::RecursiveRecording(name.to_string()));
        }
        let spec = self
            .backends
            .get(name)
            .ok_or_else(|| ConfigError::UnknownBackend(name.to_string()))?;
        match spec {
            BackendSpec::Scripted {
                transcript,
                role_tag,
                strict,
            } => {
                let backend = ScriptedBackend::from_path(transcript, role_tag.clone())
                    .map_err(|e| ConfigError::Backend(name.to_string(), e.to_string()))?;
                Ok(if *strict {
                    Arc::new(backend.strict())
                } else {
                    Arc::new(backend)
                })
            }
            BackendSpec::Http {
                base_url,
                model,
                api_key_env,
                timeout_ms,
                max_attempts,
                base_delay_ms,
                max_delay_ms,
                max_in_flight,
            } => Ok(Arc::new(HttpBackend::new(
                HttpConfig {
                    base_url: base_url.clone(),
                    model: model.clone(),
                    api_key_env: api_key_env.clone(),
                    timeout_ms: *timeout_ms,
                    retry: RetryPolicy {
                        max_attempts: *max_attempts,
                        base_delay_ms: *base_delay_ms,
                        max_delay_ms: *max_delay_ms,
                    },
                    max_image_bytes: 8 * 1024 * 1024,
                    max_in_flight: *max_in_flight,
                },
                blobs,
            ))),
            BackendSpec::Recording {
                inner,
                sink,
                role_tag,
            } => {
                if inner == name {
                    return Err(ConfigError::RecursiveRecording(name.to_string()));
                }
                let wrapped = self.build_backend_inner(inner, blobs, depth + 1)?;
                let recorder = RecordingBackend::create(wrapped, role_tag.clone(), sink)
                    .map_err(|e| ConfigError::Backend(name.to_string(), e.to_string()))?;
                Ok(Arc::new(recorder))
            }
        }
    }

    pub fn judge(&self) -> crate::filtering::Judge {
        crate::filtering::Judge {
            method: self.filter.judge_method,
            tolerance: self.filter.tolerance,
            ignored_units: self.filter.ignored_units.clone(),
            backend: None,
        }
    }
}

/// Adapter so stores can feed image bytes to HTTP backends.
pub struct StoreBlobSource(pub Arc<Store>);

impl BlobSource for StoreBlobSource {
    fn blob(&self, digest: &str) -> Result<Vec<u8>, GatewayError> {
        self.0
            .get_blob(digest)
            .map_err(|e| GatewayError::Backend(e.to_string()))
    }
}
