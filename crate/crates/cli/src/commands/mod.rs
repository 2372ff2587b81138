//! Command implementations and the helpers they share.

pub mod curate;
pub mod export;
pub mod filter;
pub mod kernel;
pub mod replay;
pub mod stats;

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use curator_core::config::PipelineConfig;
use curator_core::datastore::{Store, StoreOptions};
use curator_core::types::VQAInstance;

use crate::CliError;

#[derive(Debug, Clone)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub parallelism: Option<usize>,
    pub limit: Option<usize>,
    pub dry_run: bool,
}

impl Globals {
    pub fn load_config(&self) -> Result<PipelineConfig, CliError> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config(anyhow!("--config is required for this command")))?;
        let mut config = PipelineConfig::load(path).map_err(CliError::config)?;
        if let Some(store) = &self.store {
            config.paths.store = store.clone();
        }
        if let Some(p) = self.parallelism {
            config.parallelism = Some(p);
        }
        config.renderer.validate().map_err(CliError::config)?;
        Ok(config)
    }

    pub fn store_options(&self, config: &PipelineConfig) -> StoreOptions {
        StoreOptions {
            corrupt_policy: config.corrupt_policy,
        }
    }

    pub fn open_store_rw(&self, config: &PipelineConfig) -> Result<Arc<Store>, CliError> {
        Store::open(&config.paths.store, self.store_options(config))
            .map(Arc::new)
            .map_err(CliError::runtime)
    }

    pub fn open_store_ro(&self, config: &PipelineConfig) -> Result<Arc<Store>, CliError> {
        Store::open_read_only(&config.paths.store, self.store_options(config))
            .map(Arc::new)
            .map_err(CliError::runtime)
    }
}

/// Reads a JSONL file of VQA instances, honoring the global --limit.
pub fn load_instances(path: &Path, limit: Option<usize>) -> Result<Vec<VQAInstance>, CliError> {
    let file = fs::File::open(path)
        .with_context(|| format!("cannot open instances file {}", path.display()))
        .map_err(CliError::config)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        if let Some(limit) = limit {
            if out.len() >= limit {
                break;
            }
        }
        let line = line.map_err(CliError::runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let instance: VQAInstance = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))
            .map_err(CliError::config)?;
        instance.validate().map_err(CliError::config)?;
        out.push(instance);
    }
    Ok(out)
}

/// Writes serializable records as JSONL, one per line.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(CliError::runtime)?;
        }
    }
    let mut body = String::new();
    for r in records {
        body.push_str(&serde_json::to_string(r).expect("record serializes"));
        body.push('\n');
    }
    fs::write(path, body).map_err(CliError::runtime)
}
