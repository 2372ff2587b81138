//! `curator filter {consensus|rejection|img2code}`: read instances, apply
//! the gate, write retained instances and the decision report.

use std::path::Path;
use std::sync::Arc;

use anyhow::anyhow;
use curator_core::config::{PipelineConfig, StoreBlobSource};
use curator_core::filtering::{
    consensus_filter, img2code_accept, rejection_sample, ConsensusConfig, FilterDecision,
    FilterEvidence,
};
use curator_core::gateway::{BlobSource, ChatBackend};
use curator_core::types::VQAInstance;

use super::Globals;
use crate::logging;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Consensus,
    Rejection,
    Img2code,
}

fn named_backends(
    config: &PipelineConfig,
    names: &[String],
    blobs: Option<Arc<dyn BlobSource>>,
    what: &str,
) -> Result<Vec<(String, Arc<dyn ChatBackend>)>, CliError> {
    if names.is_empty() {
        return Err(CliError::Config(anyhow!(
            "filter configuration lists no {what} backends"
        )));
    }
    names
        .iter()
        .map(|name| {
            config
                .build_backend(name, blobs.clone())
                .map(|b| (name.clone(), b))
                .map_err(CliError::config)
        })
        .collect()
}

pub fn run(
    globals: &Globals,
    kind: Kind,
    input: &Path,
    output: &Path,
    report: Option<&Path>,
) -> Result<(), CliError> {
    let config = globals.load_config()?;
    let instances = super::load_instances(input, globals.limit)?;
    if instances.is_empty() {
        logging::warn("empty input: writing empty output");
        super::write_jsonl(output, &Vec::<VQAInstance>::new())?;
        if let Some(report_path) = report {
            super::write_jsonl(report_path, &Vec::<FilterEvidence>::new())?;
        }
        println!("{}", serde_json::json!({"input": 0, "retained": 0}));
        return Ok(());
    }

    // Filters that show images to live backends need the blob store; it is
    // optional so scripted runs work against a fresh directory.
    let blobs: Option<Arc<dyn BlobSource>> = globals
        .open_store_ro(&config)
        .ok()
        .map(|store| Arc::new(StoreBlobSource(store)) as Arc<dyn BlobSource>);
    let judge = config.judge();

    let (retained, evidence): (Vec<VQAInstance>, Vec<FilterEvidence>) = match kind {
        Kind::Consensus => {
            let experts = named_backends(&config, &config.filter.experts, blobs, "expert")?;
            let consensus_cfg = ConsensusConfig {
                samples_per_expert: config.filter.samples_per_expert,
                params: config.filter.sample_params.clone(),
                early_exit: config.filter.early_exit,
                undecided: config.filter.undecided,
            };
            let mut retained = Vec::new();
            let mut evidence = Vec::new();
            for instance in &instances {
                let decision = consensus_filter(instance, &experts, &consensus_cfg, &judge)
                    .map_err(CliError::runtime)?;
                if decision.decision == FilterDecision::Keep {
                    retained.push(instance.clone());
                }
                evidence.push(decision);
            }
            (retained, evidence)
        }
        Kind::Rejection => {
            let base = config
                .build_backend(&config.filter.base_model, blobs)
                .map_err(CliError::config)?;
            let (retained, evidence) =
                rejection_sample(&instances, base.as_ref(), &judge, config.filter.undecided)
                    .map_err(CliError::runtime)?;
            (retained, evidence)
        }
        Kind::Img2code => {
            let solvers = named_backends(&config, &config.filter.solvers, blobs, "solver")?;
            let mut retained = Vec::new();
            let mut evidence = Vec::new();
            for instance in &instances {
                let rerendered = instance.image_hash.as_deref().ok_or_else(|| {
                    CliError::Config(anyhow!(
                        "instance {} has no image_hash; img2code needs the re-rendered image",
                        instance.id
                    ))
                })?;
                let decision = img2code_accept(
                    instance,
                    rerendered,
                    &solvers,
                    &config.filter.sample_params,
                    config.filter.early_exit,
                    config.filter.undecided,
                    &judge,
                )
                .map_err(CliError::runtime)?;
                if decision.decision == FilterDecision::Keep {
                    retained.push(instance.clone());
                }
                evidence.push(decision);
            }
            (retained, evidence)
        }
    };

    super::write_jsonl(output, &retained)?;
    let report_path = report
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| config.paths.output.join("filter-report.jsonl"));
    super::write_jsonl(&report_path, &evidence)?;

    let discards = evidence
        .iter()
        .filter(|e| e.decision == FilterDecision::Discard)
        .count();
    println!(
        "{}",
        serde_json::json!({
            "input": instances.len(),
            "retained": retained.len(),
            "discarded": discards,
            "undecided": evidence.len() - retained.len() - discards,
        })
    );
    Ok(())
}
