//! `curator export`: standardize answered trajectories into trainset.jsonl
//! and print the supervision-mask totals.

use std::collections::HashMap;
use std::path::Path;

use anyhow::anyhow;
use curator_core::datastore::TrajectoryFilter;
use curator_core::trainset::{aggregate_loss_weights, standardize};
use curator_core::types::Termination;

use super::Globals;
use crate::logging;
use crate::CliError;

pub fn run(globals: &Globals, out: Option<&Path>) -> Result<(), CliError> {
    let config = globals.load_config()?;
    let store = globals.open_store_ro(&config)?;

    let instances: HashMap<String, curator_core::types::VQAInstance> = store
        .read_instances()
        .map_err(CliError::runtime)?
        .into_iter()
        .map(|i| (i.id.clone(), i))
        .collect();
    let loaded = store
        .load_all(&TrajectoryFilter::all())
        .map_err(CliError::runtime)?;
    for c in &loaded.corruptions {
        logging::warn(&format!(
            "skipping corrupt record at offset {}: {}",
            c.offset, c.reason
        ));
    }
    if loaded.trajectories.is_empty() {
        return Err(CliError::Runtime(anyhow!(
            "store has no trajectories to export"
        )));
    }

    let options = config.export.to_options();
    let mut examples = Vec::new();
    let mut skipped_unanswered = 0usize;
    let mut skipped_missing_instance = 0usize;
    for trajectory in &loaded.trajectories {
        if trajectory.termination != Termination::Answered {
            skipped_unanswered += 1;
            continue;
        }
        let Some(instance) = instances.get(&trajectory.instance_id) else {
            skipped_missing_instance += 1;
            logging::warn(&format!(
                "trajectory {} references unknown instance {}",
                trajectory.id, trajectory.instance_id
            ));
            continue;
        };
        let example = standardize(trajectory, instance, &config.episode.templates, &options)
            .map_err(CliError::runtime)?;
        examples.push(example);
    }

    let weights = aggregate_loss_weights(&examples).map_err(CliError::runtime)?;

    let out_path = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| config.paths.output.join("trainset.jsonl"));
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(CliError::runtime)?;
        }
    }
    let mut body = String::new();
    for example in &examples {
        body.push_str(&example.to_record().to_string());
        body.push('\n');
    }
    std::fs::write(&out_path, body).map_err(CliError::runtime)?;

    let total_positions: usize = examples.iter().map(|e| e.mask.len()).sum();
    println!(
        "{}",
        serde_json::json!({
            "examples": examples.len(),
            "skipped_unanswered": skipped_unanswered,
            "skipped_missing_instance": skipped_missing_instance,
            "supervised_tokens": weights.total_supervised,
            "total_positions": total_positions,
            "normalizer": weights.normalizer,
            "out": out_path,
        })
    );
    Ok(())
}
