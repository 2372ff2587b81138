//! `curator stats`: action-category distribution and trajectory shape
//! statistics over the store.

use std::path::Path;

use anyhow::anyhow;
use curator_core::datastore::TrajectoryFilter;
use curator_core::stats::{distribution, trajectory_stats, ActionTaxonomy};

use super::Globals;
use crate::logging;
use crate::CliError;

pub fn run(globals: &Globals, out: Option<&Path>) -> Result<(), CliError> {
    let config = globals.load_config()?;
    let store = globals.open_store_ro(&config)?;
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
        return Err(CliError::Runtime(anyhow!("store has no trajectories")));
    }

    let actions: Vec<String> = loaded
        .trajectories
        .iter()
        .flat_map(|t| t.steps.iter())
        .filter_map(|s| s.action.as_ref().map(|a| a.instruction.clone()))
        .collect();
    let taxonomy = ActionTaxonomy::default();
    let dist = distribution(&actions, &taxonomy).map_err(CliError::runtime)?;
    let shapes = trajectory_stats(&loaded.trajectories);

    let out_dir = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| config.paths.output.clone());
    std::fs::create_dir_all(&out_dir).map_err(CliError::runtime)?;
    let report = serde_json::json!({
        "distribution": dist,
        "trajectories": shapes,
    });
    std::fs::write(
        out_dir.join("stats.json"),
        serde_json::to_vec_pretty(&report).expect("report serializes"),
    )
    .map_err(CliError::runtime)?;
    std::fs::write(out_dir.join("distribution.csv"), dist.csv()).map_err(CliError::runtime)?;

    println!("{report}");
    Ok(())
}
