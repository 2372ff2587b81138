//! `curator replay <episode-id>`: print an episode's event log and stored
//! trajectory record for debugging.

use anyhow::anyhow;
use curator_core::datastore::TrajectoryFilter;

use super::Globals;
use crate::CliError;

pub fn run(globals: &Globals, episode_id: &str) -> Result<(), CliError> {
    let config = globals.load_config()?;
    let store = globals.open_store_ro(&config)?;

    let events = store
        .read_event_log(episode_id)
        .map_err(|_| CliError::Runtime(anyhow!("no event log for episode '{episode_id}'")))?;
    for line in &events {
        println!("{line}");
    }

    let loaded = store
        .load_all(&TrajectoryFilter::all())
        .map_err(CliError::runtime)?;
    match loaded.trajectories.iter().find(|t| t.id == episode_id) {
        Some(t) => println!(
            "{}",
            serde_json::to_string(t).expect("trajectory serializes")
        ),
        None => crate::logging::warn("no persisted trajectory record for this episode"),
    }
    Ok(())
}
