//! `curator curate`: run episodes over an instance file and persist the
//! trajectories, event logs, and manifest.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::anyhow;
use curator_core::agentic::run_episode;
use curator_core::config::StoreBlobSource;
use curator_core::datastore::Store;
use curator_core::gateway::BlobSource;
use curator_core::types::{Termination, VQAInstance};

use super::Globals;
use crate::logging;
use crate::CliError;

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

fn install_sigint_handler() {
    unsafe {
        let handler: extern "C" fn(libc::c_int) = on_sigint;
        libc::signal(libc::SIGINT, handler as usize as libc::sighandler_t);
    }
}

#[derive(Debug, Default, serde::Serialize)]
struct RunSummary {
    total: usize,
    answered: usize,
    max_steps: usize,
    render_failure_backoff: usize,
    backend_error: usize,
    interrupted: bool,
}

pub fn run(globals: &Globals, instances_path: &Path) -> Result<(), CliError> {
    let config = globals.load_config()?;
    let instances = super::load_instances(instances_path, globals.limit)?;

    // Fail fast on unresolvable renderer profiles, before any backend call.
    for instance in &instances {
        if !config
            .renderer
            .profiles
            .contains_key(&instance.code.renderer_profile)
        {
            return Err(CliError::Config(anyhow!(
                "instance {} references missing renderer profile '{}'",
                instance.id,
                instance.code.renderer_profile
            )));
        }
    }

    if globals.dry_run {
        if let Some(first) = instances.first() {
            let outcome = curator_core::renderer::render(&first.code, &config.renderer)
                .map_err(CliError::config)?;
            let validation = curator_core::renderer::validate(&outcome, &config.renderer);
            logging::log(
                "info",
                "dry run: rendered first instance",
                serde_json::json!({
                    "instance": first.id,
                    "status": format!("{:?}", outcome.status),
                    "valid": validation.pass,
                }),
            );
        } else {
            logging::warn("dry run: no instances to render");
        }
        println!(
            "{}",
            serde_json::json!({"dry_run": true, "instances": instances.len()})
        );
        return Ok(());
    }

    let store = globals.open_store_rw(&config)?;
    for instance in &instances {
        store.put_instance(instance).map_err(CliError::runtime)?;
    }

    let blobs: Arc<dyn BlobSource> = Arc::new(StoreBlobSource(store.clone()));
    let solver = config
        .build_backend(&config.episode.solver_backend, Some(blobs.clone()))
        .map_err(CliError::config)?;
    let editor = config
        .build_backend(&config.episode.editor_backend, Some(blobs))
        .map_err(CliError::config)?;
    let episode_cfg = config.episode.to_episode_config();
    episode_cfg.validate().map_err(CliError::config)?;

    install_sigint_handler();
    let width = config.parallelism();
    let queue: Arc<Mutex<VecDeque<VQAInstance>>> =
        Arc::new(Mutex::new(instances.into_iter().collect()));
    let summary = Arc::new(Mutex::new(RunSummary::default()));
    let policy = Arc::new(config.renderer.clone());
    let episode_cfg = Arc::new(episode_cfg);
    let failure: Arc<Mutex<Option<String>>> = Arc::new(Mutex::new(None));

    std::thread::scope(|scope| {
        for _ in 0..width {
            let queue = queue.clone();
            let summary = summary.clone();
            let store: Arc<Store> = store.clone();
            let solver = solver.clone();
            let editor = editor.clone();
            let policy = policy.clone();
            let episode_cfg = episode_cfg.clone();
            let failure = failure.clone();
            scope.spawn(move || loop {
                if INTERRUPTED.load(Ordering::SeqCst) {
                    return;
                }
                let instance = match queue.lock().expect("queue").pop_front() {
                    Some(i) => i,
                    None => return,
                };
                let trajectory_id = format!("ep-{}", instance.id);
                match run_episode(
                    &instance,
                    solver.as_ref(),
                    editor.as_ref(),
                    &episode_cfg,
                    &policy,
                    &store,
                    &trajectory_id,
                ) {
                    Ok(outcome) => {
                        let termination = outcome.trajectory.termination;
                        if let Err(e) = store.append_trajectory(&outcome.trajectory) {
                            *failure.lock().expect("failure slot") = Some(e.to_string());
                            return;
                        }
                        let _ = store.write_event_log(&trajectory_id, &outcome.event_lines());
                        logging::log(
                            "info",
                            "episode finished",
                            serde_json::json!({
                                "instance": instance.id,
                                "trajectory": trajectory_id,
                                "termination": termination.as_str(),
                                "steps": outcome.trajectory.steps.len(),
                            }),
                        );
                        let mut s = summary.lock().expect("summary");
                        s.total += 1;
                        match termination {
                            Termination::Answered => s.answered += 1,
                            Termination::MaxSteps => s.max_steps += 1,
                            Termination::RenderFailureBackoff => s.render_failure_backoff += 1,
                            Termination::BackendError => s.backend_error += 1,
                        }
                    }
                    Err(e) => {
                        *failure.lock().expect("failure slot") = Some(e.to_string());
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = failure.lock().expect("failure slot").take() {
        return Err(CliError::Runtime(anyhow!(e)));
    }
    let mut summary = Arc::try_unwrap(summary)
        .map_err(|_| CliError::Runtime(anyhow!("summary still shared")))?
        .into_inner()
        .expect("summary");
    summary.interrupted = INTERRUPTED.load(Ordering::SeqCst);
    if summary.interrupted {
        logging::warn("interrupted: drained in-flight episodes and stopped");
    }
    println!(
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    );
    Ok(())
}
