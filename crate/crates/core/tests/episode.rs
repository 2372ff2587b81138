//! End-to-end episode runs with scripted backends and the real subprocess
//! renderer.

use std::sync::atomic::{AtomicU32, Ordering};

use curator_core::agentic::{run_episode, EpisodeConfig, EpisodeEvent};
use curator_core::datastore::{Store, StoreOptions};
use curator_core::gateway::{
    ChatBackend, ChatMessage, CompletionParams, GatewayError, ScriptedBackend,
};
use curator_core::renderer::{RendererProfile, SandboxPolicy};
use curator_core::types::{InstanceSource, RenderSpec, Termination, VQAInstance};

fn shell_policy() -> SandboxPolicy {
    let mut policy = SandboxPolicy::default();
    policy.profiles.insert(
        "shell".into(),
        RendererProfile {
            command: "sh {code} {output}".into(),
            timeout_ms: 5000,
            preamble: None,
        },
    );
    policy
}

fn png_script(marker: &str) -> String {
    format!(r#"printf '\211PNG\r\n\032\n{marker}' > "$1""#)
}

fn instance(marker: &str) -> VQAInstance {
    VQAInstance {
        id: "inst-1".into(),
        code: RenderSpec {
            language_tag: "sh".into(),
            source_text: png_script(marker),
            renderer_profile: "shell".into(),
        },
        image_hash: None,
        question: "what is the slope of the line".into(),
        answer: "2".into(),
        source: InstanceSource::SyntheticCorpus,
        discipline: Some("geometry".into()),
    }
}

/// Counts calls around any backend.
struct Counting<B> {
    inner: B,
    calls: AtomicU32,
}

impl<B> Counting<B> {
    fn new(inner: B) -> Self {
        Counting {
            inner,
            calls: AtomicU32::new(0),
        }
    }

    fn count(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: ChatBackend> ChatBackend for Counting<B> {
    fn complete(
        &self,
        messages: &[ChatMessage],
        params: &CompletionParams,
    ) -> Result<Vec<ChatMessage>, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(messages, params)
    }
}

#[test]
fn immediate_answer_yields_single_step() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let solver = Counting::new(ScriptedBackend::from_responses(
        "solver",
        ["The slope reads directly.\nFINAL ANSWER: 2"],
    ));
    let editor = Counting::new(ScriptedBackend::from_responses(
        "editor",
        Vec::<String>::new(),
    ));
    let cfg = EpisodeConfig::default();

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-1",
    )
    .unwrap();

    let t = &outcome.trajectory;
    assert_eq!(t.termination, Termination::Answered);
    assert_eq!(t.final_answer.as_deref(), Some("2"));
    assert_eq!(t.steps.len(), 1);
    assert!(t.steps[0].action.is_none());
    assert_eq!(solver.count(), 1);
    assert_eq!(editor.count(), 0);
    assert!(curator_core::agentic::images_present(t, &store));
    t.validate().unwrap();
}

#[test]
fn one_edit_then_answer_produces_two_steps_with_distinct_images() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let solver = ScriptedBackend::from_responses(
        "solver",
        [
            "I need a construction line.\n<tool_call>draw a tangent line</tool_call>",
            "Now the tangent is visible.\nFINAL ANSWER: 2",
        ],
    );
    let editor = Counting::new(ScriptedBackend::from_responses(
        "editor",
        [png_script("edited-1")],
    ));
    let cfg = EpisodeConfig::default();

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-2",
    )
    .unwrap();

    let t = &outcome.trajectory;
    t.validate().unwrap();
    assert_eq!(t.termination, Termination::Answered);
    assert_eq!(t.steps.len(), 2);
    assert_eq!(
        t.steps[0].action.as_ref().unwrap().instruction,
        "draw a tangent line"
    );
    assert_ne!(t.steps[0].image_hash, t.steps[1].image_hash);
    assert_eq!(editor.count(), 1);
    assert!(curator_core::agentic::images_present(t, &store));
}

#[test]
fn repair_exhaustion_backs_off_and_episode_continues() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let solver = ScriptedBackend::from_responses(
        "solver",
        [
            "Trying an edit.\n<tool_call>circle the apex</tool_call>",
            "Proceeding without the edit.\nFINAL ANSWER: 2",
        ],
    );
    // The editor always returns a failing program: initial edit + r_max repairs.
    let editor = Counting::new(ScriptedBackend::from_responses(
        "editor",
        ["exit 1", "exit 1", "exit 1"],
    ));
    let cfg = EpisodeConfig {
        r_max: 2,
        ..Default::default()
    };

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-3",
    )
    .unwrap();

    let t = &outcome.trajectory;
    t.validate().unwrap();
    assert_eq!(t.termination, Termination::Answered);
    assert_eq!(t.steps.len(), 2);
    assert!(t.steps[0].edit_failed);
    // Same image on both steps because the edit never landed.
    assert_eq!(t.steps[0].image_hash, t.steps[1].image_hash);
    assert_eq!(editor.count(), 3); // 1 edit + 2 repairs
    assert!(outcome.events.iter().any(|e| matches!(
        e,
        EpisodeEvent::EditBackoff {
            editor_calls: 3,
            ..
        }
    )));
}

#[test]
fn repair_recovers_when_editor_fixes_code() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let solver = ScriptedBackend::from_responses(
        "solver",
        [
            "Edit please.\n<tool_call>highlight point A in red</tool_call>",
            "Good.\nFINAL ANSWER: 2",
        ],
    );
    // First editor reply broken, repair succeeds.
    let editor = Counting::new(ScriptedBackend::from_responses(
        "editor",
        ["if then fi (", &png_script("fixed")],
    ));
    let cfg = EpisodeConfig {
        r_max: 3,
        ..Default::default()
    };

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-4",
    )
    .unwrap();

    let t = &outcome.trajectory;
    assert_eq!(t.termination, Termination::Answered);
    assert!(!t.steps[0].edit_failed);
    assert_eq!(editor.count(), 2);
}

#[test]
fn endless_edits_hit_max_steps_after_forced_answer() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let edit_reply = |i: u32| format!("Still unsure.\n<tool_call>add grid line {i}</tool_call>");
    let solver = Counting::new(ScriptedBackend::from_responses(
        "solver",
        [
            edit_reply(0),
            edit_reply(1),
            edit_reply(2),
            // Forced-answer prompt still answered with an edit request.
            edit_reply(3),
        ],
    ));
    let editor = Counting::new(ScriptedBackend::from_responses(
        "editor",
        [png_script("e0"), png_script("e1"), png_script("e2")],
    ));
    let cfg = EpisodeConfig {
        t_max: 3,
        ..Default::default()
    };

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-5",
    )
    .unwrap();

    let t = &outcome.trajectory;
    t.validate().unwrap();
    assert_eq!(t.termination, Termination::MaxSteps);
    assert!(t.final_answer.is_none());
    // Exactly 3 executed edit attempts; the forced-turn request is recorded
    // but never executed.
    assert_eq!(editor.count(), 3);
    assert_eq!(solver.count(), 4); // t_max turns + forced answer
    assert_eq!(t.steps.len(), 4);
    assert!(outcome.events.contains(&EpisodeEvent::ForcedAnswer));
}

#[test]
fn forced_answer_can_still_resolve_the_episode() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let solver = ScriptedBackend::from_responses(
        "solver",
        [
            "Editing.\n<tool_call>draw the asymptote</tool_call>".to_string(),
            "Answering under forcing.\nFINAL ANSWER: 2".to_string(),
        ],
    );
    let editor = ScriptedBackend::from_responses("editor", [png_script("e0")]);
    let cfg = EpisodeConfig {
        t_max: 1,
        ..Default::default()
    };

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-6",
    )
    .unwrap();

    let t = &outcome.trajectory;
    t.validate().unwrap();
    assert_eq!(t.termination, Termination::Answered);
    assert_eq!(t.final_answer.as_deref(), Some("2"));
    assert_eq!(t.steps.len(), 2);
}

#[test]
fn challenge_revision_loops_within_step_budget() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let solver = Counting::new(ScriptedBackend::from_responses(
        "solver",
        [
            "Need labels.\n<tool_call>label the vertices</tool_call>",
            // Challenge 1: revise.
            "Not enough.\n<tool_call>also label the intersection point</tool_call>",
            // Challenge 2: accept.
            "Looks right now.",
            "Done.\nFINAL ANSWER: 2",
        ],
    ));
    let editor = Counting::new(ScriptedBackend::from_responses(
        "editor",
        [png_script("v1"), png_script("v2")],
    ));
    let cfg = EpisodeConfig {
        challenge_enabled: true,
        ..Default::default()
    };

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-7",
    )
    .unwrap();

    let t = &outcome.trajectory;
    t.validate().unwrap();
    assert_eq!(t.termination, Termination::Answered);
    assert_eq!(t.steps.len(), 2);
    assert_eq!(editor.count(), 2); // original edit + one revision
    assert_eq!(solver.count(), 4); // turn, 2 challenge replies, answer
                                   // The step records the original instruction; the revision lives in events.
    assert_eq!(
        t.steps[0].action.as_ref().unwrap().instruction,
        "label the vertices"
    );
    assert!(outcome.events.iter().any(|e| matches!(
        e,
        EpisodeEvent::Challenge {
            revision: Some(r),
            ..
        } if r == "also label the intersection point"
    )));
}

#[test]
fn third_revision_is_force_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let revise = |s: &str| format!("More.\n<tool_call>{s}</tool_call>");
    let solver = ScriptedBackend::from_responses(
        "solver",
        [
            revise("add labels"),
            revise("revision one"),
            revise("revision two"),
            revise("revision three"), // force-accepted, not executed
            "Fine.\nFINAL ANSWER: 2".to_string(),
        ],
    );
    let editor = Counting::new(ScriptedBackend::from_responses(
        "editor",
        [png_script("v1"), png_script("v2"), png_script("v3")],
    ));
    let cfg = EpisodeConfig {
        challenge_enabled: true,
        revisions_cap: 2,
        ..Default::default()
    };

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-8",
    )
    .unwrap();

    assert_eq!(outcome.trajectory.termination, Termination::Answered);
    // 1 edit + revisions_cap executed revisions; the third is refused.
    assert_eq!(editor.count(), 3);
    assert!(outcome.events.iter().any(|e| matches!(
        e,
        EpisodeEvent::Challenge {
            outcome: curator_core::agentic::ChallengeDecision::ForcedAccept,
            ..
        }
    )));
}

#[test]
fn malformed_output_reprompts_then_recovers() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let solver = Counting::new(ScriptedBackend::from_responses(
        "solver",
        [
            "no answer and no tool call here",
            "Recovered.\nFINAL ANSWER: 2",
        ],
    ));
    let editor = ScriptedBackend::from_responses("editor", Vec::<String>::new());
    let cfg = EpisodeConfig::default();

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-9",
    )
    .unwrap();

    assert_eq!(outcome.trajectory.termination, Termination::Answered);
    assert_eq!(solver.count(), 2);
    assert!(outcome
        .events
        .iter()
        .any(|e| matches!(e, EpisodeEvent::MalformedReply { .. })));
}

#[test]
fn persistent_malformed_output_terminates_as_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let bad = "FINAL ANSWER: 7\n<tool_call>also edit</tool_call>"; // exclusivity violation
    let solver = Counting::new(ScriptedBackend::from_responses("solver", [bad, bad, bad]));
    let editor = ScriptedBackend::from_responses("editor", Vec::<String>::new());
    let cfg = EpisodeConfig {
        max_reprompts: 2,
        ..Default::default()
    };

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-10",
    )
    .unwrap();

    let t = &outcome.trajectory;
    t.validate().unwrap();
    assert_eq!(t.termination, Termination::BackendError);
    assert!(t.final_answer.is_none());
    assert_eq!(solver.count(), 3); // initial + 2 re-prompts
}

#[test]
fn exhausted_solver_transcript_is_a_backend_error_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let solver = ScriptedBackend::from_responses("solver", Vec::<String>::new());
    let editor = ScriptedBackend::from_responses("editor", Vec::<String>::new());
    let cfg = EpisodeConfig::default();

    let outcome = run_episode(
        &instance("base"),
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-11",
    )
    .unwrap();

    assert_eq!(outcome.trajectory.termination, Termination::BackendError);
    outcome.trajectory.validate().unwrap();
}

#[test]
fn initial_render_failure_is_recorded_not_thrown() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    let mut inst = instance("base");
    inst.code.source_text = "exit 9".into();
    let solver = Counting::new(ScriptedBackend::from_responses("solver", ["x"]));
    let editor = ScriptedBackend::from_responses("editor", Vec::<String>::new());
    let cfg = EpisodeConfig::default();

    let outcome = run_episode(
        &inst,
        &solver,
        &editor,
        &cfg,
        &shell_policy(),
        &store,
        "ep-12",
    )
    .unwrap();

    assert_eq!(
        outcome.trajectory.termination,
        Termination::RenderFailureBackoff
    );
    assert!(outcome.trajectory.steps.is_empty());
    assert_eq!(solver.count(), 0);
    outcome.trajectory.validate().unwrap();
}

#[test]
fn pass_at_k_collaborative_mode_runs_full_episodes() {
    use curator_core::filtering::{pass_at_k, AgenticAnswerSource, Judge};

    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
    // Sample 1 solves via an edit; sample 2 answers immediately but wrong.
    let solver = ScriptedBackend::from_responses(
        "solver",
        [
            "Need help.\n<tool_call>draw a tangent line</tool_call>",
            "Clear.\nFINAL ANSWER: 2",
            "Guessing.\nFINAL ANSWER: 5",
        ],
    );
    let editor = ScriptedBackend::from_responses("editor", [png_script("edit")]);
    let source = AgenticAnswerSource {
        solver: &solver,
        editor: &editor,
        episode: EpisodeConfig::default(),
        policy: &shell_policy(),
        store: &store,
    };
    let questions = vec![instance("base")];
    let report = pass_at_k(&questions, &source, 2, &Judge::exact()).unwrap();
    assert_eq!(report.per_question[0].verdicts, vec![true, false]);
    assert_eq!(report.aggregate, 1.0);
}

#[test]
fn event_log_replays_identically_for_identical_scripts() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path(), StoreOptions::default()).unwrap();
        let solver = ScriptedBackend::from_responses(
            "solver",
            [
                "Edit.\n<tool_call>draw a tangent line</tool_call>",
                "Good.\nFINAL ANSWER: 2",
            ],
        );
        let editor = ScriptedBackend::from_responses("editor", [png_script("e1")]);
        let cfg = EpisodeConfig::default();
        run_episode(
            &instance("base"),
            &solver,
            &editor,
            &cfg,
            &shell_policy(),
            &store,
            "ep-13",
        )
        .unwrap()
        .event_lines()
    };
    assert_eq!(run(), run());
}
