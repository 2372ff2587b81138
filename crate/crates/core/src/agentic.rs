//! The episode state machine: a solver model reasons over a code-rendered
//! image and either answers or requests a visual edit; a code-editor model
//! rewrites the rendering program; the renderer produces the next image.
//! One run yields a [`Trajectory`] plus a deterministic event log.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datastore::{Store, StoreError};
use crate::gateway::{ChatBackend, ChatMessage, CompletionParams, ContentPart, GatewayError, Role};
use crate::renderer::{self, RenderError, RepairOutcome, SandboxPolicy};
use crate::templates::{fill, TemplateSet};
use crate::types::{
    EditRequest, RenderSpec, Termination, Trajectory, TrajectoryStep, VQAInstance, ValidationError,
};

pub const TOOL_OPEN: &str = "<tool_call>";
pub const TOOL_CLOSE: &str = "</tool_call>";
pub const ANSWER_MARKER: &str = "FINAL ANSWER:";

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Config(#[from] ValidationError),
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    /// Maximum solver turns that may issue edits; one forced-answer turn
    /// follows when the budget is spent.
    pub t_max: u32,
    /// Render repairs per step.
    pub r_max: u32,
    /// Challenge revisions per step.
    pub revisions_cap: u32,
    /// Ask the solver to inspect each rendered edit before continuing.
    pub challenge_enabled: bool,
    /// Corrective re-prompts for unparseable solver output.
    pub max_reprompts: u32,
    pub templates: TemplateSet,
    pub solver_params: CompletionParams,
    pub editor_params: CompletionParams,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            t_max: 6,
            r_max: 3,
            revisions_cap: 2,
            challenge_enabled: false,
            max_reprompts: 2,
            templates: TemplateSet::default(),
            solver_params: CompletionParams::default(),
            editor_params: CompletionParams::default(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.t_max == 0 {
            return Err(ValidationError::new("t_max must be at least 1"));
        }
        self.templates.validate()
    }
}

/// One parsed solver reply: chain-of-thought plus exactly one of a final
/// answer or an edit request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolverTurn {
    pub reasoning: String,
    pub answer: Option<String>,
    pub action: Option<EditRequest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MalformedOutput {
    #[error("both a final answer and a tool call are present")]
    BothPresent,
    #[error("neither a final answer nor a tool call is present")]
    NeitherPresent,
    #[error("unclosed tool-call delimiter")]
    UnclosedDelimiter,
    #[error("more than one tool call")]
    MultipleToolCalls,
    #[error("tool call carries an empty instruction")]
    EmptyInstruction,
    #[error("final answer line is empty")]
    EmptyAnswer,
    #[error("edit request without any reasoning")]
    EmptyReasoning,
}

/// Extracts the reasoning and exactly one of {answer, edit request} from raw
/// solver text. The answer marker must start its own line; tool calls use
/// `<tool_call>...</tool_call>`.
pub fn parse_solver_output(text: &str) -> Result<SolverTurn, MalformedOutput> {
    let opens = text.matches(TOOL_OPEN).count();
    let closes = text.matches(TOOL_CLOSE).count();
    if opens != closes {
        return Err(MalformedOutput::UnclosedDelimiter);
    }
    if opens > 1 {
        return Err(MalformedOutput::MultipleToolCalls);
    }

    let mut answer: Option<(usize, String)> = None;
    let mut scanned = 0usize;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix(ANSWER_MARKER) {
            answer = Some((scanned, rest.trim().to_string()));
            break;
        }
        scanned += line.len();
    }

    match (answer, opens) {
        (Some(_), 1..) => Err(MalformedOutput::BothPresent),
        (None, 0) => Err(MalformedOutput::NeitherPresent),
        (Some((offset, value)), 0) => {
            if value.is_empty() {
                return Err(MalformedOutput::EmptyAnswer);
            }
            Ok(SolverTurn {
                reasoning: text[..offset].trim().to_string(),
                answer: Some(value),
                action: None,
            })
        }
        (None, _) => {
            let open_at = text.find(TOOL_OPEN).expect("counted above");
            let span_start = open_at + TOOL_OPEN.len();
            let close_at = text[span_start..]
                .find(TOOL_CLOSE)
                .map(|i| span_start + i)
                .ok_or(MalformedOutput::UnclosedDelimiter)?;
            let raw_span = &text[span_start..close_at];
            let request =
                EditRequest::new(raw_span).map_err(|_| MalformedOutput::EmptyInstruction)?;
            let reasoning = text[..open_at].trim().to_string();
            if reasoning.is_empty() {
                return Err(MalformedOutput::EmptyReasoning);
            }
            Ok(SolverTurn {
                reasoning,
                answer: None,
                action: Some(request),
            })
        }
    }
}

/// Editor replies often fence the program in markdown; unwrap one fence.
pub fn strip_code_fences(text: &str) -> String {
    let trimmed = text.trim();
    if let Some(rest) = trimmed.strip_prefix("```") {
        if let Some(end) = rest.rfind("```") {
            let inner = &rest[..end];
            // Drop a language tag on the opening fence line.
            return match inner.split_once('\n') {
                Some((_first, body)) => body.trim_end().to_string(),
                None => inner.trim().to_string(),
            };
        }
    }
    trimmed.to_string()
}

/// Deterministic, timestamp-free episode events; goldens compare these.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EpisodeEvent {
    Started {
        instance_id: String,
    },
    InitialRender {
        image_hash: String,
    },
    InitialRenderFailed {
        reason: String,
    },
    ImageHashMismatch {
        expected: String,
        actual: String,
    },
    SolverCalled {
        call: u32,
    },
    SolverTurn {
        t: u32,
        answer: Option<String>,
        action: Option<String>,
    },
    MalformedReply {
        t: u32,
        attempt: u32,
        reason: String,
    },
    EditorCalled {
        t: u32,
        purpose: EditorPurpose,
    },
    EditApplied {
        t: u32,
        image_hash: String,
        editor_calls: u32,
    },
    EditBackoff {
        t: u32,
        editor_calls: u32,
    },
    EditUnchangedImage {
        t: u32,
    },
    Challenge {
        t: u32,
        outcome: ChallengeDecision,
        revision: Option<String>,
    },
    ForcedAnswer,
    BackendFailure {
        detail: String,
    },
    Terminated {
        termination: Termination,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditorPurpose {
    Edit,
    Repair,
    Revision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChallengeDecision {
    Accepted,
    Revised,
    ForcedAccept,
}

/// Result of asking the solver to inspect a rendered edit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChallengeOutcome {
    Accept,
    Revised(EditRequest),
}

#[derive(Debug)]
pub struct EpisodeOutcome {
    pub trajectory: Trajectory,
    pub events: Vec<EpisodeEvent>,
}

impl EpisodeOutcome {
    pub fn event_lines(&self) -> Vec<String> {
        self.events
            .iter()
            .map(|e| serde_json::to_string(e).expect("event serializes"))
            .collect()
    }
}

struct EpisodeState<'a> {
    instance: &'a VQAInstance,
    solver: &'a dyn ChatBackend,
    editor: &'a dyn ChatBackend,
    cfg: &'a EpisodeConfig,
    policy: &'a SandboxPolicy,
    store: &'a Store,
    solver_dialog: Vec<ChatMessage>,
    editor_dialog: Vec<ChatMessage>,
    events: Vec<EpisodeEvent>,
    steps: Vec<TrajectoryStep>,
    solver_calls: u32,
    current_code: RenderSpec,
    current_image: String,
}

enum TurnResult {
    Turn(SolverTurn),
    BackendFailed,
}

enum StepResult {
    Applied,
    Failed,
    BackendFailed,
}

/// Runs one episode. Backend failures terminate the episode with a
/// `backend_error` trajectory rather than an `Err`; only store, sandbox, and
/// configuration problems abort.
pub fn run_episode(
    instance: &VQAInstance,
    solver: &dyn ChatBackend,
    editor: &dyn ChatBackend,
    cfg: &EpisodeConfig,
    policy: &SandboxPolicy,
    store: &Store,
    trajectory_id: &str,
) -> Result<EpisodeOutcome, EpisodeError> {
    cfg.validate()?;
    instance.validate()?;

    let mut events = vec![EpisodeEvent::Started {
        instance_id: instance.id.clone(),
    }];

    // I_0: reuse a pre-rendered blob when the instance points at one,
    // otherwise render the initial program now.
    let initial_image = match &instance.image_hash {
        Some(hash) if store.has_blob(hash) => hash.clone(),
        declared => {
            let outcome = renderer::render(&instance.code, policy)?;
            let validation = renderer::validate(&outcome, policy);
            if !validation.pass {
                let reason = validation.reason.unwrap_or_else(|| "render failed".into());
                events.push(EpisodeEvent::InitialRenderFailed {
                    reason: reason.clone(),
                });
                events.push(EpisodeEvent::Terminated {
                    termination: Termination::RenderFailureBackoff,
                });
                return Ok(EpisodeOutcome {
                    trajectory: Trajectory {
                        id: trajectory_id.to_string(),
                        instance_id: instance.id.clone(),
                        steps: Vec::new(),
                        final_answer: None,
                        termination: Termination::RenderFailureBackoff,
                        transcript_ref: None,
                    },
                    events,
                });
            }
            let digest = store.put_image(&outcome.image_bytes.expect("validated image"))?;
            if let Some(expected) = declared {
                if *expected != digest {
                    events.push(EpisodeEvent::ImageHashMismatch {
                        expected: expected.clone(),
                        actual: digest.clone(),
                    });
                }
            }
            digest
        }
    };
    events.push(EpisodeEvent::InitialRender {
        image_hash: initial_image.clone(),
    });

    let templates = &cfg.templates;
    let mut values = BTreeMap::new();
    values.insert("question", instance.question.as_str());
    let first_turn = fill(&templates.first_turn, &values);

    let mut state = EpisodeState {
        instance,
        solver,
        editor,
        cfg,
        policy,
        store,
        solver_dialog: vec![
            ChatMessage::system(&templates.solver_system),
            ChatMessage::user_with_image(first_turn, &initial_image),
        ],
        editor_dialog: vec![ChatMessage::system(&templates.editor_system)],
        events,
        steps: Vec::new(),
        solver_calls: 0,
        current_code: instance.code.clone(),
        current_image: initial_image,
    };

    let trajectory = drive(&mut state, trajectory_id)?;
    Ok(EpisodeOutcome {
        trajectory,
        events: state.events,
    })
}

fn drive(state: &mut EpisodeState, trajectory_id: &str) -> Result<Trajectory, EpisodeError> {
    for t in 0..state.cfg.t_max {
        let turn = match solver_turn_with_reprompts(state, t)? {
            TurnResult::Turn(turn) => turn,
            TurnResult::BackendFailed => {
                return Ok(finish(
                    state,
                    trajectory_id,
                    Termination::BackendError,
                    None,
                ))
            }
        };

        if let Some(answer) = turn.answer {
            state.steps.push(TrajectoryStep {
                t,
                image_hash: state.current_image.clone(),
                reasoning: turn.reasoning,
                action: None,
                edit_failed: false,
            });
            return Ok(finish(
                state,
                trajectory_id,
                Termination::Answered,
                Some(answer),
            ));
        }

        let action = turn.action.expect("parse guarantees one of answer/action");
        let image_at_turn = state.current_image.clone();
        let step_result = execute_edit_step(state, t, &action)?;
        match step_result {
            StepResult::Applied => state.steps.push(TrajectoryStep {
                t,
                image_hash: image_at_turn,
                reasoning: turn.reasoning,
                action: Some(action),
                edit_failed: false,
            }),
            StepResult::Failed => state.steps.push(TrajectoryStep {
                t,
                image_hash: image_at_turn,
                reasoning: turn.reasoning,
                action: Some(action),
                edit_failed: true,
            }),
            StepResult::BackendFailed => {
                state.steps.push(TrajectoryStep {
                    t,
                    image_hash: image_at_turn,
                    reasoning: turn.reasoning,
                    action: Some(action),
                    edit_failed: true,
                });
                return Ok(finish(
                    state,
                    trajectory_id,
                    Termination::BackendError,
                    None,
                ));
            }
        }
    }

    // Step budget spent: one forced-answer turn.
    state.events.push(EpisodeEvent::ForcedAnswer);
    state
        .solver_dialog
        .push(ChatMessage::user(&state.cfg.templates.forced_answer));
    let t = state.cfg.t_max;
    match solver_turn_with_reprompts(state, t)? {
        TurnResult::Turn(turn) => {
            let termination = if turn.answer.is_some() {
                Termination::Answered
            } else {
                Termination::MaxSteps
            };
            let answer = turn.answer.clone();
            state.steps.push(TrajectoryStep {
                t,
                image_hash: state.current_image.clone(),
                reasoning: turn.reasoning,
                action: turn.action,
                edit_failed: false,
            });
            Ok(finish(state, trajectory_id, termination, answer))
        }
        TurnResult::BackendFailed => Ok(finish(
            state,
            trajectory_id,
            Termination::BackendError,
            None,
        )),
    }
}

fn finish(
    state: &mut EpisodeState,
    trajectory_id: &str,
    termination: Termination,
    final_answer: Option<String>,
) -> Trajectory {
    state.events.push(EpisodeEvent::Terminated { termination });
    Trajectory {
        id: trajectory_id.to_string(),
        instance_id: state.instance.id.clone(),
        steps: std::mem::take(&mut state.steps),
        final_answer,
        termination,
        transcript_ref: None,
    }
}

/// Calls the solver, re-prompting with a corrective note on unparseable
/// output up to the configured budget.
fn solver_turn_with_reprompts(
    state: &mut EpisodeState,
    t: u32,
) -> Result<TurnResult, EpisodeError> {
    for attempt in 0..=state.cfg.max_reprompts {
        state.solver_calls += 1;
        state.events.push(EpisodeEvent::SolverCalled {
            call: state.solver_calls,
        });
        let replies = match state
            .solver
            .complete(&state.solver_dialog, &state.cfg.solver_params)
        {
            Ok(r) => r,
            Err(e) => {
                state.events.push(EpisodeEvent::BackendFailure {
                    detail: backend_detail(&e),
                });
                return Ok(TurnResult::BackendFailed);
            }
        };
        let text = replies.first().map(|m| m.text()).unwrap_or_default();
        state.solver_dialog.push(ChatMessage::assistant(&text));
        match parse_solver_output(&text) {
            Ok(turn) => {
                state.events.push(EpisodeEvent::SolverTurn {
                    t,
                    answer: turn.answer.clone(),
                    action: turn.action.as_ref().map(|a| a.instruction.clone()),
                });
                return Ok(TurnResult::Turn(turn));
            }
            Err(reason) => {
                state.events.push(EpisodeEvent::MalformedReply {
                    t,
                    attempt,
                    reason: reason.to_string(),
                });
                if attempt < state.cfg.max_reprompts {
                    let mut values = BTreeMap::new();
                    let problem = reason.to_string();
                    values.insert("problem", problem.as_str());
                    state.solver_dialog.push(ChatMessage::user(fill(
                        &state.cfg.templates.corrective,
                        &values,
                    )));
                }
            }
        }
    }
    state.events.push(EpisodeEvent::BackendFailure {
        detail: "solver output unparseable after corrective re-prompts".into(),
    });
    Ok(TurnResult::BackendFailed)
}

/// Runs the edit/repair/challenge machinery for one step. Editor calls are
/// bounded by 1 + r_max + revisions_cap.
fn execute_edit_step(
    state: &mut EpisodeState,
    t: u32,
    action: &EditRequest,
) -> Result<StepResult, EpisodeError> {
    let mut repairs_remaining = state.cfg.r_max;
    let mut revisions_remaining = state.cfg.revisions_cap;
    let mut current_action = action.clone();
    let mut step_editor_calls = 0u32;

    loop {
        // Ask the editor for a complete replacement program.
        let purpose = if current_action.instruction == action.instruction {
            EditorPurpose::Edit
        } else {
            EditorPurpose::Revision
        };
        state.events.push(EpisodeEvent::EditorCalled { t, purpose });
        step_editor_calls += 1;
        let mut values = BTreeMap::new();
        values.insert("action", current_action.instruction.as_str());
        values.insert("code", state.current_code.source_text.as_str());
        let request = fill(&state.cfg.templates.edit_request, &values);
        let mut messages = state.editor_dialog.clone();
        messages.push(ChatMessage::user(&request));
        let reply = match state.editor.complete(&messages, &state.cfg.editor_params) {
            Ok(r) => r,
            Err(e) => {
                state.events.push(EpisodeEvent::BackendFailure {
                    detail: backend_detail(&e),
                });
                return Ok(StepResult::BackendFailed);
            }
        };
        let new_source = strip_code_fences(&reply.first().map(|m| m.text()).unwrap_or_default());
        let candidate = RenderSpec {
            source_text: new_source,
            ..state.current_code.clone()
        };

        // Render with the remaining repair budget; repairs go back to the
        // editor with the error log attached.
        let mut fixer_calls = 0u32;
        let repair_result = {
            let editor = state.editor;
            let editor_params = &state.cfg.editor_params;
            let repair_template = &state.cfg.templates.repair_request;
            let editor_dialog = &state.editor_dialog;
            let events = &mut state.events;
            let mut fixer = |spec: &RenderSpec, failure: &str| -> Result<RenderSpec, RenderError> {
                fixer_calls += 1;
                events.push(EpisodeEvent::EditorCalled {
                    t,
                    purpose: EditorPurpose::Repair,
                });
                let mut values = BTreeMap::new();
                values.insert("code", spec.source_text.as_str());
                values.insert("errors", failure);
                let mut messages = editor_dialog.clone();
                messages.push(ChatMessage::user(fill(repair_template, &values)));
                let reply = editor
                    .complete(&messages, editor_params)
                    .map_err(|e| RenderError::Backend(backend_detail(&e)))?;
                Ok(RenderSpec {
                    source_text: strip_code_fences(
                        &reply.first().map(|m| m.text()).unwrap_or_default(),
                    ),
                    ..spec.clone()
                })
            };
            renderer::repair_loop(&candidate, &mut fixer, repairs_remaining, state.policy)
        };
        let repair_result = match repair_result {
            Ok(r) => r,
            Err(RenderError::Backend(detail)) => {
                state.events.push(EpisodeEvent::BackendFailure { detail });
                return Ok(StepResult::BackendFailed);
            }
            Err(e) => return Err(e.into()),
        };
        repairs_remaining = repairs_remaining.saturating_sub(fixer_calls);
        step_editor_calls += fixer_calls;

        match repair_result {
            RepairOutcome::Backoff { last_failure, .. } => {
                state.events.push(EpisodeEvent::EditBackoff {
                    t,
                    editor_calls: step_editor_calls,
                });
                let mut values = BTreeMap::new();
                let notice: String = last_failure.chars().take(400).collect();
                values.insert("failure_notice", notice.as_str());
                state.solver_dialog.push(ChatMessage::user(fill(
                    &state.cfg.templates.failure_notice,
                    &values,
                )));
                return Ok(StepResult::Failed);
            }
            RepairOutcome::Success {
                spec, image_bytes, ..
            } => {
                let digest = state.store.put_image(&image_bytes)?;
                if digest == state.current_image {
                    // The editor returned a program rendering the very same
                    // image; treat it as a failed edit so trajectories never
                    // claim a change that did not happen.
                    state.events.push(EpisodeEvent::EditUnchangedImage { t });
                    let mut values = BTreeMap::new();
                    values.insert("failure_notice", "the edit left the image unchanged");
                    state.solver_dialog.push(ChatMessage::user(fill(
                        &state.cfg.templates.failure_notice,
                        &values,
                    )));
                    return Ok(StepResult::Failed);
                }
                state.events.push(EpisodeEvent::EditApplied {
                    t,
                    image_hash: digest.clone(),
                    editor_calls: step_editor_calls,
                });
                state.current_code = spec;
                // Record the served request pair in the editor dialog.
                state.editor_dialog.push(ChatMessage::user(&request));
                state
                    .editor_dialog
                    .push(ChatMessage::assistant(&state.current_code.source_text));

                if !state.cfg.challenge_enabled {
                    let mut values = BTreeMap::new();
                    values.insert("edit_result", current_action.instruction.as_str());
                    let text = fill(&state.cfg.templates.edit_result, &values);
                    state
                        .solver_dialog
                        .push(ChatMessage::user_with_image(text, &digest));
                    state.current_image = digest;
                    return Ok(StepResult::Applied);
                }

                match challenge_round(state, t, &digest, &current_action)? {
                    None => return Ok(StepResult::BackendFailed),
                    Some(ChallengeOutcome::Accept) => {
                        state
                            .solver_dialog
                            .push(ChatMessage::user(&state.cfg.templates.resume));
                        state.current_image = digest;
                        return Ok(StepResult::Applied);
                    }
                    Some(ChallengeOutcome::Revised(revised)) => {
                        if revisions_remaining == 0 {
                            state.events.push(EpisodeEvent::Challenge {
                                t,
                                outcome: ChallengeDecision::ForcedAccept,
                                revision: Some(revised.instruction.clone()),
                            });
                            state
                                .solver_dialog
                                .push(ChatMessage::user(&state.cfg.templates.resume));
                            state.current_image = digest;
                            return Ok(StepResult::Applied);
                        }
                        state.events.push(EpisodeEvent::Challenge {
                            t,
                            outcome: ChallengeDecision::Revised,
                            revision: Some(revised.instruction.clone()),
                        });
                        revisions_remaining -= 1;
                        state.current_image = digest;
                        current_action = revised;
                    }
                }
            }
        }
    }
}

/// Shows the rendered edit to the solver for inspection. A reply containing
/// one well-formed tool call is a revision; anything else accepts
/// (fail-open on malformed output). `None` signals a backend failure.
fn challenge_round(
    state: &mut EpisodeState,
    t: u32,
    image_digest: &str,
    action: &EditRequest,
) -> Result<Option<ChallengeOutcome>, EpisodeError> {
    let mut values = BTreeMap::new();
    values.insert("edit_result", action.instruction.as_str());
    let prompt = fill(&state.cfg.templates.challenge, &values);
    state
        .solver_dialog
        .push(ChatMessage::user_with_image(prompt, image_digest));
    state.solver_calls += 1;
    state.events.push(EpisodeEvent::SolverCalled {
        call: state.solver_calls,
    });
    let replies = match state
        .solver
        .complete(&state.solver_dialog, &state.cfg.solver_params)
    {
        Ok(r) => r,
        Err(e) => {
            state.events.push(EpisodeEvent::BackendFailure {
                detail: backend_detail(&e),
            });
            return Ok(None);
        }
    };
    let text = replies.first().map(|m| m.text()).unwrap_or_default();
    state.solver_dialog.push(ChatMessage::assistant(&text));

    match parse_solver_output(&text) {
        Ok(SolverTurn {
            action: Some(revised),
            ..
        }) => Ok(Some(ChallengeOutcome::Revised(revised))),
        _ => {
            // Covers plain acceptance text, answers, and malformed replies.
            state.events.push(EpisodeEvent::Challenge {
                t,
                outcome: ChallengeDecision::Accepted,
                revision: None,
            });
            Ok(Some(ChallengeOutcome::Accept))
        }
    }
}

fn backend_detail(e: &GatewayError) -> String {
    e.to_string()
}

/// True when every image hash the trajectory references exists as a blob.
pub fn images_present(trajectory: &Trajectory, store: &Store) -> bool {
    trajectory.image_hashes().iter().all(|h| store.has_blob(h))
}

/// Extracts the image digests a dialog references, in order.
pub fn dialog_image_refs(messages: &[ChatMessage]) -> Vec<String> {
    let mut refs = Vec::new();
    for m in messages {
        if m.role != Role::Assistant {
            for part in &m.content {
                if let ContentPart::ImageRef { digest } = part {
                    refs.push(digest.clone());
                }
            }
        }
    }
    refs
}
