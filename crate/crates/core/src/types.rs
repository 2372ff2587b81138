//! Domain vocabulary shared across the pipeline: VQA instances, rendering
//! specs, trajectories, and edit requests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Schema version written into every persisted trajectory record. Readers
/// reject anything newer.
pub const SCHEMA_VERSION: u32 = 1;

/// Where a VQA instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSource {
    SyntheticCorpus,
    Img2code,
}

impl InstanceSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            InstanceSource::SyntheticCorpus => "synthetic_corpus",
            InstanceSource::Img2code => "img2code",
        }
    }
}

/// Rendering program plus the renderer profile that executes it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub language_tag: String,
    pub source_text: String,
    pub renderer_profile: String,
}

impl RenderSpec {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.source_text.is_empty() {
            return Err(ValidationError::new("render spec has empty source_text"));
        }
        if self.renderer_profile.is_empty() {
            return Err(ValidationError::new(
                "render spec has empty renderer_profile",
            ));
        }
        Ok(())
    }
}

/// One code-rendered VQA instance: rendering code, rendered image digest,
/// question, gold answer, provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VQAInstance {
    pub id: String,
    pub code: RenderSpec,
    /// Hex digest of the rendered image bytes. None until first rendered.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_hash: Option<String>,
    pub question: String,
    pub answer: String,
    pub source: InstanceSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discipline: Option<String>,
}

impl VQAInstance {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() {
            return Err(ValidationError::new("instance id is empty"));
        }
        if self.answer.trim().is_empty() {
            return Err(ValidationError::new(format!(
                "instance {} has an empty answer",
                self.id
            )));
        }
        self.code.validate()?;
        Ok(())
    }
}

/// Free-form visual-manipulation instruction issued by the solver.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    /// Trimmed instruction text.
    pub instruction: String,
    /// Exact text enclosed by the tool-call delimiters, untrimmed.
    pub raw_span: String,
}

impl EditRequest {
    pub fn new(raw_span: impl Into<String>) -> Result<Self, ValidationError> {
        let raw_span = raw_span.into();
        let instruction = raw_span.trim().to_string();
        if instruction.is_empty() {
            return Err(ValidationError::new("edit request instruction is empty"));
        }
        Ok(EditRequest {
            instruction,
            raw_span,
        })
    }
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    MaxSteps,
    RenderFailureBackoff,
    BackendError,
}

impl Termination {
    pub fn as_str(&self) -> &'static str {
        match self {
            Termination::Answered => "answered",
            Termination::MaxSteps => "max_steps",
            Termination::RenderFailureBackoff => "render_failure_backoff",
            Termination::BackendError => "backend_error",
        }
    }
}

/// One solver turn within a trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    /// Turn index, starting at zero.
    pub t: u32,
    /// Image visible to the solver during this turn.
    pub image_hash: String,
    /// Solver chain-of-thought for the turn.
    pub reasoning: String,
    /// Edit request issued this turn, if any. Never set together with the
    /// trajectory's final answer on the same step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<EditRequest>,
    /// True when the edit could not be rendered and repair was exhausted.
    #[serde(default)]
    pub edit_failed: bool,
}

/// Full episode record: ordered steps, final answer, termination cause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub instance_id: String,
    pub steps: Vec<TrajectoryStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_answer: Option<String>,
    pub termination: Termination,
    /// Pointer to the raw dialog log, when one was kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_ref: Option<String>,
}

impl Trajectory {
    /// Structural invariants enforced before any persistence:
    /// answered <=> final answer present; only the last step may be
    /// action-free; non-failed edits must be followed by a different image.
    pub fn validate(&self) -> Result<(), ValidationError> {
        if self.id.is_empty() || self.instance_id.is_empty() {
            return Err(ValidationError::new(
                "trajectory id fields must be non-empty",
            ));
        }
        match self.termination {
            Termination::Answered => {
                if self.final_answer.is_none() {
                    return Err(ValidationError::new(format!(
                        "trajectory {}: answered without a final answer",
                        self.id
                    )));
                }
            }
            _ => {
                if self.final_answer.is_some() {
                    return Err(ValidationError::new(format!(
                        "trajectory {}: final answer present but termination is {}",
                        self.id,
                        self.termination.as_str()
                    )));
                }
            }
        }
        if self.steps.is_empty() {
            // Episodes that never produced a first image are recorded with a
            // failure termination and no steps.
            return match self.termination {
                Termination::RenderFailureBackoff | Termination::BackendError => Ok(()),
                _ => Err(ValidationError::new(format!(
                    "trajectory {}: no steps but termination is {}",
                    self.id,
                    self.termination.as_str()
                ))),
            };
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.t as usize != i {
                return Err(ValidationError::new(format!(
                    "trajectory {}: step {} carries index {}",
                    self.id, i, step.t
                )));
            }
            if step.image_hash.is_empty() {
                return Err(ValidationError::new(format!(
                    "trajectory {}: step {} has no image",
                    self.id, i
                )));
            }
            let is_last = i + 1 == self.steps.len();
            if is_last {
                // Exclusivity: the answering step never carries an action.
                if self.final_answer.is_some() && step.action.is_some() {
                    return Err(ValidationError::new(format!(
                        "trajectory {}: final step has both an answer and an action",
                        self.id
                    )));
                }
            } else {
                if step.action.is_none() {
                    return Err(ValidationError::new(format!(
                        "trajectory {}: non-final step {} has no action",
                        self.id, i
                    )));
                }
                let next = &self.steps[i + 1];
                if !step.edit_failed && next.image_hash == step.image_hash {
                    return Err(ValidationError::new(format!(
                        "trajectory {}: step {} edit succeeded but the image did not change",
                        self.id, i
                    )));
                }
            }
        }
        Ok(())
    }

    /// Image hashes in step order, deduplicated, preserving first appearance.
    pub fn image_hashes(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for step in &self.steps {
            if !seen.contains(&step.image_hash.as_str()) {
                seen.push(step.image_hash.as_str());
            }
        }
        seen
    }

    /// Number of steps that issued an edit request.
    pub fn edit_count(&self) -> usize {
        self.steps.iter().filter(|s| s.action.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct ValidationError {
    pub message: String,
}

impl ValidationError {
    pub fn new(message: impl Into<String>) -> Self {
        ValidationError {
            message: message.into(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> RenderSpec {
        RenderSpec {
            language_tag: "sh".into(),
            source_text: "printf x".into(),
            renderer_profile: "shell-png".into(),
        }
    }

    fn answered_single_step() -> Trajectory {
        Trajectory {
            id: "traj-1".into(),
            instance_id: "inst-1".into(),
            steps: vec![TrajectoryStep {
                t: 0,
                image_hash: "aa".into(),
                reasoning: "the answer is visible".into(),
                action: None,
                edit_failed: false,
            }],
            final_answer: Some("42".into()),
            termination: Termination::Answered,
            transcript_ref: None,
        }
    }

    #[test]
    fn valid_single_step_passes() {
        answered_single_step().validate().unwrap();
    }

    #[test]
    fn answered_requires_final_answer() {
        let mut t = answered_single_step();
        t.final_answer = None;
        assert!(t.validate().is_err());
    }

    #[test]
    fn final_step_rejects_answer_plus_action() {
        let mut t = answered_single_step();
        t.steps[0].action = Some(EditRequest::new("highlight A").unwrap());
        assert!(t.validate().is_err());
    }

    #[test]
    fn successful_edit_must_change_image() {
        let mut t = answered_single_step();
        t.steps = vec![
            TrajectoryStep {
                t: 0,
                image_hash: "aa".into(),
                reasoning: "needs an edit".into(),
                action: Some(EditRequest::new("draw a tangent line").unwrap()),
                edit_failed: false,
            },
            TrajectoryStep {
                t: 1,
                image_hash: "aa".into(),
                reasoning: "done".into(),
                action: None,
                edit_failed: false,
            },
        ];
        assert!(t.validate().is_err());
        t.steps[0].edit_failed = true;
        t.validate().unwrap();
    }

    #[test]
    fn empty_answer_rejected() {
        let inst = VQAInstance {
            id: "i".into(),
            code: spec(),
            image_hash: None,
            question: "q".into(),
            answer: "  ".into(),
            source: InstanceSource::SyntheticCorpus,
            discipline: None,
        };
        assert!(inst.validate().is_err());
    }

    #[test]
    fn edit_request_trims_and_rejects_empty() {
        let e = EditRequest::new("  circle the apex  ").unwrap();
        assert_eq!(e.instruction, "circle the apex");
        assert_eq!(e.raw_span, "  circle the apex  ");
        assert!(EditRequest::new("   ").is_err());
    }
}
